#include "scop/digest.hpp"

#include <openssl/sha.h>
#include <zlib.h>

namespace scop {

std::string sha256_hex(const void* data, size_t len) {
    unsigned char out[SHA256_DIGEST_LENGTH];
    SHA256(static_cast<const unsigned char*>(data), len, out);
    static const char* hex = "0123456789abcdef";
    std::string s;
    s.reserve(2 * SHA256_DIGEST_LENGTH);
    for (unsigned char b : out) {
        s.push_back(hex[b >> 4]);
        s.push_back(hex[b & 0xf]);
    }
    return s;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_hex(const std::vector<uint8_t>& bytes) {
    return sha256_hex(bytes.data(), bytes.size());
}

uint32_t crc32_of(const void* data, size_t len) {
    return uint32_t(::crc32(0L, static_cast<const Bytef*>(data), uInt(len)));
}

}  // namespace scop

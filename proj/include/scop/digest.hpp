#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace scop {

// SHA-256 hex digest (OpenSSL-backed). Used for weight-freeze checks and
// content-addressed artifact names.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_hex(const std::vector<uint8_t>& bytes);

// CRC32 (zlib). Guards checkpoint sections against silent corruption.
uint32_t crc32_of(const void* data, size_t len);

}  // namespace scop

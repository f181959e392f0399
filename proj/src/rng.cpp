#include "scop/rng.hpp"

#include <cmath>

#include "scop/common.hpp"

namespace scop {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

Rng Rng::stream(uint64_t root_seed, std::string_view name, uint64_t index) {
    uint64_t h = splitmix64(root_seed);
    h = splitmix64(h ^ fnv1a(name));
    h = splitmix64(h ^ index);
    return Rng(h);
}

int64_t Rng::uniform_int(int64_t n) {
    require(n > 0, "Rng::uniform_int: n must be positive, got ", n);
    // Rejection sampling to avoid modulo bias.
    uint64_t un = uint64_t(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do {
        v = gen_();
    } while (v >= limit);
    return int64_t(v % un);
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace scop

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace scop {

// Deterministic random source. All randomness in the project flows from one
// root seed through named sub-streams, so each stage draws from its own
// stream and stays reproducible regardless of what other stages do.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // Derives an independent stream from (root, name, index). The name keys
    // the stage ("pretrain.shuffle", "knockoff.sample", ...), the index keys
    // per-item streams (example index, epoch number).
    static Rng stream(uint64_t root_seed, std::string_view name, uint64_t index = 0);

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    int64_t uniform_int(int64_t n);

    // Standard normal via Box-Muller. Stateless across calls: every call
    // consumes exactly two uniforms.
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates shuffle with a fixed algorithm (std::shuffle's draw
    // sequence is implementation-defined).
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_int(int64_t(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace scop

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "scop/dataio.hpp"
#include "scop/rng.hpp"
#include "scop/tensor.hpp"

namespace scop {

// Second-order Gaussian knockoff generator: fits (mu, Sigma) to data rows,
// chooses the equicorrelated diagonal s, and samples knockoff counterparts
// from the conditional Gaussian. Labels never enter by signature.
struct KnockoffModel {
    Tensor mu;        // (d)
    Tensor sigma;     // (d,d) sample covariance plus ridge
    Tensor s;         // (d) knockoff diagonal
    double ridge = 0; // absolute ridge applied to sigma's diagonal

    // sampling cache
    Tensor cond_gain;    // (d,d): I - diag{s} Sigma^-1
    Tensor cond_factor;  // (d,d): F with F F^T = 2 diag{s} - diag{s} Sigma^-1 diag{s}
};

KnockoffModel fit_knockoff_model(const Tensor& data, double ridge_rel = 1e-3);

// On the correlation-scaled matrix: s_j = min(2 lambda_min, 1) uniformly,
// rescaled back to covariance units. Keeps 2 Sigma - diag{s} PSD.
Tensor choose_s_equicorrelated(const Tensor& sigma);

// One conditional draw x~ | x. Consumes exactly d normals from rng.
Tensor sample_knockoff(const KnockoffModel& m, const Tensor& x, Rng& rng);

// Max-entry gap between the empirical first two moments of [real, knockoff]
// and the arrangement with columns in `subset` swapped across the two blocks.
double swap_moment_test(const Tensor& real, const Tensor& knockoff,
                        const std::vector<int64_t>& subset);

// Lemma-2 companion: a linear map W with per-layer knockoff diagonals and a
// bias covariance whose joint [b, b~] distribution keeps the propagated pair
// a valid second-order knockoff.
struct BiasPairModel {
    Tensor W;        // (d_l, d_next)
    Tensor s_l;      // (d_l)
    Tensor s_next;   // (d_next)
    Tensor sigma_b;  // (d_next, d_next)

    Tensor joint_factor;  // (2 d_next, 2 d_next), F F^T = joint covariance
    double min_eigenvalue = 0.0;
};

// Validates the PSD invariant of the joint covariance
//   [[Sigma_b, Sigma_b + W^T diag{s_l} W - diag{s_next}], [sym., Sigma_b]]
// and prepares the sampling factor.
BiasPairModel make_bias_pair_model(Tensor W, Tensor s_l, Tensor s_next, Tensor sigma_b);

// Feasible default: s_next = lambda_max(W^T diag{s_l} W) uniformly and
// Sigma_b = c I with c the smallest power of ten making the joint PSD.
BiasPairModel default_bias_pair_model(Tensor W, Tensor s_l);

// Zero-mean draw of (b, b~). Consumes exactly 2 d_next normals.
std::pair<Tensor, Tensor> sample_bias_pair(const BiasPairModel& m, Rng& rng);

// Per-example conditional sampling over a whole dataset with index-derived
// RNG streams; values are rounded to f32 and clamped to the per-channel data
// range, then written to the cache. Reloading the cache reproduces the
// returned dataset exactly.
Dataset generate_knockoff_dataset(const KnockoffModel& m, const Dataset& data, uint64_t seed,
                                  const std::string& cache_path);

void write_knockoff_cache(const std::string& path, const Tensor& images);
Tensor read_knockoff_cache(const std::string& path);

}  // namespace scop

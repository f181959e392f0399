#include "scop/knockoff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "scop/common.hpp"

namespace scop {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

static Tensor tensor_from_mat(const RowMat& m) {
    Tensor t({m.rows(), m.cols()});
    MapMat(t.ptr(), m.rows(), m.cols()) = m;
    return t;
}

// Deterministic symmetric factor F with F F^T = A (eigenvalues clamped at 0).
static RowMat psd_factor(const RowMat& a, double clamp_tol, const char* what) {
    RowMat sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<RowMat> es(sym);
    require(es.info() == Eigen::Success, what, ": eigendecomposition failed");
    const double min_eig = es.eigenvalues().minCoeff();
    require(min_eig >= -clamp_tol, what, ": matrix is not PSD; most negative eigenvalue = ",
            min_eig);
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * lam.asDiagonal();
}

Tensor choose_s_equicorrelated(const Tensor& sigma) {
    require(sigma.rank() == 2 && sigma.dim(0) == sigma.dim(1),
            "choose_s_equicorrelated: sigma must be square, got ", shape_str(sigma.shape));
    const int64_t d = sigma.dim(0);
    ConstMapMat sm(sigma.ptr(), d, d);
    Eigen::VectorXd diag = sm.diagonal();
    Eigen::VectorXd inv_sqrt(d);
    for (int64_t j = 0; j < d; ++j) {
        require(diag[j] >= 0.0, "choose_s_equicorrelated: negative variance at coordinate ", j);
        inv_sqrt[j] = diag[j] > 0.0 ? 1.0 / std::sqrt(diag[j]) : 0.0;
    }
    RowMat corr = inv_sqrt.asDiagonal() * sm * inv_sqrt.asDiagonal();
    for (int64_t j = 0; j < d; ++j) corr(j, j) = diag[j] > 0.0 ? 1.0 : 0.0;
    Eigen::SelfAdjointEigenSolver<RowMat> es(0.5 * (corr + corr.transpose()));
    require(es.info() == Eigen::Success, "choose_s_equicorrelated: eigendecomposition failed");
    const double lam_min = std::max(0.0, es.eigenvalues().minCoeff());
    const double s_corr = std::min(2.0 * lam_min, 1.0);
    Tensor s({d});
    for (int64_t j = 0; j < d; ++j) s.data[j] = s_corr * diag[j];
    return s;
}

KnockoffModel fit_knockoff_model(const Tensor& data, double ridge_rel) {
    require(data.rank() == 2, "fit_knockoff_model: data must be a matrix, got ",
            shape_str(data.shape));
    const int64_t n = data.dim(0), d = data.dim(1);
    require(n >= 2, "fit_knockoff_model: need at least 2 rows, got ", n);
    require(d >= 1, "fit_knockoff_model: need at least 1 column");
    require(data.all_finite(), "fit_knockoff_model: non-finite value in data");
    require(ridge_rel >= 0.0, "fit_knockoff_model: ridge must be non-negative");

    KnockoffModel m;
    ConstMapMat x(data.ptr(), n, d);
    Eigen::VectorXd mu = x.colwise().mean();
    RowMat centered = x.rowwise() - mu.transpose();
    RowMat sigma = (centered.transpose() * centered) / static_cast<double>(n - 1);
    const double mean_diag = sigma.diagonal().mean();
    m.ridge = ridge_rel * std::max(mean_diag, 1e-300);
    sigma.diagonal().array() += m.ridge;

    m.mu = Tensor({d});
    Eigen::Map<Eigen::VectorXd>(m.mu.ptr(), d) = mu;
    m.sigma = tensor_from_mat(sigma);
    m.s = choose_s_equicorrelated(m.sigma);

    // conditional gain I - diag{s} Sigma^-1 and covariance 2S - S Sigma^-1 S
    Eigen::LLT<RowMat> llt(sigma);
    require(llt.info() == Eigen::Success,
            "fit_knockoff_model: covariance is singular; refit with a positive ridge");
    Eigen::VectorXd s = Eigen::Map<Eigen::VectorXd>(m.s.ptr(), d);
    RowMat sigma_inv_s = llt.solve(RowMat(s.asDiagonal()));  // Sigma^-1 diag{s}
    RowMat s_sigma_inv = sigma_inv_s.transpose();
    RowMat gain = RowMat::Identity(d, d) - s_sigma_inv;
    RowMat cond = 2.0 * RowMat(s.asDiagonal()) - s_sigma_inv * s.asDiagonal();
    m.cond_gain = tensor_from_mat(gain);
    m.cond_factor = tensor_from_mat(psd_factor(cond, 1e-6 * std::max(1.0, mean_diag),
                                               "knockoff conditional covariance"));
    return m;
}

Tensor sample_knockoff(const KnockoffModel& m, const Tensor& x, Rng& rng) {
    const int64_t d = m.mu.numel();
    require(x.numel() == d, "sample_knockoff: x has ", x.numel(), " entries, model expects ", d);
    Eigen::VectorXd z(d);
    for (int64_t j = 0; j < d; ++j) z[j] = rng.normal();
    ConstMapMat gain(m.cond_gain.ptr(), d, d);
    ConstMapMat factor(m.cond_factor.ptr(), d, d);
    Eigen::Map<const Eigen::VectorXd> mu(m.mu.ptr(), d);
    Eigen::Map<const Eigen::VectorXd> xv(x.ptr(), d);
    Eigen::VectorXd out = mu + gain * (xv - mu) + factor * z;
    Tensor t({d});
    Eigen::Map<Eigen::VectorXd>(t.ptr(), d) = out;
    return t;
}

double swap_moment_test(const Tensor& real, const Tensor& knockoff,
                        const std::vector<int64_t>& subset) {
    check_same_shape(real, knockoff, "swap_moment_test");
    require(real.rank() == 2, "swap_moment_test: inputs must be matrices");
    const int64_t n = real.dim(0), d = real.dim(1);
    std::vector<int64_t> perm(static_cast<size_t>(2 * d));
    for (int64_t j = 0; j < 2 * d; ++j) perm[static_cast<size_t>(j)] = j;
    for (int64_t j : subset) {
        require(j >= 0 && j < d, "swap_moment_test: subset index ", j, " out of range [0,", d,
                ")");
        perm[static_cast<size_t>(j)] = d + j;
        perm[static_cast<size_t>(d + j)] = j;
    }
    RowMat joint(n, 2 * d);
    joint.leftCols(d) = ConstMapMat(real.ptr(), n, d);
    joint.rightCols(d) = ConstMapMat(knockoff.ptr(), n, d);
    Eigen::VectorXd mean = joint.colwise().mean();
    RowMat centered = joint.rowwise() - mean.transpose();
    RowMat cov = (centered.transpose() * centered) / static_cast<double>(n);
    double gap = 0.0;
    for (int64_t i = 0; i < 2 * d; ++i) {
        gap = std::max(gap, std::abs(mean[i] - mean[perm[static_cast<size_t>(i)]]));
        for (int64_t j = 0; j < 2 * d; ++j)
            gap = std::max(gap, std::abs(cov(i, j) - cov(perm[static_cast<size_t>(i)],
                                                         perm[static_cast<size_t>(j)])));
    }
    return gap;
}

BiasPairModel make_bias_pair_model(Tensor W, Tensor s_l, Tensor s_next, Tensor sigma_b) {
    require(W.rank() == 2, "bias pair model: W must be a matrix");
    const int64_t dl = W.dim(0), dn = W.dim(1);
    require(s_l.numel() == dl, "bias pair model: s_l length ", s_l.numel(), " vs W rows ", dl);
    require(s_next.numel() == dn, "bias pair model: s_next length ", s_next.numel(),
            " vs W cols ", dn);
    require(sigma_b.rank() == 2 && sigma_b.dim(0) == dn && sigma_b.dim(1) == dn,
            "bias pair model: sigma_b must be ", dn, "x", dn);
    for (int64_t j = 0; j < dl; ++j)
        require(s_l.data[j] >= 0.0, "bias pair model: s_l must be non-negative");

    ConstMapMat wm(W.ptr(), dl, dn);
    Eigen::Map<const Eigen::VectorXd> sl(s_l.ptr(), dl);
    RowMat wsw = wm.transpose() * sl.asDiagonal() * wm;
    RowMat off = ConstMapMat(sigma_b.ptr(), dn, dn);
    off += wsw;
    for (int64_t j = 0; j < dn; ++j) off(j, j) -= s_next.data[j];
    RowMat joint(2 * dn, 2 * dn);
    joint.topLeftCorner(dn, dn) = ConstMapMat(sigma_b.ptr(), dn, dn);
    joint.bottomRightCorner(dn, dn) = ConstMapMat(sigma_b.ptr(), dn, dn);
    joint.topRightCorner(dn, dn) = off;
    joint.bottomLeftCorner(dn, dn) = off.transpose();

    Eigen::SelfAdjointEigenSolver<RowMat> es(0.5 * (joint + joint.transpose()));
    require(es.info() == Eigen::Success, "bias pair model: eigendecomposition failed");
    const double min_eig = es.eigenvalues().minCoeff();
    require(min_eig >= -1e-8,
            "bias pair model: joint covariance is not PSD; most negative eigenvalue = ",
            min_eig);
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    RowMat factor = es.eigenvectors() * lam.asDiagonal();

    BiasPairModel m;
    m.W = std::move(W);
    m.s_l = std::move(s_l);
    m.s_next = std::move(s_next);
    m.sigma_b = std::move(sigma_b);
    m.joint_factor = tensor_from_mat(factor);
    m.min_eigenvalue = min_eig;
    return m;
}

BiasPairModel default_bias_pair_model(Tensor W, Tensor s_l) {
    require(W.rank() == 2, "bias pair model: W must be a matrix");
    const int64_t dl = W.dim(0), dn = W.dim(1);
    require(s_l.numel() == dl, "bias pair model: s_l length mismatch");
    ConstMapMat wm(W.ptr(), dl, dn);
    Eigen::Map<const Eigen::VectorXd> sl(s_l.ptr(), dl);
    RowMat wsw = wm.transpose() * sl.asDiagonal() * wm;
    Eigen::SelfAdjointEigenSolver<RowMat> es(0.5 * (wsw + wsw.transpose()));
    require(es.info() == Eigen::Success, "bias pair model: eigendecomposition failed");
    const double lam_max = std::max(0.0, es.eigenvalues().maxCoeff());
    const double lam_min = std::max(0.0, es.eigenvalues().minCoeff());
    Tensor s_next({dn}, lam_max);
    // Smallest power of ten c with [[cI, cI + WSW - lam_max I], [sym., cI]] PSD;
    // the binding constraint is 2c >= lam_max - lam_min.
    const double need = std::max((lam_max - lam_min) / 2.0, 1e-10);
    double c = std::pow(10.0, std::ceil(std::log10(need)));
    for (int attempt = 0; attempt < 40; ++attempt) {
        Tensor sigma_b({dn, dn});
        for (int64_t j = 0; j < dn; ++j) sigma_b.data[j * dn + j] = c;
        try {
            return make_bias_pair_model(W, s_l, s_next, std::move(sigma_b));
        } catch (const Error&) {
            c *= 10.0;
        }
    }
    fail("default_bias_pair_model: could not find a PSD-feasible bias covariance");
}

std::pair<Tensor, Tensor> sample_bias_pair(const BiasPairModel& m, Rng& rng) {
    const int64_t dn = m.s_next.numel();
    Eigen::VectorXd z(2 * dn);
    for (int64_t j = 0; j < 2 * dn; ++j) z[j] = rng.normal();
    ConstMapMat factor(m.joint_factor.ptr(), 2 * dn, 2 * dn);
    Eigen::VectorXd bb = factor * z;
    Tensor b({dn}), bt({dn});
    for (int64_t j = 0; j < dn; ++j) {
        b.data[j] = bb[j];
        bt.data[j] = bb[dn + j];
    }
    return {std::move(b), std::move(bt)};
}

// ---- dataset-level generation and cache -----------------------------------

static constexpr char kCacheMagic[8] = {'S', 'C', 'O', 'P', 'K', 'N', 'C', 'K'};
static constexpr uint32_t kCacheVersion = 1;

void write_knockoff_cache(const std::string& path, const Tensor& images) {
    require(images.rank() == 4, "knockoff cache: images must be rank 4");
    std::string out(kCacheMagic, sizeof(kCacheMagic));
    auto put_u32 = [&out](uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    put_u32(kCacheVersion);
    put_u32(static_cast<uint32_t>(images.dim(0)));
    put_u32(3);
    put_u32(static_cast<uint32_t>(images.dim(1)));
    put_u32(static_cast<uint32_t>(images.dim(2)));
    put_u32(static_cast<uint32_t>(images.dim(3)));
    out.reserve(out.size() + static_cast<size_t>(images.numel()) * 4);
    for (int64_t i = 0; i < images.numel(); ++i) {
        const float f = static_cast<float>(images.data[i]);
        uint32_t u;
        std::memcpy(&u, &f, 4);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "knockoff cache: cannot open '", path, "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    require(f.good(), "knockoff cache: write failure on '", path, "'");
}

Tensor read_knockoff_cache(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "knockoff cache: cannot open '", path, "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t pos = 0;
    auto take = [&](size_t n) -> const uint8_t* {
        require(pos + n <= buf.size(), "knockoff cache '", path, "': truncated at offset ", pos);
        const uint8_t* p = reinterpret_cast<const uint8_t*>(buf.data()) + pos;
        pos += n;
        return p;
    };
    auto get_u32 = [&]() -> uint32_t {
        const uint8_t* p = take(4);
        return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
               (uint32_t(p[3]) << 24);
    };
    require(std::memcmp(take(8), kCacheMagic, 8) == 0, "knockoff cache '", path,
            "': bad magic");
    const uint32_t version = get_u32();
    require(version == kCacheVersion, "knockoff cache '", path, "': unsupported version ",
            version);
    const uint32_t count = get_u32();
    const uint32_t rank = get_u32();
    require(rank == 3, "knockoff cache '", path, "': expected rank 3 example shape, got ", rank);
    int64_t dims[3];
    uint64_t per_example = 1;
    for (int i = 0; i < 3; ++i) {
        dims[i] = get_u32();
        require(dims[i] > 0 && dims[i] <= (1 << 20), "knockoff cache '", path, "': bad dim ",
                dims[i]);
        per_example *= static_cast<uint64_t>(dims[i]);
        require(per_example <= (uint64_t(1) << 32), "knockoff cache '", path,
                "': example too large");
    }
    require(count > 0, "knockoff cache '", path, "': empty cache");
    const uint64_t total = static_cast<uint64_t>(count) * per_example;
    const uint8_t* payload = take(total * 4);
    require(pos == buf.size(), "knockoff cache '", path, "': trailing bytes");
    Tensor t({static_cast<int64_t>(count), dims[0], dims[1], dims[2]});
    for (uint64_t i = 0; i < total; ++i) {
        uint32_t u = uint32_t(payload[4 * i]) | (uint32_t(payload[4 * i + 1]) << 8) |
                     (uint32_t(payload[4 * i + 2]) << 16) |
                     (uint32_t(payload[4 * i + 3]) << 24);
        float fv;
        std::memcpy(&fv, &u, 4);
        require(std::isfinite(fv), "knockoff cache '", path, "': non-finite value at index ", i);
        t.data[static_cast<int64_t>(i)] = static_cast<double>(fv);
    }
    return t;
}

Dataset generate_knockoff_dataset(const KnockoffModel& m, const Dataset& data, uint64_t seed,
                                  const std::string& cache_path) {
    const int64_t n = data.size();
    const int64_t c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
    const int64_t d = c * h * w;
    require(m.mu.numel() == d, "generate_knockoff_dataset: model dimension ", m.mu.numel(),
            " does not match example dimension ", d);
    Dataset out;
    out.split = "knockoff";
    out.num_classes = data.num_classes;
    out.labels = data.labels;
    out.mean = data.mean;
    out.std = data.std;
    out.data_min = data.data_min;
    out.data_max = data.data_max;
    out.images = Tensor({n, c, h, w});
    const int64_t plane = h * w;
    Tensor x({d});
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(x.ptr(), data.images.ptr() + i * d, static_cast<size_t>(d) * 8);
        Rng rng = Rng::stream(seed, "knockoff.sample", static_cast<uint64_t>(i));
        Tensor kx = sample_knockoff(m, x, rng);
        double* dst = out.images.ptr() + i * d;
        for (int64_t j = 0; j < d; ++j) {
            const int64_t ch = j / plane;
            double v = kx.data[j];
            if (!data.data_min.empty())
                v = std::clamp(v, data.data_min[static_cast<size_t>(ch)],
                               data.data_max[static_cast<size_t>(ch)]);
            dst[j] = static_cast<double>(static_cast<float>(v));
        }
    }
    if (!cache_path.empty()) write_knockoff_cache(cache_path, out.images);
    return out;
}

}  // namespace scop

#include "scop/synth_digits.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "scop/common.hpp"
#include "scop/dataio.hpp"
#include "scop/rng.hpp"

namespace scop {

namespace {

struct Pt {
    double x, y;
};
using Stroke = std::vector<Pt>;

Stroke circle(double cx, double cy, double rx, double ry, int n = 40) {
    Stroke s;
    for (int i = 0; i <= n; ++i) {
        const double a = 2.0 * 3.14159265358979323846 * i / n;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

// Stroke skeletons on the unit square, y growing downward.
std::vector<Stroke> digit_strokes(int digit) {
    switch (digit) {
        case 0:
            return {circle(0.5, 0.5, 0.22, 0.33)};
        case 1:
            return {{{0.52, 0.12}, {0.52, 0.88}}, {{0.52, 0.12}, {0.38, 0.28}}};
        case 2:
            return {{{0.28, 0.32}, {0.33, 0.2}, {0.5, 0.14}, {0.66, 0.2}, {0.71, 0.33},
                     {0.62, 0.5}, {0.45, 0.64}, {0.3, 0.78}, {0.28, 0.86}},
                    {{0.28, 0.86}, {0.74, 0.86}}};
        case 3:
            return {{{0.3, 0.19}, {0.48, 0.13}, {0.65, 0.19}, {0.67, 0.32}, {0.51, 0.45}},
                    {{0.51, 0.45}, {0.68, 0.52}, {0.71, 0.67}, {0.6, 0.82}, {0.42, 0.87},
                     {0.28, 0.79}}};
        case 4:
            return {{{0.58, 0.12}, {0.28, 0.58}}, {{0.28, 0.58}, {0.78, 0.58}},
                    {{0.6, 0.3}, {0.6, 0.88}}};
        case 5:
            return {{{0.68, 0.14}, {0.36, 0.14}}, {{0.36, 0.14}, {0.33, 0.45}},
                    {{0.33, 0.45}, {0.53, 0.41}, {0.69, 0.5}, {0.71, 0.66}, {0.57, 0.83},
                     {0.37, 0.85}, {0.27, 0.76}}};
        case 6:
            return {{{0.63, 0.14}, {0.46, 0.24}, {0.35, 0.43}, {0.32, 0.63}, {0.38, 0.8},
                     {0.55, 0.86}, {0.67, 0.74}, {0.65, 0.58}, {0.5, 0.51}, {0.35, 0.59}}};
        case 7:
            return {{{0.27, 0.16}, {0.73, 0.16}}, {{0.73, 0.16}, {0.46, 0.88}}};
        case 8:
            return {circle(0.5, 0.3, 0.16, 0.16), circle(0.5, 0.66, 0.2, 0.2)};
        case 9:
            return {circle(0.52, 0.32, 0.17, 0.17), {{0.69, 0.36}, {0.66, 0.6}, {0.57, 0.88}}};
    }
    fail("digit_strokes: digit out of range ", digit);
}

struct Affine {
    // maps unit-square point to pixel coordinates
    double a, b, c, d, tx, ty;
    Pt apply(Pt p) const {
        const double x = p.x - 0.5, y = p.y - 0.5;
        return {a * x + b * y + tx, c * x + d * y + ty};
    }
};

void splat_segment(std::vector<double>& canvas, int side, Pt p0, Pt p1, double sigma,
                   double gain) {
    const double dx = p1.x - p0.x, dy = p1.y - p0.y;
    const double len = std::sqrt(dx * dx + dy * dy);
    const int steps = std::max(1, static_cast<int>(len / 0.3));
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const int rad = static_cast<int>(std::ceil(3.0 * sigma));
    for (int s = 0; s <= steps; ++s) {
        const double t = static_cast<double>(s) / steps;
        const double px = p0.x + t * dx, py = p0.y + t * dy;
        const int x0 = std::max(0, static_cast<int>(px) - rad);
        const int x1 = std::min(side - 1, static_cast<int>(px) + rad);
        const int y0 = std::max(0, static_cast<int>(py) - rad);
        const int y1 = std::min(side - 1, static_cast<int>(py) + rad);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double ddx = x - px, ddy = y - py;
                const double v = gain * std::exp(-(ddx * ddx + ddy * ddy) * inv2s2);
                double& cell = canvas[static_cast<size_t>(y * side + x)];
                cell = std::max(cell, v);
            }
    }
}

void render_digit(int digit, Rng& rng, uint8_t* out, int side) {
    const double rot = std::clamp(rng.normal(0.0, 0.14), -0.32, 0.32);
    const double shear = std::clamp(rng.normal(0.0, 0.12), -0.3, 0.3);
    const double sx = (0.82 + 0.26 * rng.uniform()) * side;
    const double sy = (0.82 + 0.26 * rng.uniform()) * side;
    const double tx = side / 2.0 + (rng.uniform() - 0.5) * 4.0;
    const double ty = side / 2.0 + (rng.uniform() - 0.5) * 4.0;
    // scale * x-shear * rotation, shrunk slightly to keep glyphs inside the frame
    const double cr = std::cos(rot), sr = std::sin(rot);
    const Affine aff{sx * 0.92 * (cr + shear * sr), sx * 0.92 * (shear * cr - sr),
                     sy * 0.92 * sr, sy * 0.92 * cr, tx, ty};

    const double sigma = 0.75 + 0.55 * rng.uniform();
    const double gain = 0.85 + 0.15 * rng.uniform();
    std::vector<double> canvas(static_cast<size_t>(side * side), 0.0);
    for (const Stroke& st : digit_strokes(digit))
        for (size_t i = 0; i + 1 < st.size(); ++i)
            splat_segment(canvas, side, aff.apply(st[i]), aff.apply(st[i + 1]), sigma, gain);
    for (int i = 0; i < side * side; ++i) {
        double v = 255.0 * std::min(1.0, canvas[static_cast<size_t>(i)]);
        v += rng.normal(0.0, 9.0);
        out[i] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
    }
}

void generate_split(const std::string& img_path, const std::string& lbl_path, int64_t n,
                    Rng& rng) {
    const int side = 28;
    std::vector<uint8_t> pixels(static_cast<size_t>(n) * side * side);
    std::vector<uint8_t> labels(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int digit = static_cast<int>(rng.uniform_int(10));
        labels[static_cast<size_t>(i)] = static_cast<uint8_t>(digit);
        render_digit(digit, rng, pixels.data() + i * side * side, side);
    }
    write_idx_images(img_path, pixels, n, side, side);
    write_idx_labels(lbl_path, labels);
}

}  // namespace

void write_synthetic_digit_corpus(const std::string& dir, int64_t n_train, int64_t n_test,
                                  uint64_t seed) {
    std::filesystem::create_directories(dir);
    Rng train_rng = Rng::stream(seed, "synth.train");
    Rng test_rng = Rng::stream(seed, "synth.test");
    generate_split(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte", n_train,
                   train_rng);
    generate_split(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte", n_test,
                   test_rng);
}

void ensure_synthetic_digit_corpus(const std::string& dir, bool force) {
    namespace fs = std::filesystem;
    const std::string names[4] = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                  "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};
    bool have_all = true;
    for (const auto& n : names)
        if (!fs::exists(dir + "/" + n)) have_all = false;
    if (have_all && !force) return;
    write_synthetic_digit_corpus(dir, 60000, 10000, 424242);
}

}  // namespace scop

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <new>
#include <string>
#include <vector>

#include "scop/common.hpp"

namespace scop {

// Eigen picks packet vs scalar evaluation paths from buffer addresses, so
// plain malloc'd storage makes low-order bits depend on heap layout. Pinning
// every tensor buffer to one alignment keeps the whole pipeline bit-for-bit
// reproducible.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::size_t alignment = 64;

    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(alignment));
    }
    template <typename U>
    bool operator==(const AlignedAlloc<U>&) const {
        return true;
    }
};

using AlignedVec = std::vector<double, AlignedAlloc<double>>;

inline bool operator==(const AlignedVec& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// Dense n-dimensional array of doubles, row-major. Feature maps use NCHW,
// conv weights OIHW, linear weights (out, in).
struct Tensor {
    std::vector<int64_t> shape;
    AlignedVec data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shp, double fill = 0.0);

    // Constructs from external values; rejects NaN/Inf and size mismatch.
    static Tensor from_values(std::vector<int64_t> shp, std::vector<double> values);

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t e : shape) n *= e;
        return shape.empty() ? 0 : n;
    }
    size_t rank() const { return shape.size(); }
    int64_t dim(size_t i) const { return shape.at(i); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](int64_t i) { return data[size_t(i)]; }
    double operator[](int64_t i) const { return data[size_t(i)]; }

    // 4-d accessor for NCHW / OIHW tensors.
    double& at4(int64_t a, int64_t b, int64_t c, int64_t d) {
        return data[size_t(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    double at4(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return data[size_t(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    double& at2(int64_t a, int64_t b) { return data[size_t(a * shape[1] + b)]; }
    double at2(int64_t a, int64_t b) const { return data[size_t(a * shape[1] + b)]; }

    Tensor reshaped(std::vector<int64_t> new_shape) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
};

std::string shape_str(const std::vector<int64_t>& shape);

// Throws with both shapes spelled out when they differ.
void check_same_shape(const Tensor& a, const Tensor& b, const std::string& where);

}  // namespace scop

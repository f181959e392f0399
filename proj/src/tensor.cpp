#include "scop/tensor.hpp"

#include <cmath>

namespace scop {

Tensor::Tensor(std::vector<int64_t> shp, double fill) : shape(std::move(shp)) {
    int64_t n = 1;
    for (int64_t e : shape) {
        require(e > 0, "Tensor: extents must be positive, got shape ", shape_str(shape));
        n *= e;
    }
    data.assign(size_t(shape.empty() ? 0 : n), fill);
}

Tensor Tensor::from_values(std::vector<int64_t> shp, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(shp);
    int64_t n = 1;
    for (int64_t e : t.shape) {
        require(e > 0, "Tensor: extents must be positive, got shape ", shape_str(t.shape));
        n *= e;
    }
    require(int64_t(values.size()) == n, "Tensor: data length ", values.size(),
            " does not match shape ", shape_str(t.shape));
    t.data.assign(values.begin(), values.end());
    require(t.all_finite(), "Tensor: non-finite value in input data");
    return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
    Tensor t;
    t.shape = std::move(new_shape);
    int64_t n = 1;
    for (int64_t e : t.shape) n *= e;
    require(n == numel(), "reshape: cannot view ", shape_str(shape), " as ",
            shape_str(t.shape));
    t.data = data;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
}

void check_same_shape(const Tensor& a, const Tensor& b, const std::string& where) {
    require(a.shape == b.shape, where, ": shape mismatch ", shape_str(a.shape), " vs ",
            shape_str(b.shape));
}

}  // namespace scop

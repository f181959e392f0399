#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scop/model.hpp"
#include "scop/tensor.hpp"

namespace scop {

struct HistogramFile {
    int32_t layer = -1;
    std::string path;
    double tv_distance = 0.0;  // total variation between the two normalized histograms
};

// Per layer, a CSV of 64 uniform bins over the pooled value range with
// columns bin_left, bin_right, real_count, knockoff_count.
std::vector<HistogramFile> emit_feature_histograms(const NetworkSpec& net,
                                                   const Tensor& real_batch,
                                                   const Tensor& knockoff_batch,
                                                   const std::vector<int32_t>& layers,
                                                   const std::string& out_dir);

// Fixed-width table over the rows of a metrics JSONL payload.
std::string render_metrics_table(const std::string& jsonl_text);

}  // namespace scop

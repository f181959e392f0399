#include "scop/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "scop/common.hpp"

namespace scop {

using nlohmann::json;

static constexpr int64_t kBins = 64;

std::vector<HistogramFile> emit_feature_histograms(const NetworkSpec& net,
                                                   const Tensor& real_batch,
                                                   const Tensor& knockoff_batch,
                                                   const std::vector<int32_t>& layers,
                                                   const std::string& out_dir) {
    check_same_shape(real_batch, knockoff_batch, "histogram batches");
    std::filesystem::create_directories(out_dir);
    std::vector<Tensor> real_outs = forward_all_eval(net, real_batch);
    std::vector<Tensor> knock_outs = forward_all_eval(net, knockoff_batch);

    std::vector<HistogramFile> files;
    for (int32_t layer : layers) {
        require(layer >= 0 && layer < net.layer_count(), "histogram layer ", layer,
                " out of range [0, ", net.layer_count(), ")");
        const Tensor& rv = real_outs[static_cast<size_t>(layer)];
        const Tensor& kv = knock_outs[static_cast<size_t>(layer)];
        double lo = rv.data[0], hi = rv.data[0];
        for (double v : rv.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (double v : kv.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi <= lo) hi = lo + 1.0;
        const double width = (hi - lo) / static_cast<double>(kBins);
        std::vector<int64_t> real_counts(kBins, 0), knock_counts(kBins, 0);
        auto bin_of = [&](double v) {
            int64_t b = static_cast<int64_t>((v - lo) / width);
            return std::clamp<int64_t>(b, 0, kBins - 1);
        };
        for (double v : rv.data) ++real_counts[static_cast<size_t>(bin_of(v))];
        for (double v : kv.data) ++knock_counts[static_cast<size_t>(bin_of(v))];

        HistogramFile hf;
        hf.layer = layer;
        hf.path = out_dir + "/layer" + std::to_string(layer) + "_hist.csv";
        double tv = 0.0;
        const double rn = static_cast<double>(rv.numel()), kn = static_cast<double>(kv.numel());
        std::ofstream out(hf.path, std::ios::binary | std::ios::trunc);
        require(out.good(), "cannot write histogram to ", hf.path);
        out << "bin_left,bin_right,real_count,knockoff_count\n";
        for (int64_t b = 0; b < kBins; ++b) {
            char line[128];
            std::snprintf(line, sizeof(line), "%.9g,%.9g,%lld,%lld\n", lo + b * width,
                          lo + (b + 1) * width,
                          static_cast<long long>(real_counts[static_cast<size_t>(b)]),
                          static_cast<long long>(knock_counts[static_cast<size_t>(b)]));
            out << line;
            tv += std::abs(real_counts[static_cast<size_t>(b)] / rn -
                           knock_counts[static_cast<size_t>(b)] / kn);
        }
        require(out.good(), "failed writing histogram ", hf.path);
        hf.tv_distance = 0.5 * tv;
        files.push_back(std::move(hf));
    }
    return files;
}

std::string render_metrics_table(const std::string& jsonl_text) {
    std::ostringstream table;
    char line[256];
    std::snprintf(line, sizeof(line), "%-9s %-14s %-5s %-5s %6s %9s %9s %9s %8s %8s\n",
                  "criterion", "control", "bias", "seed", "rate", "baseline", "pruned",
                  "final", "params%", "flops%");
    table << line;
    std::istringstream rows(jsonl_text);
    std::string row;
    while (std::getline(rows, row)) {
        if (row.empty()) continue;
        json j;
        try {
            j = json::parse(row);
        } catch (const json::exception& e) {
            fail("metrics line is not valid JSON: ", e.what());
        }
        std::snprintf(line, sizeof(line),
                      "%-9s %-14s %-5s %-5llu %6.2f %9.2f %9.2f %9.2f %8.1f %8.1f\n",
                      j.value("criterion", std::string("?")).c_str(),
                      j.value("control", std::string("?")).c_str(),
                      j.value("bias", false) ? "on" : "off",
                      static_cast<unsigned long long>(j.value("seed", 0ULL)),
                      j.value("rate", 0.0), j.value("baseline_acc", 0.0),
                      j.value("pruned_acc", 0.0), j.value("final_acc", 0.0),
                      j.value("params_drop_pct", 0.0), j.value("flops_drop_pct", 0.0));
        table << line;
    }
    return table.str();
}

}  // namespace scop

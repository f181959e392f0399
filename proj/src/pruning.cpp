#include "scop/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "scop/common.hpp"

namespace scop {

using nlohmann::json;

ImportanceReport compute_importance(const SelectionState& state, const NetworkSpec& net) {
    require(state.prunable.size() == state.theta.size(),
            "selection state is inconsistent: ", state.prunable.size(), " layers vs ",
            state.theta.size(), " theta vectors");
    ImportanceReport report;
    for (size_t i = 0; i < state.prunable.size(); ++i) {
        const PrunableConv& pc = state.prunable[i];
        LayerImportance li;
        li.conv_layer = pc.conv_layer;
        li.beta = state.beta(i);
        li.importance = Tensor(li.beta.shape);
        for (int64_t j = 0; j < li.beta.numel(); ++j)
            li.importance.data[j] = 2.0 * li.beta.data[j] - 1.0;
        if (pc.bn_layer >= 0) {
            const Tensor& gamma = net.layers[static_cast<size_t>(pc.bn_layer)].gamma;
            require(gamma.numel() == li.importance.numel(),
                    "BN gamma length mismatch at layer ", pc.bn_layer);
            for (int64_t j = 0; j < li.importance.numel(); ++j)
                li.importance.data[j] *= std::abs(gamma.data[j]);
            li.bn_scaled = true;
        }
        report.layers.push_back(std::move(li));
    }
    return report;
}

ImportanceReport l1_importance(const NetworkSpec& net) {
    ImportanceReport report;
    for (const PrunableConv& pc : prunable_convs(net)) {
        const LayerSpec& conv = net.layers[static_cast<size_t>(pc.conv_layer)];
        LayerImportance li;
        li.conv_layer = pc.conv_layer;
        li.importance = Tensor({conv.out_ch});
        li.beta = Tensor({conv.out_ch}, 0.5);
        const int64_t per_filter = conv.in_ch * conv.k * conv.k;
        for (int64_t o = 0; o < conv.out_ch; ++o) {
            double acc = 0.0;
            for (int64_t j = 0; j < per_filter; ++j)
                acc += std::abs(conv.weight.data[o * per_filter + j]);
            li.importance.data[o] = acc;
        }
        report.layers.push_back(std::move(li));
    }
    return report;
}

ImportanceReport random_importance(const NetworkSpec& net, uint64_t seed) {
    ImportanceReport report;
    for (const PrunableConv& pc : prunable_convs(net)) {
        const LayerSpec& conv = net.layers[static_cast<size_t>(pc.conv_layer)];
        Rng rng = Rng::stream(seed, "prune.random", static_cast<uint64_t>(pc.conv_layer));
        LayerImportance li;
        li.conv_layer = pc.conv_layer;
        li.importance = Tensor({conv.out_ch});
        li.beta = Tensor({conv.out_ch}, 0.5);
        for (int64_t o = 0; o < conv.out_ch; ++o) li.importance.data[o] = rng.uniform();
        report.layers.push_back(std::move(li));
    }
    return report;
}

PruningPlan make_plan(const ImportanceReport& report, double rate) {
    require(rate >= 0.0 && rate < 1.0, "pruning rate must lie in [0, 1), got ", rate);
    PruningPlan plan;
    plan.rate = rate;
    for (const LayerImportance& li : report.layers) {
        const int64_t m = li.importance.numel();
        // the tiny slack absorbs FP fuzz like (1-0.7)*10 = 3.0000000000000004
        const int64_t kappa =
            static_cast<int64_t>(std::ceil((1.0 - rate) * static_cast<double>(m) - 1e-9));
        require(kappa >= 1, "pruning layer ", li.conv_layer, " would keep no filters");
        require(kappa <= m, "budget ", kappa, " exceeds filter count ", m);
        std::vector<int64_t> idx(static_cast<size_t>(m));
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
            if (li.importance.data[a] != li.importance.data[b])
                return li.importance.data[a] > li.importance.data[b];
            return a < b;
        });
        PlanLayer pl;
        pl.layer_index = li.conv_layer;
        pl.keep.assign(idx.begin(), idx.begin() + kappa);
        std::sort(pl.keep.begin(), pl.keep.end());
        plan.layers.push_back(std::move(pl));
    }
    return plan;
}

static Tensor slice_dim0(const Tensor& t, const std::vector<int64_t>& keep) {
    std::vector<int64_t> shp = t.shape;
    const int64_t inner = t.numel() / t.dim(0);
    shp[0] = static_cast<int64_t>(keep.size());
    Tensor out(shp);
    for (size_t i = 0; i < keep.size(); ++i)
        std::copy_n(t.ptr() + keep[i] * inner, inner,
                    out.ptr() + static_cast<int64_t>(i) * inner);
    return out;
}

// Conv weights OIkk: select along the in-channel axis.
static Tensor slice_conv_in(const Tensor& w, const std::vector<int64_t>& keep) {
    const int64_t o = w.dim(0), c = w.dim(1), kk = w.dim(2) * w.dim(3);
    Tensor out({o, static_cast<int64_t>(keep.size()), w.dim(2), w.dim(3)});
    for (int64_t oo = 0; oo < o; ++oo)
        for (size_t j = 0; j < keep.size(); ++j)
            std::copy_n(w.ptr() + (oo * c + keep[j]) * kk, kk,
                        out.ptr() + (oo * static_cast<int64_t>(keep.size()) +
                                     static_cast<int64_t>(j)) * kk);
    return out;
}

// Linear weights (out, in): select column blocks of `block` consecutive
// features per kept channel.
static Tensor slice_linear_in(const Tensor& w, const std::vector<int64_t>& keep,
                              int64_t block) {
    const int64_t out_f = w.dim(0), in_f = w.dim(1);
    const int64_t new_in = static_cast<int64_t>(keep.size()) * block;
    Tensor out({out_f, new_in});
    for (int64_t o = 0; o < out_f; ++o)
        for (size_t j = 0; j < keep.size(); ++j)
            std::copy_n(w.ptr() + o * in_f + keep[j] * block, block,
                        out.ptr() + o * new_in + static_cast<int64_t>(j) * block);
    return out;
}

NetworkSpec apply_plan(const NetworkSpec& net, const PruningPlan& plan) {
    require(plan.rate >= 0.0 && plan.rate < 1.0, "pruning rate must lie in [0, 1), got ",
            plan.rate);
    const std::vector<PrunableConv> prunable = prunable_convs(net);
    const std::vector<std::vector<int64_t>> shapes = infer_shapes(net);
    NetworkSpec pruned = net;

    std::vector<int32_t> seen;
    for (const PlanLayer& pl : plan.layers) {
        require(std::find(seen.begin(), seen.end(), pl.layer_index) == seen.end(),
                "plan lists layer ", pl.layer_index, " twice");
        seen.push_back(pl.layer_index);

        const PrunableConv* pc = nullptr;
        for (const PrunableConv& cand : prunable)
            if (cand.conv_layer == pl.layer_index) pc = &cand;
        require(pc, "layer ", pl.layer_index, " is not prunable in this architecture");

        LayerSpec& conv = pruned.layers[static_cast<size_t>(pl.layer_index)];
        const int64_t m = conv.out_ch;
        require(!pl.keep.empty(), "plan for layer ", pl.layer_index, " keeps no filters");
        for (size_t i = 0; i < pl.keep.size(); ++i) {
            require(pl.keep[i] >= 0 && pl.keep[i] < m, "keep index ", pl.keep[i],
                    " out of range [0, ", m, ") at layer ", pl.layer_index);
            require(i == 0 || pl.keep[i] > pl.keep[i - 1],
                    "keep list for layer ", pl.layer_index, " must be sorted and unique");
        }

        conv.weight = slice_dim0(conv.weight, pl.keep);
        conv.bias = slice_dim0(conv.bias, pl.keep);
        conv.out_ch = static_cast<int64_t>(pl.keep.size());

        if (pc->bn_layer >= 0) {
            LayerSpec& bn = pruned.layers[static_cast<size_t>(pc->bn_layer)];
            bn.gamma = slice_dim0(bn.gamma, pl.keep);
            bn.beta = slice_dim0(bn.beta, pl.keep);
            bn.running_mean = slice_dim0(bn.running_mean, pl.keep);
            bn.running_var = slice_dim0(bn.running_var, pl.keep);
        }

        for (int32_t consumer_idx : pc->consumers) {
            LayerSpec& consumer = pruned.layers[static_cast<size_t>(consumer_idx)];
            if (consumer.kind == LayerKind::conv) {
                consumer.weight = slice_conv_in(consumer.weight, pl.keep);
                consumer.in_ch = static_cast<int64_t>(pl.keep.size());
            } else if (consumer.kind == LayerKind::linear) {
                // features per channel at the flatten feeding this linear
                const int32_t flat = consumer.input;
                require(flat >= 0 &&
                            net.layers[static_cast<size_t>(flat)].kind == LayerKind::flatten,
                        "linear consumer ", consumer_idx, " is not fed by a flatten layer");
                const int32_t pre = net.layers[static_cast<size_t>(flat)].input;
                require(pre >= 0, "flatten layer ", flat, " reads the network input");
                const std::vector<int64_t>& pre_shape = shapes[static_cast<size_t>(pre)];
                require(pre_shape.size() == 3 && pre_shape[0] == m,
                        "flatten producer shape does not expose layer ", pl.layer_index,
                        "'s channels");
                const int64_t block = pre_shape[1] * pre_shape[2];
                consumer.weight = slice_linear_in(consumer.weight, pl.keep, block);
                consumer.in_ch = static_cast<int64_t>(pl.keep.size()) * block;
            } else {
                fail("consumer layer ", consumer_idx, " has unsupported kind for surgery");
            }
        }
    }

    infer_shapes(pruned);
    return pruned;
}

ReductionSummary reduction_summary(const NetworkSpec& orig, const NetworkSpec& pruned) {
    const CountResult a = count_params_flops(orig);
    const CountResult b = count_params_flops(pruned);
    ReductionSummary s;
    s.params_before = a.params;
    s.params_after = b.params;
    s.macs_before = a.macs;
    s.macs_after = b.macs;
    s.params_drop_pct =
        100.0 * (1.0 - static_cast<double>(b.params) / static_cast<double>(a.params));
    s.flops_drop_pct =
        100.0 * (1.0 - static_cast<double>(b.macs) / static_cast<double>(a.macs));
    return s;
}

std::string plan_to_json(const PruningPlan& plan) {
    json j;
    j["rate"] = plan.rate;
    j["layers"] = json::array();
    for (const PlanLayer& pl : plan.layers)
        j["layers"].push_back({{"layer_index", pl.layer_index}, {"keep", pl.keep}});
    return j.dump(2) + "\n";
}

PruningPlan plan_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail("pruning plan is not valid JSON: ", e.what());
    }
    require(j.is_object() && j.contains("rate") && j.contains("layers"),
            "pruning plan needs top-level 'rate' and 'layers'");
    require(j["rate"].is_number(), "pruning plan 'rate' must be a number");
    require(j["layers"].is_array(), "pruning plan 'layers' must be an array");
    PruningPlan plan;
    plan.rate = j["rate"].get<double>();
    require(plan.rate >= 0.0 && plan.rate < 1.0, "pruning rate must lie in [0, 1), got ",
            plan.rate);
    for (const json& e : j["layers"]) {
        require(e.is_object() && e.contains("layer_index") && e.contains("keep"),
                "each plan layer needs 'layer_index' and 'keep'");
        require(e["layer_index"].is_number_integer(), "'layer_index' must be an integer");
        require(e["keep"].is_array() && !e["keep"].empty(),
                "'keep' must be a non-empty array");
        PlanLayer pl;
        pl.layer_index = e["layer_index"].get<int32_t>();
        for (const json& k : e["keep"]) {
            require(k.is_number_integer() && k.get<int64_t>() >= 0,
                    "'keep' entries must be non-negative integers");
            pl.keep.push_back(k.get<int64_t>());
        }
        for (size_t i = 1; i < pl.keep.size(); ++i)
            require(pl.keep[i] > pl.keep[i - 1],
                    "keep list for layer ", pl.layer_index, " must be sorted and unique");
        plan.layers.push_back(std::move(pl));
    }
    return plan;
}

}  // namespace scop

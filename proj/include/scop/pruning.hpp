#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scop/model.hpp"
#include "scop/selection.hpp"

namespace scop {

// Knockoff-contrast importance per prunable layer. Without BN scaling each
// entry is beta - beta~ in [-1, 1]; with a BN directly after the conv it is
// |gamma| (.) (beta - beta~).
struct LayerImportance {
    int32_t conv_layer = -1;
    Tensor importance;  // (M)
    Tensor beta;        // (M), as optimized; 0.5 means undecided
    bool bn_scaled = false;
};

struct ImportanceReport {
    std::vector<LayerImportance> layers;
};

ImportanceReport compute_importance(const SelectionState& state, const NetworkSpec& net);

// Baseline criteria sharing the same plan/surgery machinery.
ImportanceReport l1_importance(const NetworkSpec& net);
ImportanceReport random_importance(const NetworkSpec& net, uint64_t seed);

struct PlanLayer {
    int32_t layer_index = -1;
    std::vector<int64_t> keep;  // sorted, unique
};

struct PruningPlan {
    double rate = 0.0;
    std::vector<PlanLayer> layers;
};

// Keeps the ceil((1-r)*M) largest-importance filters per layer; ties keep the
// lower index. rate must lie in [0, 1).
PruningPlan make_plan(const ImportanceReport& report, double rate);

// Structural surgery: slices conv out-channels, the trailing BN, and every
// consumer's in-channels (linear consumers by channel-sized column blocks).
NetworkSpec apply_plan(const NetworkSpec& net, const PruningPlan& plan);

struct ReductionSummary {
    int64_t params_before = 0, params_after = 0;
    int64_t macs_before = 0, macs_after = 0;
    double params_drop_pct = 0.0, flops_drop_pct = 0.0;
};

ReductionSummary reduction_summary(const NetworkSpec& orig, const NetworkSpec& pruned);

std::string plan_to_json(const PruningPlan& plan);
PruningPlan plan_from_json(const std::string& text);

}  // namespace scop

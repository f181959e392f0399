#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "scop/dataio.hpp"
#include "scop/knockoff.hpp"
#include "scop/model.hpp"

namespace scop {

enum class ControlMode { knockoff, noise, random_sample, none };
std::string control_mode_name(ControlMode m);
ControlMode control_mode_from_name(const std::string& s);

// One logit per filter; beta = sigmoid(theta), beta~ = 1 - beta, so the
// convexity constraint holds exactly by construction.
struct SelectionState {
    std::vector<PrunableConv> prunable;
    std::vector<Tensor> theta;  // aligned with prunable, length M^l each

    Tensor beta(size_t i) const;
    Tensor beta_tilde(size_t i) const;
    // max_j |beta + beta~ - 1| over every filter; must be exactly 0.
    double constraint_gap() const;
};

SelectionState init_selection_state(const NetworkSpec& net);

// Per-channel bias-pair models at conv scale, estimated from a calibration
// pair of real/control feature streams. var_b is the shared power-of-ten
// variance; cov holds cov(b_o, b~_o) per output channel.
struct ConvBiasModel {
    double var_b = 0.0;
    Tensor cov;      // (M)
    Tensor w_diag;   // (M): diag of W^T diag{s} W for the conv as a linear map
};

struct SelectionBiasContext {
    std::vector<ConvBiasModel> per_conv;  // aligned with SelectionState::prunable
};

SelectionBiasContext make_selection_bias_context(const NetworkSpec& net,
                                                 const std::vector<PrunableConv>& prunable,
                                                 const Tensor& calib_real,
                                                 const Tensor& calib_control);

struct MixTrace {
    std::vector<int32_t> conv_layers;
    std::vector<Tensor> mixed;          // beta (.) A + beta~ (.) A~ at each mix point
    std::vector<Tensor> control_feats;  // A~ at each mix point
};

struct SelectionForwardSpec {
    ControlMode mode = ControlMode::knockoff;
    const SelectionBiasContext* bias = nullptr;  // non-null enables bias pairs
    Rng* bias_rng = nullptr;                     // required when bias is set
    bool detach_knockoff = false;
    MixTrace* trace = nullptr;
};

// Two-stream forward: the control stream propagates the control batch through
// the frozen network unmixed; the mixed stream replaces each prunable
// feature A^l with beta (.) A^l + beta~ (.) A~^l. Returns mixed-stream logits.
Tensor selection_forward(const NetworkSpec& net, const SelectionState& state,
                         const Tensor& real_batch, const Tensor& control_batch,
                         const SelectionForwardSpec& spec);

Tensor make_control_batch(ControlMode mode, const Dataset& data, const Dataset* knockoffs,
                          const std::vector<int64_t>& indices, Rng& rng);

struct SelectionConfig {
    double lr = 0.001;
    int64_t batch = 128;
    int64_t epochs = 10;
    uint64_t seed = 0;
    ControlMode mode = ControlMode::knockoff;
    bool bias = false;
    bool detach_knockoff = false;
};

struct SelectionRunInfo {
    std::vector<double> epoch_losses;
    std::string weights_digest_before, weights_digest_after;
};

// Adam on theta only; network weights are frozen and verified by checksum.
// control_data must be index-aligned with data in knockoff mode.
SelectionState optimize_scaling(NetworkSpec& net, const Dataset& data,
                                const Dataset* control_data, const SelectionConfig& config,
                                SelectionRunInfo* info = nullptr);

// SELSTATE checkpoint bridge.
void selection_state_to_sections(const SelectionState& state, SectionMap& out);
SelectionState selection_state_from_sections(const SectionMap& sections,
                                             const NetworkSpec& net);

}  // namespace scop

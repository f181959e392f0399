#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "scop/autodiff.hpp"
#include "scop/rng.hpp"
#include "scop/tensor.hpp"

namespace scop {

enum class LayerKind { conv, batchnorm, activation, maxpool, avgpool, flatten, linear, residual_add };
enum class ActKind { relu, sigmoid };

std::string layer_kind_name(LayerKind k);

struct LayerSpec {
    LayerKind kind;
    // Producer wiring: index of the layer whose output this layer consumes;
    // -1 means the network input. residual_add reads input and input2.
    int32_t input = -1;
    int32_t input2 = -1;

    int64_t in_ch = 0, out_ch = 0;  // conv channels / linear features
    int64_t k = 0, stride = 1, pad = 0;
    ActKind act = ActKind::relu;

    Tensor weight, bias;                             // conv, linear
    Tensor gamma, beta, running_mean, running_var;   // batchnorm
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
};

struct NetworkSpec {
    std::string arch;
    std::vector<int64_t> input_shape;  // {C, H, W}
    int64_t num_classes = 0;
    std::vector<LayerSpec> layers;

    int64_t layer_count() const { return static_cast<int64_t>(layers.size()); }
};

// Validates wiring and shape compatibility by propagating the declared input
// shape; returns the per-layer output shapes (batch extent omitted).
std::vector<std::vector<int64_t>> infer_shapes(const NetworkSpec& net);

struct ForwardOptions {
    bool train = false;
    int32_t capture_layer = -1;   // copy that layer's output into *captured
    Tensor* captured = nullptr;
    int32_t inject_after = -1;    // replace that layer's output with *injected
    const Tensor* injected = nullptr;
};

// Plain (tapeless) forward. Train mode updates BN running stats in place.
Tensor forward(NetworkSpec& net, const Tensor& batch, const ForwardOptions& opts);
// Eval-mode forward; pure function of (weights, input).
Tensor forward_eval(const NetworkSpec& net, const Tensor& batch);
// Eval-mode forward returning every layer's output.
std::vector<Tensor> forward_all_eval(const NetworkSpec& net, const Tensor& batch);

// Called after each layer's tape node is created; may return a replacement
// var (used by the selection layer to splice in mixed streams and bias pairs).
using LayerHook = std::function<Var(int32_t layer_idx, Var out, Tape& tape)>;

// Forward on a tape. If trainable, parameters register under stable names
// ("layerN.weight" etc.) and can be updated through named_params(). Train
// mode updates BN running stats at node creation.
Var forward_tape(NetworkSpec& net, Tape& tape, Var batch, bool train, bool trainable,
                 const LayerHook& hook = nullptr);

std::map<std::string, Tensor*> named_params(NetworkSpec& net);

struct CountResult {
    int64_t params = 0;
    int64_t macs = 0;  // multiply-accumulates per example
};
CountResult count_params_flops(const NetworkSpec& net);

NetworkSpec build_arch(const std::string& name, int64_t num_classes, Rng& rng);

// A conv whose output channels can be sliced without touching a residual
// add: the channel-preserving chain from the conv to its consuming layers.
struct PrunableConv {
    int32_t conv_layer = -1;
    int32_t bn_layer = -1;            // BN directly consuming the conv, if any
    int32_t mix_layer = -1;           // activation output acting as the feature A^l
    std::vector<int32_t> consumers;   // conv/linear layers consuming the channels
};

std::vector<PrunableConv> prunable_convs(const NetworkSpec& net);

// SHA-256 over every parameter and running-stat payload, in layer order.
std::string weights_digest(const NetworkSpec& net);

// Checkpoint bridge: tensors per layer plus a JSON architecture section.
struct Section;
void network_to_sections(const NetworkSpec& net, std::map<std::string, Section>& out);
NetworkSpec network_from_sections(const std::map<std::string, Section>& sections);

}  // namespace scop

#pragma once

#include <functional>
#include <map>
#include <string>

#include "scop/kernels.hpp"
#include "scop/tensor.hpp"

namespace scop {

// Handle into a Tape. Valid only for the tape that produced it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Eager tape-based reverse-mode autodiff. Ops execute immediately and append
// a node holding the forward value plus a backward closure. Nodes are created
// in topological order, so the backward sweep is a single reverse pass.
class Tape {
  public:
    // Leaf without gradient (batch data, knockoff streams).
    Var input(Tensor value);
    // Named leaf that participates in backward(). Names must be unique.
    Var param(const std::string& name, Tensor value);

    const Tensor& value(Var v) const;
    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

    Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad);
    // Train mode mutates the caller's running stats at node-creation time.
    Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                  bool train, double eps, double momentum);
    Var relu(Var x);
    Var sigmoid(Var x);
    Var maxpool(Var x, int64_t k, int64_t stride);
    Var global_avgpool(Var x);
    Var flatten(Var x);
    Var linear(Var x, Var w, Var b);
    Var channel_scale(Var x, Var s);
    Var add(Var a, Var b);
    Var sub_from_const(double c, Var x);  // c - x, for complementary gates
    Var mul_scalar(Var x, double c);
    Var square(Var x);
    Var sum(Var x);
    Var softmax_xent(Var logits, std::vector<int64_t> labels);

    // Reverse sweep from a scalar loss. Returns gradients for every named
    // parameter (zero tensors for parameters the loss does not reach).
    // Resets accumulators first, so repeated calls replay identically.
    std::map<std::string, Tensor> backward(Var loss);

    // Gradient of the last backward() w.r.t. an arbitrary node; null if the
    // node was not reached.
    const Tensor* grad_of(Var v) const;

    // Hash of the relu sign pattern and maxpool argmax choices seen while
    // building this tape. Two forward passes with equal signatures lie in the
    // same smooth region, which is the precondition for finite differences.
    uint64_t kink_signature() const { return kink_sig_; }

  private:
    struct Node {
        Tensor value;
        std::vector<int32_t> parents;
        // Receives the output gradient; pushes into parents via accum().
        std::function<void(Tape&, const Node&, const Tensor&)> backfn;
        std::string name;  // non-empty for params
        bool needs_grad = false;
    };

    Var push(Tensor value, std::vector<int32_t> parents,
             std::function<void(Tape&, const Node&, const Tensor&)> backfn);
    void sig_mix(uint64_t v) { kink_sig_ = (kink_sig_ ^ v) * 1099511628211ull; }
    const Node& node(Var v) const;
    bool needs(Var v) const { return node(v).needs_grad; }
    void accum(int32_t id, const Tensor& g);
    Tensor* grad_slot(int32_t id);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> grad_set_;
    std::map<std::string, int32_t> param_ids_;
    uint64_t kink_sig_ = 1469598103934665603ull;
};

}  // namespace scop

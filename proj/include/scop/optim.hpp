#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "scop/tensor.hpp"

namespace scop {

struct AdamState {
    std::map<std::string, Tensor> m, v;
    int64_t t = 0;
};

// Standard Adam with bias correction. Parameters are updated in place; state
// slots are created on first use and must keep matching shapes afterwards.
void adam_step(std::map<std::string, Tensor*>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct SgdState {
    std::map<std::string, Tensor> velocity;
};

void sgd_momentum_step(std::map<std::string, Tensor*>& params,
                       const std::map<std::string, Tensor>& grads, SgdState& state,
                       double lr, double momentum = 0.9, double weight_decay = 0.0);

// Cosine decay from base_lr to 0 over total_steps.
double cosine_lr(double base_lr, int64_t step, int64_t total_steps);

}  // namespace scop

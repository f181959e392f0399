#include "scop/optim.hpp"

#include <cmath>

#include "scop/common.hpp"

namespace scop {

void adam_step(std::map<std::string, Tensor*>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        require(git != grads.end(), "adam_step: missing gradient for '", name, "'");
        const Tensor& g = git->second;
        check_same_shape(*p, g, "adam_step '" + name + "'");
        Tensor& m = state.m.try_emplace(name, Tensor(p->shape)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(p->shape)).first->second;
        check_same_shape(*p, m, "adam_step state '" + name + "'");
        for (int64_t i = 0; i < g.numel(); ++i) {
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void sgd_momentum_step(std::map<std::string, Tensor*>& params,
                       const std::map<std::string, Tensor>& grads, SgdState& state,
                       double lr, double momentum, double weight_decay) {
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        require(git != grads.end(), "sgd_momentum_step: missing gradient for '", name, "'");
        const Tensor& g = git->second;
        check_same_shape(*p, g, "sgd_momentum_step '" + name + "'");
        Tensor& vel = state.velocity.try_emplace(name, Tensor(p->shape)).first->second;
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double eff = g.data[i] + weight_decay * p->data[i];
            vel.data[i] = momentum * vel.data[i] + eff;
            p->data[i] -= lr * vel.data[i];
        }
    }
}

double cosine_lr(double base_lr, int64_t step, int64_t total_steps) {
    require(total_steps > 0, "cosine_lr: total_steps must be positive");
    if (step >= total_steps) return 0.0;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return 0.5 * base_lr * (1.0 + std::cos(frac * 3.14159265358979323846));
}

}  // namespace scop

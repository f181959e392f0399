#include "scop/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "scop/common.hpp"
#include "scop/optim.hpp"

namespace scop {

std::string control_mode_name(ControlMode m) {
    switch (m) {
        case ControlMode::knockoff: return "knockoff";
        case ControlMode::noise: return "noise";
        case ControlMode::random_sample: return "random-sample";
        case ControlMode::none: return "none";
    }
    fail("unknown control mode tag ", static_cast<int>(m));
}

ControlMode control_mode_from_name(const std::string& s) {
    if (s == "knockoff") return ControlMode::knockoff;
    if (s == "noise") return ControlMode::noise;
    if (s == "random-sample") return ControlMode::random_sample;
    if (s == "none") return ControlMode::none;
    fail("unknown control mode '", s, "'; valid: knockoff, noise, random-sample, none");
}

static Tensor sigmoid_vec(const Tensor& theta) {
    Tensor b(theta.shape);
    for (int64_t j = 0; j < theta.numel(); ++j) {
        const double v = theta.data[j];
        b.data[j] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return b;
}

Tensor SelectionState::beta(size_t i) const { return sigmoid_vec(theta[i]); }

Tensor SelectionState::beta_tilde(size_t i) const {
    Tensor b = sigmoid_vec(theta[i]);
    for (auto& v : b.data) v = 1.0 - v;
    return b;
}

double SelectionState::constraint_gap() const {
    double gap = 0.0;
    for (size_t i = 0; i < theta.size(); ++i) {
        Tensor b = beta(i);
        Tensor bt = beta_tilde(i);
        for (int64_t j = 0; j < b.numel(); ++j)
            gap = std::max(gap, std::abs(b.data[j] + bt.data[j] - 1.0));
    }
    return gap;
}

SelectionState init_selection_state(const NetworkSpec& net) {
    SelectionState st;
    st.prunable = prunable_convs(net);
    require(!st.prunable.empty(), "network has no prunable conv layers");
    for (const PrunableConv& pc : st.prunable)
        st.theta.push_back(Tensor({net.layers[static_cast<size_t>(pc.conv_layer)].out_ch}));
    return st;
}

// ---- bias-pair context ------------------------------------------------------

static Tensor channel_knockoff_gap(const Tensor& a, const Tensor& at) {
    check_same_shape(a, at, "bias context calibration features");
    const int64_t n = a.dim(0), c = a.dim(1), plane = a.dim(2) * a.dim(3);
    Tensor s({c});
    for (int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int64_t b = 0; b < n; ++b) {
            const double* pa = a.ptr() + (b * c + ch) * plane;
            const double* pt = at.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const double dv = pa[i] - pt[i];
                acc += dv * dv;
            }
        }
        // Var(A - A~) = 2 s for matched second moments
        s.data[ch] = acc / (2.0 * static_cast<double>(n * plane));
    }
    return s;
}

SelectionBiasContext make_selection_bias_context(const NetworkSpec& net,
                                                 const std::vector<PrunableConv>& prunable,
                                                 const Tensor& calib_real,
                                                 const Tensor& calib_control) {
    SelectionBiasContext ctx;
    std::vector<Tensor> real_outs = forward_all_eval(net, calib_real);
    std::vector<Tensor> ctrl_outs = forward_all_eval(net, calib_control);
    for (const PrunableConv& pc : prunable) {
        const LayerSpec& conv = net.layers[static_cast<size_t>(pc.conv_layer)];
        const Tensor& a_in = conv.input < 0 ? calib_real : real_outs[static_cast<size_t>(conv.input)];
        const Tensor& t_in = conv.input < 0 ? calib_control : ctrl_outs[static_cast<size_t>(conv.input)];
        Tensor s_in = channel_knockoff_gap(a_in, t_in);
        // per-output-channel diagonal of W^T diag{s} W for spatially constant s
        ConvBiasModel m;
        m.w_diag = Tensor({conv.out_ch});
        for (int64_t o = 0; o < conv.out_ch; ++o) {
            double acc = 0.0;
            for (int64_t c = 0; c < conv.in_ch; ++c) {
                const double sc = s_in.data[c];
                for (int64_t kk = 0; kk < conv.k * conv.k; ++kk) {
                    const double wv = conv.weight.data[(o * conv.in_ch + c) * conv.k * conv.k + kk];
                    acc += sc * wv * wv;
                }
            }
            m.w_diag.data[o] = acc;
        }
        double w_max = 0.0, w_min = std::numeric_limits<double>::infinity();
        for (int64_t o = 0; o < conv.out_ch; ++o) {
            w_max = std::max(w_max, m.w_diag.data[o]);
            w_min = std::min(w_min, m.w_diag.data[o]);
        }
        const double need = std::max((w_max - w_min) / 2.0, 1e-10);
        m.var_b = std::pow(10.0, std::ceil(std::log10(need)));
        m.cov = Tensor({conv.out_ch});
        for (int64_t o = 0; o < conv.out_ch; ++o)
            m.cov.data[o] = m.var_b - (w_max - m.w_diag.data[o]);
        ctx.per_conv.push_back(std::move(m));
    }
    return ctx;
}

// Per-example per-channel joint draws; returns (b, b~) each shaped (N, M).
static std::pair<Tensor, Tensor> draw_bias_batch(const ConvBiasModel& m, int64_t n, Rng& rng) {
    const int64_t c = m.cov.numel();
    Tensor b({n, c}), bt({n, c});
    const double sd = std::sqrt(m.var_b);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double u = rng.normal(), v = rng.normal();
            const double cov = m.cov.data[ch];
            const double resid = std::sqrt(std::max(0.0, m.var_b - cov * cov / m.var_b));
            b.data[i * c + ch] = sd * u;
            bt.data[i * c + ch] = (cov / sd) * u + resid * v;
        }
    return {std::move(b), std::move(bt)};
}

static Tensor broadcast_nc(const Tensor& nc, int64_t h, int64_t w) {
    const int64_t n = nc.dim(0), c = nc.dim(1);
    Tensor out({n, c, h, w});
    for (int64_t i = 0; i < n * c; ++i) {
        const double v = nc.data[i];
        double* p = out.ptr() + i * h * w;
        for (int64_t j = 0; j < h * w; ++j) p[j] = v;
    }
    return out;
}

// ---- two-stream forward -------------------------------------------------------

// Pure control-stream walk (eval mode) with optional b~ injections after
// prunable convs. Returns every layer output.
static std::vector<Tensor> control_forward_all(const NetworkSpec& net, const Tensor& batch,
                                               const std::vector<PrunableConv>& prunable,
                                               const std::vector<Tensor>& bias_bt) {
    NetworkSpec& n = const_cast<NetworkSpec&>(net);
    std::vector<Tensor> outs(net.layers.size(), Tensor({1}));
    auto get = [&](int32_t producer) -> const Tensor& {
        return producer < 0 ? batch : outs[static_cast<size_t>(producer)];
    };
    for (size_t i = 0; i < net.layers.size(); ++i) {
        LayerSpec& l = n.layers[i];
        const Tensor& in = get(l.input);
        switch (l.kind) {
            case LayerKind::conv:
                outs[i] = conv2d_forward(in, l.weight, l.bias, l.stride, l.pad);
                break;
            case LayerKind::batchnorm:
                outs[i] = batchnorm_forward(in, l.gamma, l.beta, l.running_mean, l.running_var,
                                            false, l.bn_eps, l.bn_momentum);
                break;
            case LayerKind::activation:
                outs[i] = l.act == ActKind::relu ? relu_forward(in) : sigmoid_forward(in);
                break;
            case LayerKind::maxpool:
                outs[i] = maxpool_forward(in, l.k, l.stride);
                break;
            case LayerKind::avgpool:
                outs[i] = global_avgpool_forward(in);
                break;
            case LayerKind::flatten: {
                const int64_t b = in.dim(0);
                outs[i] = in.reshaped({b, in.numel() / b});
                break;
            }
            case LayerKind::linear:
                outs[i] = linear_forward(in, l.weight, l.bias);
                break;
            case LayerKind::residual_add: {
                const Tensor& in2 = get(l.input2);
                Tensor y(in.shape);
                for (int64_t j = 0; j < in.numel(); ++j) y.data[j] = in.data[j] + in2.data[j];
                outs[i] = std::move(y);
                break;
            }
        }
        if (!bias_bt.empty()) {
            for (size_t p = 0; p < prunable.size(); ++p) {
                if (prunable[p].conv_layer != static_cast<int32_t>(i)) continue;
                Tensor add = broadcast_nc(bias_bt[p], outs[i].dim(2), outs[i].dim(3));
                for (int64_t j = 0; j < outs[i].numel(); ++j) outs[i].data[j] += add.data[j];
            }
        }
    }
    return outs;
}

struct MixedForwardArgs {
    ControlMode mode = ControlMode::none;
    const std::vector<Tensor>* control_outs = nullptr;  // required unless mode none
    const std::vector<Tensor>* bias_b = nullptr;        // per prunable conv, (N, M); optional
    bool detach_knockoff = false;
    bool trainable_theta = false;
    MixTrace* trace = nullptr;
};

static Var mixed_forward_tape(NetworkSpec& net, Tape& tape, const SelectionState& state,
                              Var real_in, const MixedForwardArgs& args) {
    // one sigmoid node per prunable conv, shared across its uses
    std::vector<Var> beta_vars(state.prunable.size());
    for (size_t i = 0; i < state.prunable.size(); ++i) {
        const std::string name = "theta." + std::to_string(state.prunable[i].conv_layer);
        Var th = args.trainable_theta ? tape.param(name, state.theta[i])
                                      : tape.input(state.theta[i]);
        beta_vars[i] = tape.sigmoid(th);
    }
    auto hook = [&](int32_t layer_idx, Var out, Tape& t) -> Var {
        for (size_t i = 0; i < state.prunable.size(); ++i) {
            const PrunableConv& pc = state.prunable[i];
            if (pc.conv_layer == layer_idx && args.bias_b) {
                const Tensor& out_v = t.value(out);
                Tensor add = broadcast_nc((*args.bias_b)[i], out_v.dim(2), out_v.dim(3));
                out = t.add(out, t.input(std::move(add)));
            }
            if (pc.mix_layer != layer_idx) continue;
            Var mixed = t.channel_scale(out, beta_vars[i]);
            if (args.mode != ControlMode::none) {
                const Tensor& ctrl = (*args.control_outs)[static_cast<size_t>(layer_idx)];
                require(ctrl.same_shape(t.value(out)),
                        "selection streams diverge at layer ", layer_idx, ": real ",
                        shape_str(t.value(out).shape), " vs control ", shape_str(ctrl.shape));
                Var bt;
                if (args.detach_knockoff) {
                    bt = t.input(state.beta_tilde(i));
                } else {
                    bt = t.sub_from_const(1.0, beta_vars[i]);
                }
                mixed = t.add(mixed, t.channel_scale(t.input(ctrl), bt));
            }
            if (args.trace) {
                args.trace->conv_layers.push_back(pc.conv_layer);
                args.trace->mixed.push_back(t.value(mixed));
                args.trace->control_feats.push_back(
                    args.mode != ControlMode::none
                        ? (*args.control_outs)[static_cast<size_t>(layer_idx)]
                        : Tensor(t.value(out).shape));
            }
            out = mixed;
        }
        return out;
    };
    return forward_tape(net, tape, real_in, false, false, hook);
}

Tensor selection_forward(const NetworkSpec& net, const SelectionState& state,
                         const Tensor& real_batch, const Tensor& control_batch,
                         const SelectionForwardSpec& spec) {
    NetworkSpec& n = const_cast<NetworkSpec&>(net);
    require(spec.mode == ControlMode::none || real_batch.same_shape(control_batch),
            "selection_forward: real batch ", shape_str(real_batch.shape),
            " and control batch ", shape_str(control_batch.shape), " must match");
    std::vector<Tensor> bias_b, bias_bt;
    if (spec.bias && spec.mode != ControlMode::none) {
        require(spec.bias_rng, "selection_forward: bias pairs need an RNG");
        require(spec.bias->per_conv.size() == state.prunable.size(),
                "selection_forward: bias context does not match prunable layers");
        for (size_t i = 0; i < state.prunable.size(); ++i) {
            auto [b, bt] = draw_bias_batch(spec.bias->per_conv[i], real_batch.dim(0),
                                           *spec.bias_rng);
            bias_b.push_back(std::move(b));
            bias_bt.push_back(std::move(bt));
        }
    }
    std::vector<Tensor> control_outs;
    if (spec.mode != ControlMode::none)
        control_outs = control_forward_all(n, control_batch, state.prunable, bias_bt);
    Tape tape;
    Var real_in = tape.input(real_batch);
    MixedForwardArgs args;
    args.mode = spec.mode;
    args.control_outs = &control_outs;
    args.bias_b = bias_b.empty() ? nullptr : &bias_b;
    args.detach_knockoff = spec.detach_knockoff;
    args.trace = spec.trace;
    Var logits = mixed_forward_tape(n, tape, state, real_in, args);
    return tape.value(logits);
}

Tensor make_control_batch(ControlMode mode, const Dataset& data, const Dataset* knockoffs,
                          const std::vector<int64_t>& indices, Rng& rng) {
    switch (mode) {
        case ControlMode::knockoff: {
            require(knockoffs, "knockoff control mode requires a knockoff dataset/cache");
            require(knockoffs->size() == data.size(),
                    "knockoff dataset has ", knockoffs->size(), " rows, real data has ",
                    data.size(), "; they must be index-aligned");
            return knockoffs->batch(indices);
        }
        case ControlMode::noise: {
            const int64_t c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
            const int64_t n = data.images.dim(0), plane = h * w;
            // Gaussian matched to the per-channel moments of the (already
            // normalized) training images.
            std::vector<double> mu(static_cast<size_t>(c)), sd(static_cast<size_t>(c));
            for (int64_t ch = 0; ch < c; ++ch) {
                double s = 0.0, ss = 0.0;
                for (int64_t b = 0; b < n; ++b) {
                    const double* p = data.images.ptr() + (b * c + ch) * plane;
                    for (int64_t j = 0; j < plane; ++j) {
                        s += p[j];
                        ss += p[j] * p[j];
                    }
                }
                const double m = s / static_cast<double>(n * plane);
                mu[static_cast<size_t>(ch)] = m;
                sd[static_cast<size_t>(ch)] =
                    std::sqrt(std::max(ss / static_cast<double>(n * plane) - m * m, 1e-12));
            }
            Tensor out({static_cast<int64_t>(indices.size()), c, h, w});
            for (int64_t i = 0; i < out.dim(0); ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double* p = out.ptr() + (i * c + ch) * plane;
                    for (int64_t j = 0; j < plane; ++j)
                        p[j] = rng.normal(mu[static_cast<size_t>(ch)],
                                          sd[static_cast<size_t>(ch)]);
                }
            return out;
        }
        case ControlMode::random_sample: {
            std::vector<int64_t> picks(indices.size());
            for (auto& v : picks) v = rng.uniform_int(data.size());
            return data.batch(picks);
        }
        case ControlMode::none: {
            return Tensor({static_cast<int64_t>(indices.size()), data.images.dim(1),
                           data.images.dim(2), data.images.dim(3)});
        }
    }
    fail("unknown control mode");
}

SelectionState optimize_scaling(NetworkSpec& net, const Dataset& data,
                                const Dataset* control_data, const SelectionConfig& config,
                                SelectionRunInfo* info) {
    require(config.batch > 0, "optimize_scaling: batch size must be positive");
    require(config.epochs >= 0, "optimize_scaling: epochs must be non-negative");
    SelectionState state = init_selection_state(net);
    const std::string digest_before = weights_digest(net);
    if (info) info->weights_digest_before = digest_before;
    if (config.mode == ControlMode::knockoff)
        require(control_data, "knockoff control mode requires a knockoff dataset/cache");
    if (config.epochs == 0) {
        if (info) info->weights_digest_after = digest_before;
        return state;
    }

    SelectionBiasContext bias_ctx;
    const bool use_bias = config.bias && config.mode != ControlMode::none;
    if (use_bias) {
        const int64_t n_calib = std::min<int64_t>(256, data.size());
        std::vector<int64_t> calib(static_cast<size_t>(n_calib));
        std::iota(calib.begin(), calib.end(), 0);
        Rng calib_rng = Rng::stream(config.seed, "selection.calib");
        Tensor calib_real = data.batch(calib);
        Tensor calib_control =
            make_control_batch(config.mode, data, control_data, calib, calib_rng);
        bias_ctx = make_selection_bias_context(net, state.prunable, calib_real, calib_control);
    }

    std::map<std::string, Tensor*> params;
    for (size_t i = 0; i < state.prunable.size(); ++i)
        params["theta." + std::to_string(state.prunable[i].conv_layer)] = &state.theta[i];
    AdamState adam;

    std::vector<int64_t> order(static_cast<size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng = Rng::stream(config.seed, "selection.shuffle", static_cast<uint64_t>(epoch));
        Rng control_rng = Rng::stream(config.seed, "selection.control", static_cast<uint64_t>(epoch));
        Rng bias_rng = Rng::stream(config.seed, "selection.bias", static_cast<uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (int64_t start = 0; start < data.size(); start += config.batch) {
            const int64_t end = std::min<int64_t>(start + config.batch, data.size());
            std::vector<int64_t> idx(order.begin() + start, order.begin() + end);
            Tensor real = data.batch(idx);
            std::vector<int64_t> labels = data.batch_labels(idx);
            Tensor control = make_control_batch(config.mode, data, control_data, idx, control_rng);

            std::vector<Tensor> bias_b, bias_bt;
            if (use_bias) {
                for (size_t i = 0; i < state.prunable.size(); ++i) {
                    auto [b, bt] = draw_bias_batch(bias_ctx.per_conv[i], real.dim(0), bias_rng);
                    bias_b.push_back(std::move(b));
                    bias_bt.push_back(std::move(bt));
                }
            }
            std::vector<Tensor> control_outs;
            if (config.mode != ControlMode::none)
                control_outs = control_forward_all(net, control, state.prunable, bias_bt);

            Tape tape;
            Var real_in = tape.input(real);
            MixedForwardArgs args;
            args.mode = config.mode;
            args.control_outs = &control_outs;
            args.bias_b = bias_b.empty() ? nullptr : &bias_b;
            args.detach_knockoff = config.detach_knockoff;
            args.trainable_theta = true;
            Var logits = mixed_forward_tape(net, tape, state, real_in, args);
            Var loss = tape.softmax_xent(logits, labels);
            loss_sum += tape.value(loss).data[0];
            ++batches;
            auto grads = tape.backward(loss);
            adam_step(params, grads, adam, config.lr);
            require(state.constraint_gap() == 0.0,
                    "selection constraint beta + beta~ = 1 violated after optimizer step");
        }
        if (info) info->epoch_losses.push_back(loss_sum / std::max<int64_t>(batches, 1));
    }

    const std::string digest_after = weights_digest(net);
    if (info) info->weights_digest_after = digest_after;
    require(digest_after == digest_before,
            "optimize_scaling: frozen network weights changed during selection");
    return state;
}

void selection_state_to_sections(const SelectionState& state, SectionMap& out) {
    std::vector<int64_t> convs;
    for (const PrunableConv& pc : state.prunable) convs.push_back(pc.conv_layer);
    out["SELSTATE.layers"] = section_from_i64(convs);
    for (size_t i = 0; i < state.theta.size(); ++i)
        out["SELSTATE.theta." + std::to_string(state.prunable[i].conv_layer)] =
            section_from_tensor(state.theta[i]);
}

SelectionState selection_state_from_sections(const SectionMap& sections,
                                             const NetworkSpec& net) {
    auto it = sections.find("SELSTATE.layers");
    require(it != sections.end(), "selection state sections missing 'SELSTATE.layers'");
    std::vector<int64_t> convs = i64_from_section(it->second);
    SelectionState state;
    state.prunable = prunable_convs(net);
    require(convs.size() == state.prunable.size(),
            "selection state layer count ", convs.size(),
            " does not match network's prunable layers ", state.prunable.size());
    for (size_t i = 0; i < state.prunable.size(); ++i) {
        require(convs[i] == state.prunable[i].conv_layer,
                "selection state layer mismatch at slot ", i);
        auto ts = sections.find("SELSTATE.theta." + std::to_string(convs[i]));
        require(ts != sections.end(), "selection state missing theta for layer ", convs[i]);
        Tensor th = tensor_from_section(ts->second);
        require(th.numel() == net.layers[static_cast<size_t>(convs[i])].out_ch,
                "selection state theta length mismatch for layer ", convs[i]);
        state.theta.push_back(std::move(th));
    }
    return state;
}

}  // namespace scop

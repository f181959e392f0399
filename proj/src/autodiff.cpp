#include "scop/autodiff.hpp"

#include <utility>

#include "scop/common.hpp"

namespace scop {

const Tape::Node& Tape::node(Var v) const {
    require(v.id >= 0 && v.id < static_cast<int32_t>(nodes_.size()),
            "Tape: invalid node handle ", v.id);
    return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::push(Tensor value, std::vector<int32_t> parents,
               std::function<void(Tape&, const Node&, const Tensor&)> backfn) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backfn = std::move(backfn);
    for (int32_t p : n.parents)
        if (nodes_[static_cast<size_t>(p)].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::input(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Tape::param(const std::string& name, Tensor value) {
    require(!name.empty(), "Tape: parameter name must not be empty");
    require(!param_ids_.count(name), "Tape: duplicate parameter name '", name, "'");
    Var v = push(std::move(value), {}, nullptr);
    nodes_.back().name = name;
    nodes_.back().needs_grad = true;
    param_ids_[name] = v.id;
    return v;
}

void Tape::accum(int32_t id, const Tensor& g) {
    auto& slot = grads_[static_cast<size_t>(id)];
    if (!grad_set_[static_cast<size_t>(id)]) {
        slot = g;
        grad_set_[static_cast<size_t>(id)] = 1;
        return;
    }
    check_same_shape(slot, g, "Tape gradient accumulation");
    for (int64_t i = 0; i < g.numel(); ++i) slot.data[i] += g.data[i];
}

Tensor* Tape::grad_slot(int32_t id) {
    return grad_set_[static_cast<size_t>(id)] ? &grads_[static_cast<size_t>(id)] : nullptr;
}

Var Tape::conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad) {
    ConvDims d = conv_dims(value(x), value(w), stride, pad);
    Tensor cols;
    Tensor y = conv2d_forward(value(x), value(w), value(b), stride, pad, &cols);
    const bool nx = needs(x), nw = needs(w), nb = needs(b);
    auto back = [d, cols = std::move(cols), x, w, b, nx, nw, nb](Tape& t, const Node&,
                                                                 const Tensor& gout) {
        Tensor gx, gw, gb;
        conv2d_backward(gout, cols, t.value(w), d, nx ? &gx : nullptr, nw ? &gw : nullptr,
                        nb ? &gb : nullptr);
        if (nx) t.accum(x.id, gx);
        if (nw) t.accum(w.id, gw);
        if (nb) t.accum(b.id, gb);
    };
    return push(std::move(y), {x.id, w.id, b.id}, std::move(back));
}

Var Tape::batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                    bool train, double eps, double momentum) {
    BatchNormAux aux;
    Tensor y = batchnorm_forward(value(x), value(gamma), value(beta), running_mean,
                                 running_var, train, eps, momentum, &aux);
    const bool nx = needs(x), ng = needs(gamma), nb = needs(beta);
    Tensor rv_saved = running_var;  // eval backward needs the stats used forward
    auto back = [aux = std::move(aux), rv = std::move(rv_saved), train, eps, x, gamma, beta,
                 nx, ng, nb](Tape& t, const Node&, const Tensor& gout) {
        Tensor gx, gg, gb;
        batchnorm_backward(gout, t.value(x), t.value(gamma), aux, train, rv, eps,
                           nx ? &gx : nullptr, ng ? &gg : nullptr, nb ? &gb : nullptr);
        if (nx) t.accum(x.id, gx);
        if (ng) t.accum(gamma.id, gg);
        if (nb) t.accum(beta.id, gb);
    };
    return push(std::move(y), {x.id, gamma.id, beta.id}, std::move(back));
}

Var Tape::relu(Var x) {
    const Tensor& xv = value(x);
    uint64_t bits = 0;
    int packed = 0;
    for (double v : xv.data) {
        bits = bits << 1 | uint64_t(v > 0.0);
        if (++packed == 64) {
            sig_mix(bits);
            bits = 0;
            packed = 0;
        }
    }
    if (packed > 0) sig_mix(bits);
    Tensor y = relu_forward(xv);
    auto back = [x](Tape& t, const Node&, const Tensor& gout) {
        t.accum(x.id, relu_backward(gout, t.value(x)));
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::sigmoid(Var x) {
    Tensor y = sigmoid_forward(value(x));
    auto back = [x](Tape& t, const Node& self, const Tensor& gout) {
        t.accum(x.id, sigmoid_backward(gout, self.value));
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::maxpool(Var x, int64_t k, int64_t stride) {
    std::vector<int64_t> argmax;
    Tensor y = maxpool_forward(value(x), k, stride, &argmax);
    for (int64_t a : argmax) sig_mix(uint64_t(a));
    auto back = [x, argmax = std::move(argmax)](Tape& t, const Node&, const Tensor& gout) {
        t.accum(x.id, maxpool_backward(gout, t.value(x), argmax));
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::global_avgpool(Var x) {
    Tensor y = global_avgpool_forward(value(x));
    auto back = [x](Tape& t, const Node&, const Tensor& gout) {
        t.accum(x.id, global_avgpool_backward(gout, t.value(x)));
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::flatten(Var x) {
    const Tensor& xv = value(x);
    require(xv.rank() >= 1, "flatten: input must have rank >= 1");
    const int64_t n = xv.dim(0);
    Tensor y = xv.reshaped({n, xv.numel() / n});
    auto back = [x](Tape& t, const Node&, const Tensor& gout) {
        t.accum(x.id, gout.reshaped(t.value(x).shape));
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::linear(Var x, Var w, Var b) {
    Tensor y = linear_forward(value(x), value(w), value(b));
    const bool nx = needs(x), nw = needs(w), nb = needs(b);
    auto back = [x, w, b, nx, nw, nb](Tape& t, const Node&, const Tensor& gout) {
        Tensor gx, gw, gb;
        linear_backward(gout, t.value(x), t.value(w), nx ? &gx : nullptr,
                        nw ? &gw : nullptr, nb ? &gb : nullptr);
        if (nx) t.accum(x.id, gx);
        if (nw) t.accum(w.id, gw);
        if (nb) t.accum(b.id, gb);
    };
    return push(std::move(y), {x.id, w.id, b.id}, std::move(back));
}

Var Tape::channel_scale(Var x, Var s) {
    Tensor y = channel_scale_forward(value(x), value(s));
    const bool nx = needs(x), ns = needs(s);
    auto back = [x, s, nx, ns](Tape& t, const Node&, const Tensor& gout) {
        Tensor gx, gs;
        channel_scale_backward(gout, t.value(x), t.value(s), nx ? &gx : nullptr,
                               ns ? &gs : nullptr);
        if (nx) t.accum(x.id, gx);
        if (ns) t.accum(s.id, gs);
    };
    return push(std::move(y), {x.id, s.id}, std::move(back));
}

Var Tape::add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    check_same_shape(av, bv, "add");
    Tensor y(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) y.data[i] = av.data[i] + bv.data[i];
    const bool na = needs(a), nb = needs(b);
    auto back = [a, b, na, nb](Tape& t, const Node&, const Tensor& gout) {
        if (na) t.accum(a.id, gout);
        if (nb) t.accum(b.id, gout);
    };
    return push(std::move(y), {a.id, b.id}, std::move(back));
}

Var Tape::sub_from_const(double c, Var x) {
    const Tensor& xv = value(x);
    Tensor y(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) y.data[i] = c - xv.data[i];
    auto back = [x](Tape& t, const Node&, const Tensor& gout) {
        Tensor g(gout.shape);
        for (int64_t i = 0; i < gout.numel(); ++i) g.data[i] = -gout.data[i];
        t.accum(x.id, g);
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::mul_scalar(Var x, double c) {
    const Tensor& xv = value(x);
    Tensor y(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) y.data[i] = c * xv.data[i];
    auto back = [x, c](Tape& t, const Node&, const Tensor& gout) {
        Tensor g(gout.shape);
        for (int64_t i = 0; i < gout.numel(); ++i) g.data[i] = c * gout.data[i];
        t.accum(x.id, g);
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::square(Var x) {
    const Tensor& xv = value(x);
    Tensor y(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) y.data[i] = xv.data[i] * xv.data[i];
    auto back = [x](Tape& t, const Node&, const Tensor& gout) {
        const Tensor& xv = t.value(x);
        Tensor g(gout.shape);
        for (int64_t i = 0; i < gout.numel(); ++i) g.data[i] = 2.0 * xv.data[i] * gout.data[i];
        t.accum(x.id, g);
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::sum(Var x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) s += xv.data[i];
    Tensor y({1});
    y.data[0] = s;
    auto back = [x](Tape& t, const Node&, const Tensor& gout) {
        Tensor g(t.value(x).shape, gout.data[0]);
        t.accum(x.id, g);
    };
    return push(std::move(y), {x.id}, std::move(back));
}

Var Tape::softmax_xent(Var logits, std::vector<int64_t> labels) {
    Tensor probs;
    double loss = softmax_xent_forward(value(logits), labels, &probs);
    Tensor y({1});
    y.data[0] = loss;
    auto back = [logits, probs = std::move(probs), labels = std::move(labels)](
                    Tape& t, const Node&, const Tensor& gout) {
        Tensor g = softmax_xent_backward(probs, labels);
        if (gout.data[0] != 1.0)
            for (int64_t i = 0; i < g.numel(); ++i) g.data[i] *= gout.data[0];
        t.accum(logits.id, g);
    };
    return push(std::move(y), {logits.id}, std::move(back));
}

std::map<std::string, Tensor> Tape::backward(Var loss) {
    const Node& ln = node(loss);
    require(ln.value.numel() == 1, "backward: loss must be a scalar, got shape ",
            shape_str(ln.value.shape));
    grads_.assign(nodes_.size(), Tensor({1}));
    grad_set_.assign(nodes_.size(), 0);
    Tensor seed({1}, 1.0);
    accum(loss.id, seed);
    for (int32_t i = loss.id; i >= 0; --i) {
        const Node& n = nodes_[static_cast<size_t>(i)];
        if (!grad_set_[static_cast<size_t>(i)] || !n.needs_grad || !n.backfn) continue;
        n.backfn(*this, n, grads_[static_cast<size_t>(i)]);
    }
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : param_ids_) {
        if (grad_set_[static_cast<size_t>(id)])
            out.emplace(name, grads_[static_cast<size_t>(id)]);
        else
            out.emplace(name, Tensor(nodes_[static_cast<size_t>(id)].value.shape));
    }
    return out;
}

const Tensor* Tape::grad_of(Var v) const {
    if (v.id < 0 || static_cast<size_t>(v.id) >= grad_set_.size()) return nullptr;
    if (!grad_set_[static_cast<size_t>(v.id)]) return nullptr;
    return &grads_[static_cast<size_t>(v.id)];
}

}  // namespace scop

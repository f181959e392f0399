#include "scop/model.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "scop/common.hpp"
#include "scop/dataio.hpp"
#include "scop/digest.hpp"

namespace scop {

using json = nlohmann::json;

std::string layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::activation: return "activation";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::avgpool: return "avgpool";
        case LayerKind::flatten: return "flatten";
        case LayerKind::linear: return "linear";
        case LayerKind::residual_add: return "residual-add";
    }
    fail("unknown layer kind tag ", static_cast<int>(k));
}

static LayerKind layer_kind_from_name(const std::string& s) {
    if (s == "conv") return LayerKind::conv;
    if (s == "batchnorm") return LayerKind::batchnorm;
    if (s == "activation") return LayerKind::activation;
    if (s == "maxpool") return LayerKind::maxpool;
    if (s == "avgpool") return LayerKind::avgpool;
    if (s == "flatten") return LayerKind::flatten;
    if (s == "linear") return LayerKind::linear;
    if (s == "residual-add") return LayerKind::residual_add;
    fail("unknown layer kind '", s, "'");
}

static std::string layer_label(const NetworkSpec& net, int32_t i) {
    std::ostringstream os;
    os << "layer " << i << " (" << layer_kind_name(net.layers[static_cast<size_t>(i)].kind)
       << ")";
    return os.str();
}

static const std::vector<int64_t>& input_shape_of(const NetworkSpec& net,
                                                  const std::vector<std::vector<int64_t>>& shapes,
                                                  int32_t producer) {
    if (producer < 0) return net.input_shape;
    return shapes[static_cast<size_t>(producer)];
}

std::vector<std::vector<int64_t>> infer_shapes(const NetworkSpec& net) {
    require(net.input_shape.size() == 3, "network input shape must be {C,H,W}, got ",
            shape_str(net.input_shape));
    std::vector<std::vector<int64_t>> shapes;
    shapes.reserve(net.layers.size());
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        const int32_t idx = static_cast<int32_t>(i);
        require(l.input >= -1 && l.input < idx, layer_label(net, idx),
                ": input index ", l.input, " must reference an earlier layer");
        const auto& in = input_shape_of(net, shapes, l.input);
        std::vector<int64_t> out;
        switch (l.kind) {
            case LayerKind::conv: {
                require(in.size() == 3, layer_label(net, idx), ": needs a C,H,W input, got ",
                        shape_str(in));
                require(in[0] == l.in_ch, layer_label(net, idx), ": expects ", l.in_ch,
                        " input channels, got ", in[0]);
                require(l.weight.rank() == 4 && l.weight.dim(0) == l.out_ch &&
                            l.weight.dim(1) == l.in_ch && l.weight.dim(2) == l.k &&
                            l.weight.dim(3) == l.k,
                        layer_label(net, idx), ": weight shape ", shape_str(l.weight.shape),
                        " does not match conv ", l.in_ch, "->", l.out_ch, " k=", l.k);
                const int64_t oh = (in[1] + 2 * l.pad - l.k) / l.stride + 1;
                const int64_t ow = (in[2] + 2 * l.pad - l.k) / l.stride + 1;
                require(oh >= 1 && ow >= 1, layer_label(net, idx), ": empty output extent");
                out = {l.out_ch, oh, ow};
                break;
            }
            case LayerKind::batchnorm:
                require(in.size() == 3, layer_label(net, idx), ": needs a C,H,W input");
                require(l.gamma.numel() == in[0], layer_label(net, idx), ": gamma length ",
                        l.gamma.numel(), " does not match C=", in[0]);
                out = in;
                break;
            case LayerKind::activation:
                out = in;
                break;
            case LayerKind::maxpool: {
                require(in.size() == 3, layer_label(net, idx), ": needs a C,H,W input");
                require(in[1] >= l.k && in[2] >= l.k, layer_label(net, idx),
                        ": window exceeds input ", shape_str(in));
                out = {in[0], (in[1] - l.k) / l.stride + 1, (in[2] - l.k) / l.stride + 1};
                break;
            }
            case LayerKind::avgpool:
                require(in.size() == 3, layer_label(net, idx), ": needs a C,H,W input");
                out = {in[0], 1, 1};
                break;
            case LayerKind::flatten: {
                int64_t n = 1;
                for (int64_t e : in) n *= e;
                out = {n};
                break;
            }
            case LayerKind::linear: {
                int64_t n = 1;
                for (int64_t e : in) n *= e;
                require(n == l.in_ch, layer_label(net, idx), ": expects ", l.in_ch,
                        " input features, got ", n, " from shape ", shape_str(in));
                require(l.weight.rank() == 2 && l.weight.dim(0) == l.out_ch &&
                            l.weight.dim(1) == l.in_ch,
                        layer_label(net, idx), ": weight shape ", shape_str(l.weight.shape),
                        " does not match linear ", l.in_ch, "->", l.out_ch);
                out = {l.out_ch};
                break;
            }
            case LayerKind::residual_add: {
                require(l.input2 >= -1 && l.input2 < idx, layer_label(net, idx),
                        ": second input index ", l.input2, " must reference an earlier layer");
                const auto& in2 = input_shape_of(net, shapes, l.input2);
                require(in == in2, layer_label(net, idx), ": operand shapes differ, ",
                        shape_str(in), " vs ", shape_str(in2));
                out = in;
                break;
            }
        }
        shapes.push_back(std::move(out));
    }
    require(!net.layers.empty(), "network has no layers");
    return shapes;
}

Tensor forward(NetworkSpec& net, const Tensor& batch, const ForwardOptions& opts) {
    require(batch.rank() == 4, "forward: batch must be rank 4, got ", shape_str(batch.shape));
    require(batch.dim(1) == net.input_shape[0] && batch.dim(2) == net.input_shape[1] &&
                batch.dim(3) == net.input_shape[2],
            "forward: batch shape ", shape_str(batch.shape),
            " does not match declared input shape ", shape_str(net.input_shape));
    std::vector<Tensor> outs(net.layers.size());
    auto get = [&](int32_t producer) -> const Tensor& {
        return producer < 0 ? batch : outs[static_cast<size_t>(producer)];
    };
    for (size_t i = 0; i < net.layers.size(); ++i) {
        LayerSpec& l = net.layers[i];
        const int32_t idx = static_cast<int32_t>(i);
        const Tensor& in = get(l.input);
        switch (l.kind) {
            case LayerKind::conv:
                require(in.dim(1) == l.in_ch, layer_label(net, idx), ": expects ", l.in_ch,
                        " input channels, got shape ", shape_str(in.shape));
                outs[i] = conv2d_forward(in, l.weight, l.bias, l.stride, l.pad);
                break;
            case LayerKind::batchnorm:
                outs[i] = batchnorm_forward(in, l.gamma, l.beta, l.running_mean, l.running_var,
                                            opts.train, l.bn_eps, l.bn_momentum);
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
                const int64_t n = in.dim(0);
                outs[i] = in.reshaped({n, in.numel() / n});
                break;
            }
            case LayerKind::linear:
                outs[i] = linear_forward(in, l.weight, l.bias);
                break;
            case LayerKind::residual_add: {
                const Tensor& in2 = get(l.input2);
                require(in.same_shape(in2), layer_label(net, idx), ": operand shapes differ, ",
                        shape_str(in.shape), " vs ", shape_str(in2.shape));
                Tensor y(in.shape);
                for (int64_t j = 0; j < in.numel(); ++j) y.data[j] = in.data[j] + in2.data[j];
                outs[i] = std::move(y);
                break;
            }
        }
        if (opts.inject_after == idx) {
            require(opts.injected, "forward: inject_after set without an injected tensor");
            require(outs[i].same_shape(*opts.injected), layer_label(net, idx),
                    ": injected tensor shape ", shape_str(opts.injected->shape),
                    " does not match layer output ", shape_str(outs[i].shape));
            outs[i] = *opts.injected;
        }
        if (opts.capture_layer == idx && opts.captured) *opts.captured = outs[i];
    }
    return outs.back();
}

Tensor forward_eval(const NetworkSpec& net, const Tensor& batch) {
    ForwardOptions opts;
    return forward(const_cast<NetworkSpec&>(net), batch, opts);
}

std::vector<Tensor> forward_all_eval(const NetworkSpec& net, const Tensor& batch) {
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
    }
    return outs;
}

Var forward_tape(NetworkSpec& net, Tape& tape, Var batch, bool train, bool trainable,
                 const LayerHook& hook) {
    std::vector<Var> outs(net.layers.size());
    auto pname = [](size_t i, const char* field) {
        return "layer" + std::to_string(i) + "." + field;
    };
    auto leaf = [&](size_t i, const char* field, const Tensor& t) {
        return trainable ? tape.param(pname(i, field), t) : tape.input(t);
    };
    auto get = [&](int32_t producer) -> Var {
        return producer < 0 ? batch : outs[static_cast<size_t>(producer)];
    };
    for (size_t i = 0; i < net.layers.size(); ++i) {
        LayerSpec& l = net.layers[i];
        Var in = get(l.input);
        Var out;
        switch (l.kind) {
            case LayerKind::conv:
                out = tape.conv2d(in, leaf(i, "weight", l.weight), leaf(i, "bias", l.bias),
                                  l.stride, l.pad);
                break;
            case LayerKind::batchnorm:
                out = tape.batchnorm(in, leaf(i, "gamma", l.gamma), leaf(i, "beta", l.beta),
                                     l.running_mean, l.running_var, train, l.bn_eps,
                                     l.bn_momentum);
                break;
            case LayerKind::activation:
                out = l.act == ActKind::relu ? tape.relu(in) : tape.sigmoid(in);
                break;
            case LayerKind::maxpool:
                out = tape.maxpool(in, l.k, l.stride);
                break;
            case LayerKind::avgpool:
                out = tape.global_avgpool(in);
                break;
            case LayerKind::flatten:
                out = tape.flatten(in);
                break;
            case LayerKind::linear:
                out = tape.linear(in, leaf(i, "weight", l.weight), leaf(i, "bias", l.bias));
                break;
            case LayerKind::residual_add:
                out = tape.add(in, get(l.input2));
                break;
        }
        if (hook) out = hook(static_cast<int32_t>(i), out, tape);
        outs[i] = out;
    }
    return outs.back();
}

std::map<std::string, Tensor*> named_params(NetworkSpec& net) {
    std::map<std::string, Tensor*> out;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        LayerSpec& l = net.layers[i];
        auto pname = [&](const char* field) {
            return "layer" + std::to_string(i) + "." + field;
        };
        switch (l.kind) {
            case LayerKind::conv:
            case LayerKind::linear:
                out[pname("weight")] = &l.weight;
                out[pname("bias")] = &l.bias;
                break;
            case LayerKind::batchnorm:
                out[pname("gamma")] = &l.gamma;
                out[pname("beta")] = &l.beta;
                break;
            default:
                break;
        }
    }
    return out;
}

CountResult count_params_flops(const NetworkSpec& net) {
    CountResult r;
    if (net.layers.empty()) return r;
    auto shapes = infer_shapes(net);
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        switch (l.kind) {
            case LayerKind::conv: {
                r.params += l.out_ch * l.in_ch * l.k * l.k + l.out_ch;
                const auto& os = shapes[i];
                r.macs += l.k * l.k * l.in_ch * l.out_ch * os[1] * os[2];
                break;
            }
            case LayerKind::batchnorm:
                r.params += 2 * l.gamma.numel();
                break;
            case LayerKind::linear:
                r.params += l.out_ch * l.in_ch + l.out_ch;
                r.macs += l.in_ch * l.out_ch;
                break;
            default:
                break;
        }
    }
    return r;
}

static Tensor he_init(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = rng.normal(0.0, std);
    return t;
}

static LayerSpec make_conv(int32_t input, int64_t in_ch, int64_t out_ch, int64_t k,
                           int64_t stride, int64_t pad, Rng& rng) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.input = input;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.k = k;
    l.stride = stride;
    l.pad = pad;
    l.weight = he_init({out_ch, in_ch, k, k}, in_ch * k * k, rng);
    l.bias = Tensor({out_ch});
    return l;
}

static LayerSpec make_bn(int32_t input, int64_t c) {
    LayerSpec l;
    l.kind = LayerKind::batchnorm;
    l.input = input;
    l.gamma = Tensor({c}, 1.0);
    l.beta = Tensor({c});
    l.running_mean = Tensor({c});
    l.running_var = Tensor({c}, 1.0);
    return l;
}

static LayerSpec make_act(int32_t input, ActKind kind = ActKind::relu) {
    LayerSpec l;
    l.kind = LayerKind::activation;
    l.input = input;
    l.act = kind;
    return l;
}

static LayerSpec make_linear(int32_t input, int64_t in_f, int64_t out_f, Rng& rng) {
    LayerSpec l;
    l.kind = LayerKind::linear;
    l.input = input;
    l.in_ch = in_f;
    l.out_ch = out_f;
    l.weight = he_init({out_f, in_f}, in_f, rng);
    l.bias = Tensor({out_f});
    return l;
}

NetworkSpec build_arch(const std::string& name, int64_t num_classes, Rng& rng) {
    NetworkSpec net;
    net.arch = name;
    net.num_classes = num_classes;
    auto last = [&net] { return static_cast<int32_t>(net.layers.size()) - 1; };
    if (name == "small-cnn") {
        net.input_shape = {1, 28, 28};
        const int64_t widths[3] = {16, 32, 64};
        int64_t in_ch = 1;
        for (int b = 0; b < 3; ++b) {
            net.layers.push_back(make_conv(last(), in_ch, widths[b], 3, 1, 1, rng));
            net.layers.push_back(make_bn(last(), widths[b]));
            net.layers.push_back(make_act(last()));
            if (b < 2) {
                LayerSpec p;
                p.kind = LayerKind::maxpool;
                p.input = last();
                p.k = 2;
                p.stride = 2;
                net.layers.push_back(p);
            }
            in_ch = widths[b];
        }
        LayerSpec g;
        g.kind = LayerKind::avgpool;
        g.input = last();
        net.layers.push_back(g);
        LayerSpec f;
        f.kind = LayerKind::flatten;
        f.input = last();
        net.layers.push_back(f);
        net.layers.push_back(make_linear(last(), 64, num_classes, rng));
    } else if (name == "resnet-tiny") {
        net.input_shape = {3, 32, 32};
        net.layers.push_back(make_conv(-1, 3, 8, 3, 1, 1, rng));
        net.layers.push_back(make_bn(last(), 8));
        net.layers.push_back(make_act(last()));
        int32_t trunk = last();
        int64_t in_ch = 8;
        const int64_t widths[3] = {8, 16, 32};
        for (int s = 0; s < 3; ++s) {
            for (int b = 0; b < 2; ++b) {
                const int64_t out_ch = widths[s];
                const int64_t stride = (s > 0 && b == 0) ? 2 : 1;
                net.layers.push_back(make_conv(trunk, in_ch, out_ch, 3, stride, 1, rng));
                net.layers.push_back(make_bn(last(), out_ch));
                net.layers.push_back(make_act(last()));
                net.layers.push_back(make_conv(last(), out_ch, out_ch, 3, 1, 1, rng));
                net.layers.push_back(make_bn(last(), out_ch));
                int32_t main_out = last();
                int32_t skip = trunk;
                if (stride != 1 || in_ch != out_ch) {
                    net.layers.push_back(make_conv(trunk, in_ch, out_ch, 1, stride, 0, rng));
                    net.layers.push_back(make_bn(last(), out_ch));
                    skip = last();
                }
                LayerSpec add;
                add.kind = LayerKind::residual_add;
                add.input = main_out;
                add.input2 = skip;
                net.layers.push_back(add);
                net.layers.push_back(make_act(last()));
                trunk = last();
                in_ch = out_ch;
            }
        }
        LayerSpec g;
        g.kind = LayerKind::avgpool;
        g.input = last();
        net.layers.push_back(g);
        LayerSpec f;
        f.kind = LayerKind::flatten;
        f.input = last();
        net.layers.push_back(f);
        net.layers.push_back(make_linear(last(), 32, num_classes, rng));
    } else {
        fail("unknown architecture '", name, "'; valid names: small-cnn, resnet-tiny");
    }
    infer_shapes(net);
    return net;
}

std::vector<PrunableConv> prunable_convs(const NetworkSpec& net) {
    // consumers[i] = layers reading layer i's output
    std::vector<std::vector<int32_t>> consumers(net.layers.size());
    for (size_t j = 0; j < net.layers.size(); ++j) {
        const LayerSpec& l = net.layers[j];
        if (l.input >= 0) consumers[static_cast<size_t>(l.input)].push_back(static_cast<int32_t>(j));
        if (l.kind == LayerKind::residual_add && l.input2 >= 0)
            consumers[static_cast<size_t>(l.input2)].push_back(static_cast<int32_t>(j));
    }
    const int32_t last = static_cast<int32_t>(net.layers.size()) - 1;
    std::vector<PrunableConv> result;
    for (size_t c = 0; c < net.layers.size(); ++c) {
        if (net.layers[c].kind != LayerKind::conv) continue;
        PrunableConv pc;
        pc.conv_layer = static_cast<int32_t>(c);
        bool ok = true;
        std::deque<int32_t> queue(consumers[c].begin(), consumers[c].end());
        if (queue.empty()) ok = false;  // dangling output, nothing to slice
        while (ok && !queue.empty()) {
            const int32_t j = queue.front();
            queue.pop_front();
            const LayerSpec& l = net.layers[static_cast<size_t>(j)];
            switch (l.kind) {
                case LayerKind::conv:
                case LayerKind::linear:
                    pc.consumers.push_back(j);
                    break;
                case LayerKind::residual_add:
                    ok = false;
                    break;
                case LayerKind::batchnorm:
                    if (l.input == pc.conv_layer) pc.bn_layer = j;
                    [[fallthrough]];
                case LayerKind::activation:
                case LayerKind::maxpool:
                case LayerKind::avgpool:
                case LayerKind::flatten:
                    if (l.kind == LayerKind::activation && pc.mix_layer < 0) pc.mix_layer = j;
                    if (j == last) {
                        ok = false;  // channels reach the logits unsliced
                        break;
                    }
                    for (int32_t k : consumers[static_cast<size_t>(j)]) queue.push_back(k);
                    break;
            }
        }
        if (ok && pc.mix_layer >= 0 && !pc.consumers.empty()) {
            std::sort(pc.consumers.begin(), pc.consumers.end());
            pc.consumers.erase(std::unique(pc.consumers.begin(), pc.consumers.end()),
                               pc.consumers.end());
            result.push_back(std::move(pc));
        }
    }
    return result;
}

static void add_tensor_section(SectionMap& out, const std::string& name, const Tensor& t) {
    if (t.numel() > 0 && !t.shape.empty()) out[name] = section_from_tensor(t);
}

void network_to_sections(const NetworkSpec& net, SectionMap& out) {
    json arch;
    arch["arch"] = net.arch;
    arch["input_shape"] = net.input_shape;
    arch["num_classes"] = net.num_classes;
    json layers = json::array();
    for (const LayerSpec& l : net.layers) {
        json j;
        j["kind"] = layer_kind_name(l.kind);
        j["input"] = l.input;
        j["input2"] = l.input2;
        j["in_ch"] = l.in_ch;
        j["out_ch"] = l.out_ch;
        j["k"] = l.k;
        j["stride"] = l.stride;
        j["pad"] = l.pad;
        j["act"] = l.act == ActKind::relu ? "relu" : "sigmoid";
        j["bn_eps"] = l.bn_eps;
        j["bn_momentum"] = l.bn_momentum;
        layers.push_back(std::move(j));
    }
    arch["layers"] = std::move(layers);
    out["arch"] = section_from_string(arch.dump());
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        add_tensor_section(out, p + "weight", l.weight);
        add_tensor_section(out, p + "bias", l.bias);
        add_tensor_section(out, p + "gamma", l.gamma);
        add_tensor_section(out, p + "beta", l.beta);
        add_tensor_section(out, p + "running_mean", l.running_mean);
        add_tensor_section(out, p + "running_var", l.running_var);
    }
}

NetworkSpec network_from_sections(const SectionMap& sections) {
    auto it = sections.find("arch");
    require(it != sections.end(), "network sections missing 'arch'");
    json arch = json::parse(string_from_section(it->second));
    NetworkSpec net;
    net.arch = arch.at("arch").get<std::string>();
    net.input_shape = arch.at("input_shape").get<std::vector<int64_t>>();
    net.num_classes = arch.at("num_classes").get<int64_t>();
    size_t i = 0;
    for (const json& j : arch.at("layers")) {
        LayerSpec l;
        l.kind = layer_kind_from_name(j.at("kind").get<std::string>());
        l.input = j.at("input").get<int32_t>();
        l.input2 = j.at("input2").get<int32_t>();
        l.in_ch = j.at("in_ch").get<int64_t>();
        l.out_ch = j.at("out_ch").get<int64_t>();
        l.k = j.at("k").get<int64_t>();
        l.stride = j.at("stride").get<int64_t>();
        l.pad = j.at("pad").get<int64_t>();
        l.act = j.at("act").get<std::string>() == "relu" ? ActKind::relu : ActKind::sigmoid;
        l.bn_eps = j.at("bn_eps").get<double>();
        l.bn_momentum = j.at("bn_momentum").get<double>();
        const std::string p = "layer" + std::to_string(i) + ".";
        auto grab = [&](const char* field, Tensor& dst) {
            auto s = sections.find(p + field);
            if (s != sections.end()) dst = tensor_from_section(s->second);
        };
        grab("weight", l.weight);
        grab("bias", l.bias);
        grab("gamma", l.gamma);
        grab("beta", l.beta);
        grab("running_mean", l.running_mean);
        grab("running_var", l.running_var);
        net.layers.push_back(std::move(l));
        ++i;
    }
    infer_shapes(net);
    return net;
}

std::string weights_digest(const NetworkSpec& net) {
    SectionMap sections;
    network_to_sections(net, sections);
    std::string blob;
    for (const auto& [name, sec] : sections) {
        blob += name;
        blob.push_back('\0');
        blob += sec.bytes;
    }
    return sha256_hex(blob);
}

}  // namespace scop

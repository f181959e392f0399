#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "scop/common.hpp"
#include "scop/dataio.hpp"
#include "scop/model.hpp"
#include "scop/rng.hpp"
#include "test_util.hpp"

using namespace scop;

namespace {

NetworkSpec small_cnn(uint64_t seed = 1) {
    Rng rng = Rng::stream(seed, "init");
    return build_arch("small-cnn", 10, rng);
}

NetworkSpec resnet_tiny(uint64_t seed = 1) {
    Rng rng = Rng::stream(seed, "init");
    return build_arch("resnet-tiny", 10, rng);
}

// Parameter and MAC counts recomputed from the layer table with plain loops.
CountResult recount(const NetworkSpec& net) {
    CountResult r;
    auto shapes = infer_shapes(net);
    for (int64_t i = 0; i < net.layer_count(); ++i) {
        const LayerSpec& l = net.layers[size_t(i)];
        if (l.kind == LayerKind::conv) {
            r.params += l.weight.numel() + l.bias.numel();
            int64_t oh = shapes[size_t(i)][1], ow = shapes[size_t(i)][2];
            r.macs += l.out_ch * oh * ow * l.in_ch * l.k * l.k;
        } else if (l.kind == LayerKind::linear) {
            r.params += l.weight.numel() + l.bias.numel();
            r.macs += l.out_ch * l.in_ch;
        } else if (l.kind == LayerKind::batchnorm) {
            r.params += l.gamma.numel() + l.beta.numel();
        }
    }
    return r;
}

}  // namespace

TEST_CASE("small-cnn builds and produces class logits") {
    NetworkSpec net = small_cnn();
    CHECK(net.input_shape == std::vector<int64_t>{1, 28, 28});
    Rng rng(2);
    Tensor x = tu::rand_tensor({3, 1, 28, 28}, rng);
    Tensor logits = forward_eval(net, x);
    CHECK(logits.shape == std::vector<int64_t>{3, 10});
    CHECK(logits.all_finite());
}

TEST_CASE("resnet-tiny builds and produces class logits") {
    NetworkSpec net = resnet_tiny();
    CHECK(net.input_shape == std::vector<int64_t>{3, 32, 32});
    Rng rng(3);
    Tensor x = tu::rand_tensor({2, 3, 32, 32}, rng);
    Tensor logits = forward_eval(net, x);
    CHECK(logits.shape == std::vector<int64_t>{2, 10});
    CHECK(logits.all_finite());
}

TEST_CASE("unknown architecture error lists valid names") {
    Rng rng(1);
    CHECK_THROWS_WITH_AS(build_arch("vgg", 10, rng), doctest::Contains("small-cnn"), Error);
}

TEST_CASE("infer_shapes validates wiring") {
    NetworkSpec net = small_cnn();
    SUBCASE("dangling producer index") {
        net.layers[2].input = 99;
        CHECK_THROWS_AS(infer_shapes(net), Error);
    }
    SUBCASE("channel mismatch names the layer") {
        net.layers[0].weight = Tensor({16, 2, 3, 3});
        net.layers[0].in_ch = 2;
        CHECK_THROWS_WITH_AS(infer_shapes(net), doctest::Contains("layer 0"), Error);
    }
}

TEST_CASE("residual add shape mismatch is rejected") {
    NetworkSpec net;
    net.arch = "custom";
    net.input_shape = {2, 4, 4};
    net.num_classes = 2;
    LayerSpec conv;
    conv.kind = LayerKind::conv;
    conv.input = -1;
    conv.in_ch = 2;
    conv.out_ch = 3;
    conv.k = 1;
    conv.weight = Tensor({3, 2, 1, 1});
    conv.bias = Tensor({3});
    net.layers.push_back(conv);
    LayerSpec res;
    res.kind = LayerKind::residual_add;
    res.input = 0;
    res.input2 = -1;  // 2 channels vs 3
    net.layers.push_back(res);
    CHECK_THROWS_AS(infer_shapes(net), Error);
}

TEST_CASE("single linear layer with identity weight reproduces flattened input") {
    NetworkSpec net;
    net.arch = "custom";
    net.input_shape = {1, 2, 2};
    net.num_classes = 4;
    LayerSpec fl;
    fl.kind = LayerKind::flatten;
    fl.input = -1;
    net.layers.push_back(fl);
    LayerSpec lin;
    lin.kind = LayerKind::linear;
    lin.input = 0;
    lin.in_ch = 4;
    lin.out_ch = 4;
    lin.weight = Tensor({4, 4});
    for (int i = 0; i < 4; ++i) lin.weight.at2(i, i) = 1.0;
    lin.bias = Tensor({4});
    net.layers.push_back(lin);

    Tensor x = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = forward_eval(net, x);
    CHECK(y.data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("zero weights give zero logits") {
    NetworkSpec net = small_cnn();
    for (auto& l : net.layers) {
        for (auto* t : {&l.weight, &l.bias, &l.gamma, &l.beta})
            for (auto& v : t->data) v = 0.0;
    }
    Rng rng(4);
    Tensor x = tu::rand_tensor({2, 1, 28, 28}, rng);
    Tensor y = forward_eval(net, x);
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("eval forward is a pure function") {
    NetworkSpec net = resnet_tiny();
    Rng rng(5);
    Tensor x = tu::rand_tensor({2, 3, 32, 32}, rng);
    Tensor y1 = forward_eval(net, x);
    Tensor y2 = forward_eval(net, x);
    CHECK(tu::max_abs_diff(y1, y2) == 0.0);
    // running stats untouched in eval
    std::string d1 = weights_digest(net);
    forward_eval(net, x);
    CHECK(weights_digest(net) == d1);
}

TEST_CASE("split forward with capture and inject matches the whole pass") {
    for (const char* arch : {"small-cnn", "resnet-tiny"}) {
        Rng init = Rng::stream(7, "init");
        NetworkSpec net = build_arch(arch, 10, init);
        Rng rng(8);
        std::vector<int64_t> in_shape = {2, net.input_shape[0], net.input_shape[1],
                                         net.input_shape[2]};
        Tensor x = tu::rand_tensor(in_shape, rng);
        Tensor whole = forward_eval(net, x);
        for (int32_t split : {0, 2, int32_t(net.layer_count() / 2),
                              int32_t(net.layer_count() - 2)}) {
            Tensor captured;
            ForwardOptions cap;
            cap.capture_layer = split;
            cap.captured = &captured;
            forward(net, x, cap);
            ForwardOptions inj;
            inj.inject_after = split;
            inj.injected = &captured;
            Tensor resumed = forward(net, x, inj);
            CHECK(tu::max_abs_diff(resumed, whole) < 1e-6);
        }
    }
}

TEST_CASE("count examples") {
    SUBCASE("empty network counts zero") {
        NetworkSpec net;
        net.input_shape = {1, 4, 4};
        CountResult r = count_params_flops(net);
        CHECK(r.params == 0);
        CHECK(r.macs == 0);
    }
    SUBCASE("single linear 10 to 5") {
        NetworkSpec net;
        net.arch = "custom";
        net.input_shape = {10, 1, 1};
        net.num_classes = 5;
        LayerSpec fl;
        fl.kind = LayerKind::flatten;
        fl.input = -1;
        net.layers.push_back(fl);
        LayerSpec lin;
        lin.kind = LayerKind::linear;
        lin.input = 0;
        lin.in_ch = 10;
        lin.out_ch = 5;
        lin.weight = Tensor({5, 10});
        lin.bias = Tensor({5});
        net.layers.push_back(lin);
        CountResult r = count_params_flops(net);
        CHECK(r.params == 55);
        CHECK(r.macs == 50);
    }
    SUBCASE("conv MACs match the naive formula") {
        NetworkSpec net;
        net.arch = "custom";
        net.input_shape = {3, 8, 8};
        net.num_classes = 2;
        LayerSpec conv;
        conv.kind = LayerKind::conv;
        conv.input = -1;
        conv.in_ch = 3;
        conv.out_ch = 4;
        conv.k = 3;
        conv.stride = 2;
        conv.pad = 1;
        conv.weight = Tensor({4, 3, 3, 3});
        conv.bias = Tensor({4});
        net.layers.push_back(conv);
        CountResult r = count_params_flops(net);
        CHECK(r.params == 4 * 3 * 3 * 3 + 4);
        CHECK(r.macs == 4 * 4 * 4 * 3 * 3 * 3);  // out 4x4x4, 27 MACs each
    }
    SUBCASE("built archs match an independent recount") {
        for (const char* arch : {"small-cnn", "resnet-tiny"}) {
            Rng rng(1);
            NetworkSpec net = build_arch(arch, 10, rng);
            CountResult got = count_params_flops(net);
            CountResult want = recount(net);
            CHECK(got.params == want.params);
            CHECK(got.macs == want.macs);
        }
    }
}

TEST_CASE("prunable convs for small-cnn") {
    NetworkSpec net = small_cnn();
    auto pr = prunable_convs(net);
    REQUIRE(pr.size() == 3);
    for (const auto& p : pr) {
        const LayerSpec& conv = net.layers[size_t(p.conv_layer)];
        REQUIRE(conv.kind == LayerKind::conv);
        REQUIRE(p.mix_layer >= 0);
        CHECK(net.layers[size_t(p.mix_layer)].kind == LayerKind::activation);
        REQUIRE(!p.consumers.empty());
        for (int32_t c : p.consumers) {
            LayerKind k = net.layers[size_t(c)].kind;
            CHECK((k == LayerKind::conv || k == LayerKind::linear));
        }
    }
    // the last prunable conv feeds the classifier head
    CHECK(net.layers[size_t(pr.back().consumers[0])].kind == LayerKind::linear);
}

TEST_CASE("prunable convs for resnet-tiny avoid residual-facing convs") {
    NetworkSpec net = resnet_tiny();
    auto pr = prunable_convs(net);
    CHECK(!pr.empty());
    auto shapes = infer_shapes(net);
    for (const auto& p : pr) {
        // the pruned channel run must not feed a residual add directly
        for (int64_t i = 0; i < net.layer_count(); ++i) {
            const LayerSpec& l = net.layers[size_t(i)];
            if (l.kind != LayerKind::residual_add) continue;
            CHECK(l.input != p.mix_layer);
            CHECK(l.input2 != p.mix_layer);
        }
    }
}

TEST_CASE("tape forward equals eval forward") {
    NetworkSpec net = small_cnn();
    Rng rng(9);
    Tensor x = tu::rand_tensor({2, 1, 28, 28}, rng);
    Tensor ye = forward_eval(net, x);
    Tape tape;
    Var out = forward_tape(net, tape, tape.input(x), false, false);
    CHECK(tu::max_abs_diff(tape.value(out), ye) < 1e-12);
}

TEST_CASE("named params cover every trainable tensor") {
    NetworkSpec net = small_cnn();
    auto params = named_params(net);
    int64_t total = 0;
    for (auto& [name, t] : params) total += t->numel();
    CHECK(total == count_params_flops(net).params);
    // mutating through the map changes the digest
    std::string before = weights_digest(net);
    params.begin()->second->data[0] += 1.0;
    CHECK(weights_digest(net) != before);
}

TEST_CASE("training the tape updates batchnorm running stats") {
    NetworkSpec net = small_cnn();
    Rng rng(10);
    Tensor x = tu::rand_tensor({4, 1, 28, 28}, rng);
    std::string before = weights_digest(net);
    Tape tape;
    forward_tape(net, tape, tape.input(x), true, true);
    CHECK(weights_digest(net) != before);
}

TEST_CASE("checkpoint bridge round trip") {
    NetworkSpec net = resnet_tiny(3);
    std::map<std::string, Section> sections;
    network_to_sections(net, sections);
    NetworkSpec back = network_from_sections(sections);
    CHECK(back.arch == net.arch);
    CHECK(back.input_shape == net.input_shape);
    CHECK(back.num_classes == net.num_classes);
    REQUIRE(back.layer_count() == net.layer_count());
    CHECK(weights_digest(back) == weights_digest(net));
    Rng rng(11);
    Tensor x = tu::rand_tensor({2, 3, 32, 32}, rng);
    CHECK(tu::max_abs_diff(forward_eval(back, x), forward_eval(net, x)) == 0.0);
}

TEST_CASE("network_from_sections rejects missing tensors") {
    NetworkSpec net = small_cnn();
    std::map<std::string, Section> sections;
    network_to_sections(net, sections);
    sections.erase("layer0.weight");
    CHECK_THROWS_AS(network_from_sections(sections), Error);
}

TEST_CASE("weights digest is order and value sensitive") {
    NetworkSpec a = small_cnn(1);
    NetworkSpec b = small_cnn(1);
    CHECK(weights_digest(a) == weights_digest(b));
    NetworkSpec c = small_cnn(2);
    CHECK(weights_digest(a) != weights_digest(c));
}

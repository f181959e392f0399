#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "scop/common.hpp"
#include "scop/model.hpp"
#include "scop/pruning.hpp"
#include "scop/rng.hpp"
#include "scop/selection.hpp"
#include "test_util.hpp"

using namespace scop;

namespace {

NetworkSpec build(const char* arch, uint64_t seed = 1) {
    Rng rng = Rng::stream(seed, "init");
    return build_arch(arch, 10, rng);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

// Masked-equivalence oracle: instead of removing channels, zero every weight
// that reads a pruned channel downstream. Logits must match the sliced net.
NetworkSpec masked_net(const NetworkSpec& net, const PruningPlan& plan) {
    NetworkSpec masked = net;
    auto shapes = infer_shapes(net);
    auto prunable = prunable_convs(net);
    for (const PlanLayer& pl : plan.layers) {
        const PrunableConv* pc = nullptr;
        for (const auto& p : prunable)
            if (p.conv_layer == pl.layer_index) pc = &p;
        REQUIRE(pc != nullptr);
        int64_t m = net.layers[size_t(pl.layer_index)].out_ch;
        std::vector<bool> kept(size_t(m), false);
        for (int64_t k : pl.keep) kept[size_t(k)] = true;
        for (int32_t consumer : pc->consumers) {
            LayerSpec& l = masked.layers[size_t(consumer)];
            if (l.kind == LayerKind::conv) {
                for (int64_t o = 0; o < l.out_ch; ++o)
                    for (int64_t c = 0; c < l.in_ch; ++c) {
                        if (kept[size_t(c)]) continue;
                        for (int64_t u = 0; u < l.k; ++u)
                            for (int64_t v = 0; v < l.k; ++v) l.weight.at4(o, c, u, v) = 0.0;
                    }
            } else {
                // linear consumer reads channel-major flattened blocks
                const auto& pre = shapes[size_t(net.layers[size_t(consumer)].input)];
                int64_t hw = pre.size() == 3 ? pre[1] * pre[2] : 1;
                for (int64_t o = 0; o < l.out_ch; ++o)
                    for (int64_t c = 0; c < m; ++c) {
                        if (kept[size_t(c)]) continue;
                        for (int64_t i = 0; i < hw; ++i) l.weight.at2(o, c * hw + i) = 0.0;
                    }
            }
        }
    }
    return masked;
}

PruningPlan random_plan(const NetworkSpec& net, Rng& rng) {
    PruningPlan plan;
    plan.rate = 0.5;
    for (const auto& p : prunable_convs(net)) {
        int64_t m = net.layers[size_t(p.conv_layer)].out_ch;
        int64_t keep_n = 1 + rng.uniform_int(m);
        std::vector<int64_t> all(size_t(m), 0);
        for (int64_t i = 0; i < m; ++i) all[size_t(i)] = i;
        rng.shuffle(all);
        std::vector<int64_t> keep(all.begin(), all.begin() + keep_n);
        std::sort(keep.begin(), keep.end());
        plan.layers.push_back({p.conv_layer, keep});
    }
    return plan;
}

SelectionState state_for(const NetworkSpec& net) { return init_selection_state(net); }

}  // namespace

TEST_CASE("importance is zero at beta one half") {
    NetworkSpec net = build("small-cnn");
    SelectionState state = state_for(net);
    ImportanceReport rep = compute_importance(state, net);
    REQUIRE(!rep.layers.empty());
    for (const auto& li : rep.layers)
        for (double v : li.importance.data) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("importance equals beta minus beta tilde without BN") {
    // small-cnn convs carry BN, so neutralize gamma to isolate the contrast
    NetworkSpec net = build("small-cnn");
    SelectionState state = state_for(net);
    state.theta[0].data[0] = logit(0.9);
    ImportanceReport rep = compute_importance(state, net);
    const auto& li = rep.layers[0];
    if (li.bn_scaled) {
        double gamma = std::abs(
            net.layers[size_t(state.prunable[0].bn_layer)].gamma.data[0]);
        CHECK(li.importance.data[0] == doctest::Approx(gamma * 0.8).epsilon(1e-9));
    } else {
        CHECK(li.importance.data[0] == doctest::Approx(0.8).epsilon(1e-9));
    }
    CHECK(li.beta.data[0] == doctest::Approx(0.9).epsilon(1e-9));
}

TEST_CASE("BN gamma scales the contrast by absolute value") {
    NetworkSpec net = build("small-cnn");
    SelectionState state = state_for(net);
    int32_t bn = state.prunable[0].bn_layer;
    REQUIRE(bn >= 0);
    net.layers[size_t(bn)].gamma.data[0] = -2.0;
    state.theta[0].data[0] = logit(0.8);
    ImportanceReport rep = compute_importance(state, net);
    CHECK(rep.layers[0].bn_scaled);
    // |gamma| (beta - beta~) = 2 * 0.6 = 1.2
    CHECK(rep.layers[0].importance.data[0] == doctest::Approx(1.2).epsilon(1e-9));
}

TEST_CASE("make_plan keeps everything at rate zero") {
    NetworkSpec net = build("small-cnn");
    ImportanceReport rep = l1_importance(net);
    PruningPlan plan = make_plan(rep, 0.0);
    for (const auto& pl : plan.layers) {
        int64_t m = net.layers[size_t(pl.layer_index)].out_ch;
        CHECK(int64_t(pl.keep.size()) == m);
    }
}

TEST_CASE("make_plan selects the top importance indices") {
    ImportanceReport rep;
    LayerImportance li;
    li.conv_layer = 0;
    li.importance = Tensor::from_values({4}, {0.9, 0.1, 0.5, 0.4});
    li.beta = Tensor({4}, 0.5);
    rep.layers.push_back(li);
    PruningPlan plan = make_plan(rep, 0.5);
    REQUIRE(plan.layers.size() == 1);
    CHECK(plan.layers[0].keep == std::vector<int64_t>{0, 2});
}

TEST_CASE("make_plan breaks ties toward lower indices") {
    ImportanceReport rep;
    LayerImportance li;
    li.conv_layer = 0;
    li.importance = Tensor::from_values({4}, {0.5, 0.5, 0.5, 0.5});
    li.beta = Tensor({4}, 0.5);
    rep.layers.push_back(li);
    PruningPlan plan = make_plan(rep, 0.5);
    CHECK(plan.layers[0].keep == std::vector<int64_t>{0, 1});
}

TEST_CASE("make_plan kappa avoids floating point fuzz") {
    // (1 - 0.7) * 10 = 3.0000000000000004; ceil must still give 3
    ImportanceReport rep;
    LayerImportance li;
    li.conv_layer = 0;
    li.importance = Tensor({10});
    for (int i = 0; i < 10; ++i) li.importance.data[size_t(i)] = double(10 - i);
    li.beta = Tensor({10}, 0.5);
    rep.layers.push_back(li);
    PruningPlan plan = make_plan(rep, 0.7);
    CHECK(plan.layers[0].keep.size() == 3);
}

TEST_CASE("make_plan validates the rate domain") {
    ImportanceReport rep;
    LayerImportance li;
    li.conv_layer = 0;
    li.importance = Tensor({4}, 1.0);
    li.beta = Tensor({4}, 0.5);
    rep.layers.push_back(li);
    CHECK_THROWS_AS(make_plan(rep, 1.0), Error);
    CHECK_THROWS_AS(make_plan(rep, -0.1), Error);
}

TEST_CASE("plans nest as the rate increases") {
    Rng rng(40);
    ImportanceReport rep;
    LayerImportance li;
    li.conv_layer = 0;
    li.importance = tu::rand_tensor({16}, rng);
    li.beta = Tensor({16}, 0.5);
    rep.layers.push_back(li);
    std::vector<int64_t> prev;
    for (double rate : {0.0, 0.25, 0.5, 0.75}) {
        PruningPlan plan = make_plan(rep, rate);
        const auto& keep = plan.layers[0].keep;
        if (!prev.empty()) {
            // higher rate keeps a subset of what the lower rate kept
            for (int64_t k : keep) CHECK(std::count(prev.begin(), prev.end(), k) == 1);
        }
        prev = keep;
    }
}

TEST_CASE("uniform gamma rescaling leaves the keep set unchanged") {
    NetworkSpec net = build("small-cnn", 7);
    SelectionState state = state_for(net);
    Rng rng(41);
    for (auto& t : state.theta)
        for (auto& v : t.data) v = rng.uniform(-2.0, 2.0);
    PruningPlan a = make_plan(compute_importance(state, net), 0.5);
    for (auto& l : net.layers)
        if (l.kind == LayerKind::batchnorm)
            for (auto& g : l.gamma.data) g *= 3.0;
    PruningPlan b = make_plan(compute_importance(state, net), 0.5);
    REQUIRE(a.layers.size() == b.layers.size());
    for (size_t i = 0; i < a.layers.size(); ++i) CHECK(a.layers[i].keep == b.layers[i].keep);
}

TEST_CASE("l1 and random importance cover every prunable layer") {
    NetworkSpec net = build("resnet-tiny");
    auto prunable = prunable_convs(net);
    ImportanceReport l1 = l1_importance(net);
    ImportanceReport rnd = random_importance(net, 5);
    CHECK(l1.layers.size() == prunable.size());
    CHECK(rnd.layers.size() == prunable.size());
    // l1 importance is the filter's absolute weight mass
    const auto& li = l1.layers[0];
    const LayerSpec& conv = net.layers[size_t(li.conv_layer)];
    double want = 0.0;
    int64_t per = conv.weight.numel() / conv.out_ch;
    for (int64_t i = 0; i < per; ++i) want += std::abs(conv.weight.data[size_t(i)]);
    CHECK(li.importance.data[0] == doctest::Approx(want).epsilon(1e-9));
    // random importance is seed-deterministic
    ImportanceReport rnd2 = random_importance(net, 5);
    for (size_t i = 0; i < rnd.layers.size(); ++i)
        CHECK(tu::max_abs_diff(rnd.layers[i].importance, rnd2.layers[i].importance) == 0.0);
}

TEST_CASE("keep-all surgery reproduces the original network") {
    for (const char* arch : {"small-cnn", "resnet-tiny"}) {
        NetworkSpec net = build(arch, 3);
        PruningPlan plan = make_plan(l1_importance(net), 0.0);
        NetworkSpec pruned = apply_plan(net, plan);
        Rng rng(42);
        std::vector<int64_t> in_shape = {2, net.input_shape[0], net.input_shape[1],
                                         net.input_shape[2]};
        Tensor x = tu::rand_tensor(in_shape, rng);
        CHECK(tu::max_abs_diff(forward_eval(pruned, x), forward_eval(net, x)) < 1e-6);
        CHECK(count_params_flops(pruned).params == count_params_flops(net).params);
    }
}

TEST_CASE("surgery matches the masked-equivalence oracle on random plans") {
    Rng plan_rng(43);
    for (const char* arch : {"small-cnn", "resnet-tiny"}) {
        NetworkSpec net = build(arch, 4);
        Rng xrng(44);
        std::vector<int64_t> in_shape = {2, net.input_shape[0], net.input_shape[1],
                                         net.input_shape[2]};
        for (int rep = 0; rep < 10; ++rep) {
            PruningPlan plan = random_plan(net, plan_rng);
            NetworkSpec pruned = apply_plan(net, plan);
            infer_shapes(pruned);  // structural validity
            NetworkSpec masked = masked_net(net, plan);
            Tensor x = tu::rand_tensor(in_shape, xrng);
            Tensor a = forward_eval(pruned, x);
            Tensor b = forward_eval(masked, x);
            CHECK(tu::max_abs_diff(a, b) < 1e-5);
        }
    }
}

TEST_CASE("surgery updates parameter counts consistently") {
    NetworkSpec net = build("small-cnn", 5);
    Rng rng(45);
    PruningPlan plan = random_plan(net, rng);
    NetworkSpec pruned = apply_plan(net, plan);

    // independent recount of the expected parameter total
    int64_t expected = 0;
    std::map<int32_t, int64_t> kept;
    for (const auto& pl : plan.layers) kept[pl.layer_index] = int64_t(pl.keep.size());
    auto prunable = prunable_convs(net);
    std::map<int32_t, int64_t> in_of;  // consumer -> kept in-channels
    for (const auto& p : prunable)
        if (kept.count(p.conv_layer))
            for (int32_t c : p.consumers) in_of[c] = kept[p.conv_layer];
    auto shapes = infer_shapes(net);
    for (int64_t i = 0; i < net.layer_count(); ++i) {
        const LayerSpec& l = net.layers[size_t(i)];
        int64_t out = kept.count(int32_t(i)) ? kept[int32_t(i)] : l.out_ch;
        if (l.kind == LayerKind::conv) {
            int64_t in = in_of.count(int32_t(i)) ? in_of[int32_t(i)] : l.in_ch;
            expected += out * in * l.k * l.k + out;
        } else if (l.kind == LayerKind::linear) {
            int64_t in = l.in_ch;
            if (in_of.count(int32_t(i))) {
                const auto& pre = shapes[size_t(l.input)];
                int64_t hw = pre.size() == 3 ? pre[1] * pre[2] : 1;
                in = in_of[int32_t(i)] * hw;
            }
            expected += l.out_ch * in + l.out_ch;
        } else if (l.kind == LayerKind::batchnorm) {
            int64_t ch = l.gamma.numel();
            if (prunable.size()) {
                for (const auto& p : prunable)
                    if (p.bn_layer == int32_t(i) && kept.count(p.conv_layer))
                        ch = kept[p.conv_layer];
            }
            expected += 2 * ch;
        }
    }
    CHECK(count_params_flops(pruned).params == expected);
}

TEST_CASE("reduction summary percentages") {
    NetworkSpec net = build("small-cnn", 6);
    SUBCASE("identical networks drop nothing") {
        ReductionSummary r = reduction_summary(net, net);
        CHECK(r.params_drop_pct == 0.0);
        CHECK(r.flops_drop_pct == 0.0);
    }
    SUBCASE("pruning at rate 0.5 drops a large share") {
        PruningPlan plan = make_plan(l1_importance(net), 0.5);
        NetworkSpec pruned = apply_plan(net, plan);
        ReductionSummary r = reduction_summary(net, pruned);
        CHECK(r.params_before == count_params_flops(net).params);
        CHECK(r.params_after == count_params_flops(pruned).params);
        double expect_p = 100.0 * (1.0 - double(r.params_after) / double(r.params_before));
        CHECK(r.params_drop_pct == doctest::Approx(expect_p).epsilon(1e-12));
        CHECK(r.params_drop_pct > 40.0);
        CHECK(r.flops_drop_pct > 40.0);
    }
}

TEST_CASE("apply_plan validation errors") {
    NetworkSpec net = build("small-cnn", 8);
    auto prunable = prunable_convs(net);
    PruningPlan plan;
    plan.rate = 0.5;
    SUBCASE("non-prunable layer") {
        plan.layers.push_back({1, {0}});  // layer 1 is not a prunable conv root
        bool prunable_hit = false;
        for (const auto& p : prunable) prunable_hit |= p.conv_layer == 1;
        if (!prunable_hit) CHECK_THROWS_AS(apply_plan(net, plan), Error);
    }
    SUBCASE("duplicate layer entries") {
        plan.layers.push_back({prunable[0].conv_layer, {0}});
        plan.layers.push_back({prunable[0].conv_layer, {1}});
        CHECK_THROWS_AS(apply_plan(net, plan), Error);
    }
    SUBCASE("unsorted keep") {
        plan.layers.push_back({prunable[0].conv_layer, {2, 0}});
        CHECK_THROWS_WITH_AS(apply_plan(net, plan), doctest::Contains("sorted"), Error);
    }
    SUBCASE("keep index out of range") {
        plan.layers.push_back({prunable[0].conv_layer, {0, 99}});
        CHECK_THROWS_AS(apply_plan(net, plan), Error);
    }
    SUBCASE("empty keep") {
        plan.layers.push_back({prunable[0].conv_layer, {}});
        CHECK_THROWS_AS(apply_plan(net, plan), Error);
    }
}

TEST_CASE("plan JSON round trip and validation") {
    PruningPlan plan;
    plan.rate = 0.4;
    plan.layers.push_back({2, {0, 3, 5}});
    plan.layers.push_back({6, {1}});
    std::string text = plan_to_json(plan);
    PruningPlan back = plan_from_json(text);
    CHECK(back.rate == doctest::Approx(0.4));
    REQUIRE(back.layers.size() == 2);
    CHECK(back.layers[0].layer_index == 2);
    CHECK(back.layers[0].keep == std::vector<int64_t>{0, 3, 5});
    CHECK(back.layers[1].keep == std::vector<int64_t>{1});

    CHECK_THROWS_AS(plan_from_json("{"), Error);
    CHECK_THROWS_AS(plan_from_json("{}"), Error);
    CHECK_THROWS_AS(plan_from_json(R"({"rate": 0.5})"), Error);
    CHECK_THROWS_AS(plan_from_json(R"({"rate": 0.5, "layers": [{"keep": [0]}]})"), Error);
}

TEST_CASE("pruned networks still run end to end") {
    NetworkSpec net = build("resnet-tiny", 9);
    SelectionState state = state_for(net);
    Rng rng(46);
    for (auto& t : state.theta)
        for (auto& v : t.data) v = rng.normal();
    PruningPlan plan = make_plan(compute_importance(state, net), 0.5);
    NetworkSpec pruned = apply_plan(net, plan);
    Tensor x = tu::rand_tensor({2, 3, 32, 32}, rng);
    Tensor y = forward_eval(pruned, x);
    CHECK(y.shape == std::vector<int64_t>{2, 10});
    CHECK(y.all_finite());
    ReductionSummary r = reduction_summary(net, pruned);
    CHECK(r.params_after < r.params_before);
}

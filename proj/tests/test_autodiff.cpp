#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "scop/autodiff.hpp"
#include "scop/common.hpp"
#include "scop/rng.hpp"
#include "scop/tensor.hpp"
#include "test_util.hpp"

using namespace scop;

namespace {

// Central finite differences against reverse mode. The graph builder maps
// named parameter tensors to a scalar loss; it is re-run from scratch for
// every probe so the tape sees fresh values each time.
void fd_check(const std::map<std::string, Tensor>& params,
              const std::function<double(Tape&, const std::map<std::string, Tensor>&)>& build,
              double eps = 1e-3, double tol = 1e-3) {
    // The builder's last node is the scalar loss.
    Tape tg;
    build(tg, params);
    std::map<std::string, Tensor> grads = tg.backward(Var{int32_t(tg.size() - 1)});
    for (const auto& [name, tensor] : params) {
        REQUIRE(grads.count(name) == 1);
        const Tensor& g = grads.at(name);
        REQUIRE(g.shape == tensor.shape);
        for (int64_t i = 0; i < tensor.numel(); ++i) {
            std::map<std::string, Tensor> plus = params, minus = params;
            plus[name].data[size_t(i)] += eps;
            minus[name].data[size_t(i)] -= eps;
            Tape tp, tm;
            double fp = build(tp, plus);
            double fm = build(tm, minus);
            double fd = (fp - fm) / (2.0 * eps);
            double err = std::abs(g.data[size_t(i)] - fd) /
                         std::max({1.0, std::abs(fd), std::abs(g.data[size_t(i)])});
            if (err >= tol) {
                CAPTURE(name);
                CAPTURE(i);
                CAPTURE(fd);
                CAPTURE(g.data[size_t(i)]);
            }
            REQUIRE(err < tol);
        }
    }
}

}  // namespace

TEST_CASE("gradient of sum is ones") {
    Tape t;
    Var x = t.param("x", Tensor::from_values({3}, {1.0, -2.0, 5.0}));
    Var loss = t.sum(x);
    auto grads = t.backward(loss);
    for (double g : grads["x"].data) CHECK(g == 1.0);
}

TEST_CASE("gradient of half sum of squares is x") {
    Tensor x0 = Tensor::from_values({4}, {1.0, -2.0, 0.5, 3.0});
    Tape t;
    Var x = t.param("x", x0);
    Var loss = t.mul_scalar(t.sum(t.square(x)), 0.5);
    auto grads = t.backward(loss);
    CHECK(tu::max_abs_diff(grads["x"], x0) < 1e-12);
}

TEST_CASE("relu subgradient at negative and positive inputs") {
    Tape t;
    Var x = t.param("x", Tensor::from_values({2}, {-1.0, 2.0}));
    Var loss = t.sum(t.relu(x));
    auto grads = t.backward(loss);
    CHECK(grads["x"].data == std::vector<double>{0.0, 1.0});
}

TEST_CASE("sigmoid gradient hand value") {
    Tape t;
    Var x = t.param("x", Tensor::from_values({1}, {0.0}));
    Var loss = t.sum(t.sigmoid(x));
    auto grads = t.backward(loss);
    CHECK(grads["x"].data[0] == doctest::Approx(0.25));
}

TEST_CASE("sub_from_const flips gradient sign") {
    Tape t;
    Var x = t.param("x", Tensor::from_values({2}, {0.3, 0.9}));
    Var loss = t.sum(t.sub_from_const(1.0, x));
    CHECK(t.value(loss).data[0] == doctest::Approx(1.0 - 0.3 + 1.0 - 0.9));
    auto grads = t.backward(loss);
    CHECK(grads["x"].data == std::vector<double>{-1.0, -1.0});
}

TEST_CASE("backward requires a scalar loss") {
    Tape t;
    Var x = t.param("x", Tensor({3}, 1.0));
    Var y = t.relu(x);
    CHECK_THROWS_WITH_AS(t.backward(y), doctest::Contains("scalar"), Error);
}

TEST_CASE("repeated backward replays identically") {
    Rng rng(6);
    Tape t;
    Var x = t.param("x", tu::rand_tensor({2, 3, 4, 4}, rng));
    Var w = t.param("w", tu::rand_tensor({2, 3, 3, 3}, rng));
    Var b = t.param("b", tu::rand_tensor({2}, rng));
    Var loss = t.sum(t.square(t.relu(t.conv2d(x, w, b, 1, 1))));
    auto g1 = t.backward(loss);
    auto g2 = t.backward(loss);
    for (const auto& [name, g] : g1) CHECK(tu::max_abs_diff(g, g2[name]) == 0.0);
}

TEST_CASE("unreached parameters get zero gradients") {
    Tape t;
    Var x = t.param("x", Tensor({2}, 1.0));
    Var y = t.param("unused", Tensor({3}, 2.0));
    (void)y;
    auto grads = t.backward(t.sum(x));
    REQUIRE(grads.count("unused") == 1);
    for (double g : grads["unused"].data) CHECK(g == 0.0);
}

TEST_CASE("inputs do not appear in gradient map") {
    Tape t;
    Var x = t.input(Tensor({2}, 1.0));
    Var s = t.param("s", Tensor({2}, 3.0));
    auto grads = t.backward(t.sum(t.add(x, s)));
    CHECK(grads.size() == 1);
    CHECK(grads.count("s") == 1);
}

TEST_CASE("duplicate parameter names rejected") {
    Tape t;
    t.param("p", Tensor({1}, 1.0));
    CHECK_THROWS_AS(t.param("p", Tensor({1}, 2.0)), Error);
}

TEST_CASE("finite differences on composite graphs") {
    Rng rng(100);

    SUBCASE("conv relu sum") {
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({2, 2, 5, 5}, rng)},
            {"w", tu::rand_tensor({3, 2, 3, 3}, rng)},
            {"b", tu::rand_tensor({3}, rng)}};
        fd_check(params, [](Tape& t, const std::map<std::string, Tensor>& p) {
            Var x = t.param("x", p.at("x"));
            Var w = t.param("w", p.at("w"));
            Var b = t.param("b", p.at("b"));
            Var loss = t.sum(t.square(t.relu(t.conv2d(x, w, b, 1, 1))));
            return t.value(loss).data[0];
        });
    }

    SUBCASE("strided conv maxpool linear xent") {
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({2, 1, 8, 8}, rng)},
            {"w", tu::rand_tensor({2, 1, 3, 3}, rng)},
            {"b", tu::rand_tensor({2}, rng)},
            {"lw", tu::rand_tensor({3, 2 * 2 * 2}, rng)},
            {"lb", tu::rand_tensor({3}, rng)}};
        fd_check(params, [](Tape& t, const std::map<std::string, Tensor>& p) {
            Var x = t.param("x", p.at("x"));
            Var w = t.param("w", p.at("w"));
            Var b = t.param("b", p.at("b"));
            Var h = t.maxpool(t.relu(t.conv2d(x, w, b, 2, 1)), 2, 2);
            Var logits = t.linear(t.flatten(h), t.param("lw", p.at("lw")),
                                  t.param("lb", p.at("lb")));
            Var loss = t.softmax_xent(logits, {0, 2});
            return t.value(loss).data[0];
        });
    }

    SUBCASE("batchnorm train mode") {
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({4, 2, 3, 3}, rng)},
            {"g", tu::rand_tensor({2}, rng, 0.5, 1.5)},
            {"be", tu::rand_tensor({2}, rng)}};
        fd_check(params, [](Tape& t, const std::map<std::string, Tensor>& p) {
            Tensor rm({2}), rv({2}, 1.0);
            Var x = t.param("x", p.at("x"));
            Var y = t.batchnorm(x, t.param("g", p.at("g")), t.param("be", p.at("be")),
                                rm, rv, true, 1e-5, 0.1);
            Var loss = t.sum(t.square(y));
            return t.value(loss).data[0];
        });
    }

    SUBCASE("batchnorm eval mode") {
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({2, 2, 3, 3}, rng)},
            {"g", tu::rand_tensor({2}, rng, 0.5, 1.5)},
            {"be", tu::rand_tensor({2}, rng)}};
        fd_check(params, [](Tape& t, const std::map<std::string, Tensor>& p) {
            Tensor rm = Tensor::from_values({2}, {0.2, -0.1});
            Tensor rv = Tensor::from_values({2}, {1.5, 0.7});
            Var x = t.param("x", p.at("x"));
            Var y = t.batchnorm(x, t.param("g", p.at("g")), t.param("be", p.at("be")),
                                rm, rv, false, 1e-5, 0.1);
            Var loss = t.sum(t.square(y));
            return t.value(loss).data[0];
        });
    }

    SUBCASE("channel scale and residual add") {
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({2, 3, 4, 4}, rng)},
            {"s", tu::rand_tensor({3}, rng, 0.1, 0.9)}};
        fd_check(params, [](Tape& t, const std::map<std::string, Tensor>& p) {
            Var x = t.param("x", p.at("x"));
            Var s = t.param("s", p.at("s"));
            Var mixed = t.add(t.channel_scale(x, s),
                              t.channel_scale(x, t.sub_from_const(1.0, s)));
            Var loss = t.sum(t.square(mixed));
            return t.value(loss).data[0];
        });
    }

    SUBCASE("sigmoid gate over conv features") {
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({2, 2, 4, 4}, rng)},
            {"theta", tu::rand_tensor({2}, rng)}};
        fd_check(params, [](Tape& t, const std::map<std::string, Tensor>& p) {
            Var x = t.param("x", p.at("x"));
            Var beta = t.sigmoid(t.param("theta", p.at("theta")));
            Var loss = t.sum(t.square(t.channel_scale(x, beta)));
            return t.value(loss).data[0];
        });
    }

    SUBCASE("global average pool head") {
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({2, 3, 4, 4}, rng)},
            {"lw", tu::rand_tensor({2, 3}, rng)},
            {"lb", tu::rand_tensor({2}, rng)}};
        fd_check(params, [](Tape& t, const std::map<std::string, Tensor>& p) {
            Var x = t.param("x", p.at("x"));
            Var h = t.flatten(t.global_avgpool(x));
            Var logits = t.linear(h, t.param("lw", p.at("lw")), t.param("lb", p.at("lb")));
            Var loss = t.softmax_xent(logits, {1, 0});
            return t.value(loss).data[0];
        });
    }
}

TEST_CASE("finite differences across many random graph shapes") {
    // small randomized conv stacks; shapes vary with the case index
    for (int case_idx = 0; case_idx < 8; ++case_idx) {
        Rng rng(200 + uint64_t(case_idx));
        int64_t cin = 1 + case_idx % 3;
        int64_t cout = 2 + case_idx % 2;
        int64_t hw = 5 + case_idx % 3;
        int64_t stride = 1 + case_idx % 2;
        std::map<std::string, Tensor> params{
            {"x", tu::rand_tensor({2, cin, hw, hw}, rng)},
            {"w", tu::rand_tensor({cout, cin, 3, 3}, rng)},
            {"b", tu::rand_tensor({cout}, rng)},
            {"s", tu::rand_tensor({cout}, rng, 0.2, 0.8)}};
        fd_check(params, [stride](Tape& t, const std::map<std::string, Tensor>& p) {
            Var x = t.param("x", p.at("x"));
            Var w = t.param("w", p.at("w"));
            Var b = t.param("b", p.at("b"));
            Var s = t.param("s", p.at("s"));
            Var y = t.channel_scale(t.relu(t.conv2d(x, w, b, stride, 1)), s);
            Var loss = t.mul_scalar(t.sum(t.square(y)), 0.25);
            return t.value(loss).data[0];
        });
    }
}

TEST_CASE("grad_of exposes intermediate gradients") {
    Tape t;
    Var x = t.param("x", Tensor::from_values({2}, {1.0, 2.0}));
    Var y = t.square(x);
    Var loss = t.sum(y);
    t.backward(loss);
    const Tensor* gy = t.grad_of(y);
    REQUIRE(gy != nullptr);
    CHECK(gy->data == std::vector<double>{1.0, 1.0});
    const Tensor* gx = t.grad_of(x);
    REQUIRE(gx != nullptr);
    CHECK(gx->data == std::vector<double>{2.0, 4.0});
}

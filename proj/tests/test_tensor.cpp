#include <doctest.h>

#include <flowguide/tensor.hpp>

#include "test_helpers.hpp"

#include <functional>
#include <vector>

using namespace flowguide;
using fgtest::close;
using fgtest::max_rel_err;
using fgtest::random_tensor;
using fgtest::to_doubles;

namespace {

using D      = Tensor<double>;
using LossFn = std::function<double(const std::vector<D>&)>;

// evaluates f on given params and returns the scalar loss value
double eval_loss(const std::function<D(const std::vector<D>&)>& build, const std::vector<D>& params) {
    return build(params).item();
}

// full check: reverse-mode grads vs finite differences, returns max rel err
double check_op(const std::function<D(const std::vector<D>&)>& build, const std::vector<D>& inputs,
                double h = 1e-5) {
    std::vector<D> tracked;
    for (const auto& p : inputs) tracked.push_back(D::from_data(p.shape(), p.values(), true));
    auto loss = build(tracked);
    backward(loss);

    LossFn value_fn = [&](const std::vector<D>& ps) { return eval_loss(build, ps); };
    auto fd         = finite_diff_gradient<double>(value_fn, inputs, h);

    double worst = 0.0;
    for (size_t i = 0; i < tracked.size(); ++i)
        worst = std::max(worst, max_rel_err(to_doubles(tracked[i].grad().values()), fd[i]));
    return worst;
}

}  // namespace

TEST_SUITE("tensor_core") {

TEST_CASE("stop_gradient blocks adjoints but keeps values") {
    // product with one branch blocked: d(sg(x)*x)/dx = x
    auto x    = D::from_data({1}, {2.0}, true);
    auto loss = sum(mul(stop_gradient(x), x));
    CHECK(loss.item() == 4.0);
    backward(loss);
    CHECK(x.grad().values()[0] == 2.0);

    // fully blocked
    auto y     = D::from_data({1}, {3.0}, true);
    auto loss2 = sum(mul(stop_gradient(y), stop_gradient(y)));
    backward(loss2);
    CHECK(y.grad().values()[0] == 0.0);

    // sum of a blocked vector has zero gradient
    Pcg32 rng(11, 0);
    auto z     = fgtest::random_tensor<double>({4}, rng, true);
    auto loss3 = sum(stop_gradient(z));
    backward(loss3);
    for (double g : z.grad().values()) CHECK(g == 0.0);
}

TEST_CASE("stop_gradient is value-identical (bitwise) for random tensors") {
    Pcg32 rng(5, 0);
    for (int rep = 0; rep < 20; ++rep) {
        auto x  = fgtest::random_tensor<double>({3, 4}, rng, true, 10.0);
        auto sg = stop_gradient(x);
        REQUIRE(sg.numel() == x.numel());
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(std::memcmp(&sg.values()[static_cast<size_t>(i)], &x.values()[static_cast<size_t>(i)],
                              sizeof(double)) == 0);
        CHECK_FALSE(sg.requires_grad());
    }
}

TEST_CASE("backward on simple closed forms") {
    auto x    = D::from_data({1}, {3.0}, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    CHECK(x.grad().values()[0] == doctest::Approx(6.0));

    auto a     = D::from_data({1}, {2.0}, true);
    auto b     = D::from_data({1}, {5.0}, true);
    auto loss2 = sum(mul(a, b));
    backward(loss2);
    CHECK(a.grad().values()[0] == doctest::Approx(5.0));
    CHECK(b.grad().values()[0] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar loss; disconnected leaf gets zero grad") {
    auto x = D::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);

    auto used   = D::from_data({1}, {1.0}, true);
    auto unused = D::from_data({3}, {1.0, 2.0, 3.0}, true);
    auto loss   = sum(mul(used, used));
    backward(loss);
    for (double g : unused.grad().values()) CHECK(g == 0.0);
}

TEST_CASE("finite_diff_gradient basics") {
    auto x  = D::from_data({1}, {3.0}, false);
    auto fd = finite_diff_gradient<double>(
        [](const std::vector<D>& ps) {
            double v = ps[0].values()[0];
            return v * v;
        },
        {x}, 1e-5);
    CHECK(std::abs(fd[0][0] - 6.0) < 1e-8);

    auto c   = D::from_data({3}, {1.0, 2.0, 3.0}, false);
    auto fd2 = finite_diff_gradient<double>([](const std::vector<D>&) { return 42.0; }, {c}, 1e-5);
    for (double g : fd2[0]) CHECK(g == 0.0);

    CHECK_THROWS_AS(finite_diff_gradient<double>([](const std::vector<D>&) { return 0.0; }, {c}, 0.0),
                    TensorError);
}

TEST_CASE("two-layer tanh network gradient matches finite differences") {
    Pcg32 rng(42, 0);
    auto x  = fgtest::random_tensor<double>({4, 3}, rng);
    auto w1 = fgtest::random_tensor<double>({3, 5}, rng, false, 0.7);
    auto b1 = fgtest::random_tensor<double>({5}, rng, false, 0.2);
    auto w2 = fgtest::random_tensor<double>({5, 2}, rng, false, 0.7);
    auto b2 = fgtest::random_tensor<double>({2}, rng, false, 0.2);
    auto tgt = fgtest::random_tensor<double>({4, 2}, rng);

    auto build = [&](const std::vector<D>& p) {
        auto h = tanh_elem(add(matmul(x, p[0]), p[1]));
        auto y = add(matmul(h, p[2]), p[3]);
        return mse(y, tgt);
    };
    CHECK(check_op(build, {w1, b1, w2, b2}, 1e-4) < 1e-4);
}

TEST_CASE("every primitive op matches the finite-difference oracle") {
    Pcg32 rng(7, 0);

    // weights fixed per case so reductions have non-uniform adjoints
    auto weighted = [&rng](const D& t) {
        Pcg32 local(99, 1);
        auto w = fgtest::random_tensor<double>(t.shape(), local);
        return sum(mul(t, w));
    };

    struct Case {
        const char* name;
        std::function<D(const std::vector<D>&)> build;
        std::vector<D> inputs;
    };
    std::vector<Case> cases;

    auto a23  = fgtest::random_tensor<double>({2, 3}, rng);
    auto b23  = fgtest::random_tensor<double>({2, 3}, rng);
    auto bias = fgtest::random_tensor<double>({3}, rng);
    auto pos  = [&](Shape s) {
        auto t = fgtest::random_tensor<double>(s, rng, false, 0.5);
        std::vector<double> v = t.values();
        for (auto& x : v) x = std::abs(x) + 0.5;
        return D::from_data(s, v);
    };

    cases.push_back({"add", [=](const std::vector<D>& p) { return weighted(add(p[0], p[1])); }, {a23, b23}});
    cases.push_back({"sub", [=](const std::vector<D>& p) { return weighted(sub(p[0], p[1])); }, {a23, b23}});
    cases.push_back({"mul", [=](const std::vector<D>& p) { return weighted(mul(p[0], p[1])); }, {a23, b23}});
    cases.push_back({"div", [=](const std::vector<D>& p) { return weighted(div(p[0], p[1])); }, {a23, pos({2, 3})}});
    cases.push_back({"add_bcast", [=](const std::vector<D>& p) { return weighted(add(p[0], p[1])); }, {a23, bias}});
    cases.push_back({"mul_bcast", [=](const std::vector<D>& p) { return weighted(mul(p[0], p[1])); }, {a23, bias}});
    cases.push_back({"neg", [=](const std::vector<D>& p) { return weighted(neg(p[0])); }, {a23}});
    cases.push_back({"exp", [=](const std::vector<D>& p) { return weighted(exp_elem(p[0])); }, {a23}});
    cases.push_back({"tanh", [=](const std::vector<D>& p) { return weighted(tanh_elem(p[0])); }, {a23}});
    cases.push_back({"gelu", [=](const std::vector<D>& p) { return weighted(gelu_tanh(p[0])); }, {a23}});
    cases.push_back({"pow_half", [=](const std::vector<D>& p) { return weighted(pow_elem(p[0], 0.5)); }, {pos({2, 3})}});
    cases.push_back({"pow_sq", [=](const std::vector<D>& p) { return weighted(pow_elem(p[0], 2.0)); }, {a23}});
    cases.push_back({"sum", [=](const std::vector<D>& p) { return sum(p[0]); }, {a23}});
    cases.push_back({"mean", [=](const std::vector<D>& p) { return mean(p[0]); }, {a23}});
    cases.push_back({"sum_axis0", [=](const std::vector<D>& p) { return weighted(sum(p[0], 0)); }, {a23}});
    cases.push_back({"sum_axis1_keep", [=](const std::vector<D>& p) { return weighted(sum(p[0], 1, true)); }, {a23}});
    cases.push_back({"mean_axis1", [=](const std::vector<D>& p) { return weighted(mean(p[0], 1)); }, {a23}});
    cases.push_back({"softmax", [=](const std::vector<D>& p) { return weighted(softmax(p[0])); }, {a23}});
    cases.push_back({"layer_norm", [=](const std::vector<D>& p) { return weighted(layer_norm(p[0], 1e-5)); }, {a23}});

    auto gamma = fgtest::random_tensor<double>({3}, rng, false, 0.5);
    auto beta  = fgtest::random_tensor<double>({3}, rng, false, 0.5);
    cases.push_back({"layer_norm_affine",
                     [=](const std::vector<D>& p) { return weighted(layer_norm(p[0], p[1], p[2], 1e-5)); },
                     {a23, gamma, beta}});

    auto m34 = fgtest::random_tensor<double>({3, 4}, rng);
    auto m43 = fgtest::random_tensor<double>({4, 3}, rng);
    auto m24 = fgtest::random_tensor<double>({2, 4}, rng);
    cases.push_back({"matmul", [=](const std::vector<D>& p) { return weighted(matmul(p[0], p[1])); }, {a23, m34}});
    cases.push_back({"matmul_ta",
                     [=](const std::vector<D>& p) { return weighted(matmul(p[0], p[1], true, false)); },
                     {m43, m43 /* (4,3)^T (4,3) -> (3,3) */}});
    cases.push_back({"matmul_tb",
                     [=](const std::vector<D>& p) { return weighted(matmul(p[0], p[1], false, true)); },
                     {a23, m43 /* (2,3) x (4,3)^T -> (2,4) */}});
    cases.push_back({"matmul_tatb",
                     [=](const std::vector<D>& p) { return weighted(matmul(p[0], p[1], true, true)); },
                     {m43, m24 /* (4,3)^T=(3,4) x (2,4)^T=(4,2) -> (3,2) */}});
    cases.push_back({"concat",
                     [=](const std::vector<D>& p) { return weighted(concat<double>({p[0], p[1]}, 1)); },
                     {a23, b23}});
    cases.push_back({"slice", [=](const std::vector<D>& p) { return weighted(slice(p[0], 1, 1, 2)); }, {a23}});
    cases.push_back({"broadcast_to",
                     [=](const std::vector<D>& p) { return weighted(broadcast_to(p[0], {4, 2, 3})); },
                     {a23}});
    cases.push_back({"reshape", [=](const std::vector<D>& p) { return weighted(reshape(p[0], {3, 2})); }, {a23}});
    cases.push_back({"mse", [=](const std::vector<D>& p) { return mse(p[0], p[1]); }, {a23, b23}});

    for (auto& c : cases) {
        INFO("op: " << c.name);
        CHECK(check_op(c.build, c.inputs) < 1e-4);
    }
}

TEST_CASE("sg composition equals constant substitution") {
    Pcg32 rng(13, 0);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = fgtest::random_tensor<double>({5}, rng, true);
        auto w = fgtest::random_tensor<double>({5}, rng);

        // loss = mean( (x + sg(exp(x)))^2 * w )
        auto branch = exp_elem(x);
        auto e      = add(x, stop_gradient(branch));
        auto loss   = mean(mul(mul(e, e), w));
        backward(loss);
        auto got = x.grad().values();

        // same expression with the blocked branch frozen as a constant
        auto x2    = D::from_data({5}, x.values(), true);
        auto c     = D::from_data({5}, branch.values());
        auto e2    = add(x2, c);
        auto loss2 = mean(mul(mul(e2, e2), w));
        backward(loss2);
        auto want = x2.grad().values();

        for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
    }
}

TEST_CASE("reverse sweep is deterministic") {
    auto run = [] {
        Pcg32 rng(21, 0);
        auto x  = fgtest::random_tensor<double>({4, 4}, rng, true);
        auto w  = fgtest::random_tensor<double>({4, 4}, rng, true);
        auto h  = tanh_elem(matmul(x, w));
        auto sm = softmax(layer_norm(h, 1e-5));
        auto l  = mean(mul(sm, sm));
        backward(l);
        return std::make_pair(x.grad().values(), w.grad().values());
    };
    auto [gx1, gw1] = run();
    auto [gx2, gw2] = run();
    CHECK(gx1 == gx2);
    CHECK(gw1 == gw2);
}

TEST_CASE("non-finite results raise NumericsError") {
    auto a = D::from_data({2}, {1.0, 1.0});
    auto z = D::from_data({2}, {0.0, 1.0});
    CHECK_THROWS_AS(div(a, z), NumericsError);
    auto big = D::from_data({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), NumericsError);
    CHECK_THROWS_AS(exp_elem(D::from_data({1}, {1e4})), NumericsError);
}

TEST_CASE("shape errors are reported") {
    auto a = D::from_data({2, 3}, std::vector<double>(6, 1.0));
    auto b = D::from_data({3, 2}, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(mse(a, b), ShapeError);
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
    CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
}

TEST_CASE("slice/concat invert each other on random tensors") {
    Pcg32 rng(31, 0);
    for (int rep = 0; rep < 10; ++rep) {
        auto x     = fgtest::random_tensor<double>({3, 6}, rng);
        auto left  = slice(x, 1, 0, 2);
        auto mid   = slice(x, 1, 2, 3);
        auto right = slice(x, 1, 5, 1);
        auto back  = concat<double>({left, mid, right}, 1);
        CHECK(back.values() == x.values());
    }
}

}  // TEST_SUITE

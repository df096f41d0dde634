#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "masf/autodiff.hpp"
#include "oracles.hpp"

using namespace masf;

namespace {

Expr s(double v) { return leaf(Tensor::scalar(v)); }

}  // namespace

TEST(Evaluate, LeafSquared) { EXPECT_DOUBLE_EQ(square(s(3.0)).item(), 9.0); }

TEST(Evaluate, ReluOfNegative) { EXPECT_EQ(relu(s(-2.0)).item(), 0.0); }

TEST(Evaluate, LogSumExpOfZeros) {
    EXPECT_NEAR(log_sum_exp(leaf(Tensor::vector({0.0, 0.0}))).item(), std::log(2.0), 1e-12);
    EXPECT_NEAR(log_sum_exp(leaf(Tensor::vector({0.0, 0.0}))).item(), 0.693147, 1e-6);
}

TEST(Evaluate, LogSumExpIsStableForLargeInputs) {
    const double v = log_sum_exp(leaf(Tensor::vector({1000.0, 1000.0}))).item();
    EXPECT_NEAR(v, 1000.0 + std::log(2.0), 1e-9);
}

TEST(Evaluate, ShapeMismatchFailsAtConstruction) {
    const Expr a = leaf(Tensor(Shape{2, 3}));
    const Expr b = leaf(Tensor(Shape{2, 3}));
    EXPECT_THROW(matmul(a, b), ShapeError);
    EXPECT_THROW(add(leaf(Tensor(Shape{2, 3})), leaf(Tensor(Shape{3, 2}))), ShapeError);
}

TEST(Evaluate, GuardedLogRejectsNegativeInput) {
    EXPECT_THROW(log(s(-1.0)), DomainError);
    EXPECT_TRUE(std::isfinite(log(s(0.0)).item()));
}

TEST(Evaluate, DivisionIsEpsilonGuarded) {
    EXPECT_TRUE(std::isfinite(div(s(1.0), s(0.0)).item()));
    EXPECT_NEAR(div(s(3.0), s(2.0)).item(), 1.5, 1e-12);
}

TEST(Evaluate, BroadcastAddsRowVector) {
    const Expr m = leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    const Expr v = leaf(Tensor::vector({10, 20}));
    EXPECT_EQ(add(m, v).value().data, (std::vector<double>{11, 22, 13, 24}));
}

TEST(Evaluate, ReevaluationReproducesStoredValue) {
    std::mt19937_64 rng(1);
    const Expr x = leaf(oracle::random_tensor({4, 3}, rng));
    const Expr w = leaf(oracle::random_tensor({3, 2}, rng));
    const Expr y = log_softmax(relu(matmul(x, w)));
    EXPECT_EQ(reevaluate(y), y.value());
    EXPECT_EQ(reevaluate(y), reevaluate(y));
}

TEST(Grad, SquareAtThree) {
    const Expr x = s(3.0);
    const Expr ps[] = {x};
    EXPECT_DOUBLE_EQ(grad(square(x), ps).at(x).item(), 6.0);
}

TEST(Grad, SecondDerivativeOfCube) {
    const Expr x = s(2.0);
    const Expr ps[] = {x};
    const Expr cube = mul(square(x), x);
    const Expr first = grad(cube, ps).at(x);
    EXPECT_NEAR(first.item(), 12.0, 1e-12);
    EXPECT_NEAR(grad(first, ps).at(x).item(), 12.0, 1e-12);
}

TEST(Grad, ThroughOneSgdStep) {
    const Expr w = s(1.0);
    const Expr ps[] = {w};
    const Expr g = grad(square(w), ps).at(w);
    const Expr w_prime = sub(w, scale(g, 0.1));
    const Expr f = square(w_prime);
    EXPECT_NEAR(grad(f, ps).at(w).item(), 1.28, 1e-12);
    const auto fd = oracle::rebuild_fd_error(
        [](const std::vector<Expr>& p) {
            const Expr gg = grad(square(p[0]), std::span<const Expr>(p)).at(p[0]);
            return square(sub(p[0], scale(gg, 0.1)));
        },
        {Tensor::scalar(1.0)});
    EXPECT_LT(fd, 1e-8);
}

TEST(Grad, UnreachableParamGetsZero) {
    const Expr x = s(2.0), y = s(5.0);
    const Expr ps[] = {x, y};
    const GradMap g = grad(square(x), ps);
    EXPECT_EQ(g.at(y).item(), 0.0);
}

TEST(Grad, NonScalarRootIsRejected) {
    const Expr x = leaf(Tensor::vector({1, 2}));
    const Expr ps[] = {x};
    EXPECT_THROW(grad(square(x), ps), ShapeError);
}

TEST(Grad, EveryOpMatchesCentralDifferences) {
    std::mt19937_64 rng(7);
    const Tensor a = oracle::random_tensor({3, 4}, rng);
    const Tensor b = oracle::random_tensor({4, 2}, rng);
    Tensor pos = oracle::random_tensor({3, 4}, rng);
    for (auto& v : pos.data) v = std::abs(v) + 0.5;

    using B = oracle::Builder;
    const std::vector<std::pair<const char*, B>> cases = {
        {"add_sub_mul", [](auto& p) { return sum(mul(sub(add(p[0], p[1]), p[0]), p[1])); }},
        {"div", [](auto& p) { return sum(div(p[0], p[1])); }},
        {"matmul", [](auto& p) { return sum(square(matmul(p[0], p[1]))); }},
        {"transpose", [](auto& p) { return sum(mul(transpose(p[0]), p[1])); }},
        {"relu", [](auto& p) { return sum(square(relu(p[0]))); }},
        {"exp_log", [](auto& p) { return sum(log(exp(p[0]))); }},
        {"sqrt", [](auto& p) { return sum(sqrt(p[0])); }},
        {"mean_axis", [](auto& p) { return add(sum(square(mean(p[0], 0))), sum(square(mean(p[0], 1)))); }},
        {"max_last", [](auto& p) { return sum(max_last(p[0])); }},
        {"log_softmax", [](auto& p) { return sum(mul(log_softmax(p[0]), p[1])); }},
        {"softmax", [](auto& p) { return sum(square(softmax(p[0]))); }},
        {"gather_scatter", [](auto& p) {
             return sum(square(scatter_rows(gather_rows(p[0], {2, 0, 2}), {1, 0, 2}, 4)));
         }},
        {"pick", [](auto& p) { return sum(square(pick(p[0], {1, 3, 0}))); }},
    };
    for (const auto& [name, build] : cases) {
        std::vector<Tensor> vals;
        const std::string n = name;
        if (n == "matmul") vals = {a, b};
        else if (n == "transpose") vals = {a, oracle::random_tensor({4, 3}, rng)};
        else if (n == "div" || n == "add_sub_mul" || n == "log_softmax") vals = {a, pos};
        else if (n == "sqrt") vals = {pos};
        else vals = {a};
        EXPECT_LT(oracle::rebuild_fd_error(build, vals), 1e-5) << name;
        std::vector<Expr> leaves;
        for (const auto& v : vals) leaves.push_back(leaf(v));
        EXPECT_LT(finite_diff_check(build(leaves), leaves), 1e-5) << name;
    }
}

TEST(Grad, SecondOrderMatchesDifferencesOfFirstOrder) {
    std::mt19937_64 rng(3);
    const Tensor w = oracle::random_tensor({3, 2}, rng);
    const Tensor x = oracle::random_tensor({4, 3}, rng);
    auto inner = [x](const std::vector<Expr>& p) {
        return mean(square(log_softmax(matmul(leaf(x), p[0]))));
    };
    // Differentiate the sum of first-order gradient entries.
    const double err = oracle::rebuild_fd_error(
        [&](const std::vector<Expr>& p) {
            const Expr g = grad(inner(p), std::span<const Expr>(p)).at(p[0]);
            return sum(square(g));
        },
        {w});
    EXPECT_LT(err, 1e-4);
}

TEST(Grad, IsLinear) {
    std::mt19937_64 rng(11);
    const Expr x = leaf(oracle::random_tensor({5}, rng));
    const Expr ps[] = {x};
    const Expr f = sum(square(x));
    const Expr g = sum(exp(x));
    const Tensor combined = grad(add(scale(f, 2.5), scale(g, -1.5)), ps).at(x).value();
    const Tensor gf = grad(f, ps).at(x).value();
    const Tensor gg = grad(g, ps).at(x).value();
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(combined[i], 2.5 * gf[i] - 1.5 * gg[i], 1e-10);
}

TEST(Grad, FiniteDiffCheckOnPolynomial) {
    const Expr x = s(3.0);
    const Expr ps[] = {x};
    EXPECT_LT(finite_diff_check(square(x), ps, 1e-5), 1e-7);
}

TEST(Grad, FiniteDiffCheckOnSoftmaxMlp) {
    std::mt19937_64 rng(5);
    const std::vector<Tensor> vals = {oracle::random_tensor({4, 6}, rng), oracle::random_tensor({6, 3}, rng)};
    const Tensor x = oracle::random_tensor({1, 4}, rng);
    std::vector<Expr> p = {leaf(vals[0]), leaf(vals[1])};
    const Expr logits = matmul(relu(matmul(leaf(x), p[0])), p[1]);
    const Expr ce = neg(sum(pick(log_softmax(logits), {2})));
    EXPECT_LT(finite_diff_check(ce, p), 1e-5);
}

TEST(Clip, ScalesDownLargeGradients) {
    const Expr p = leaf(Tensor::vector({0, 0}));
    GradMap g;
    g.set(p, leaf(Tensor::vector({3.0, 4.0})));
    const GradMap c = clip_by_norm(g, 2.0);
    EXPECT_NEAR(c.at(p).value()[0], 1.2, 1e-12);
    EXPECT_NEAR(c.at(p).value()[1], 1.6, 1e-12);
    EXPECT_LE(c.global_norm(), 2.0 + 1e-12);
}

TEST(Clip, LeavesSmallGradientsUnchanged) {
    const Expr p = leaf(Tensor::vector({0, 0}));
    GradMap g;
    g.set(p, leaf(Tensor::vector({0.1, 0.1})));
    EXPECT_EQ(clip_by_norm(g, 2.0).at(p).value(), Tensor::vector({0.1, 0.1}));
}

TEST(Clip, ZeroGradientsPassThrough) {
    const Expr p = leaf(Tensor::vector({0, 0, 0}));
    GradMap g;
    g.set(p, zeros({3}));
    EXPECT_EQ(clip_by_norm(g, 2.0).at(p).value(), Tensor(Shape{3}));
}

TEST(Clip, TreatsAllEntriesAsOneVectorAndIsIdempotent) {
    const Expr p = leaf(Tensor::vector({0}));
    const Expr q = leaf(Tensor::vector({0}));
    GradMap g;
    g.set(p, leaf(Tensor::vector({6.0})));
    g.set(q, leaf(Tensor::vector({8.0})));
    const GradMap once = clip_by_norm(g, 2.0);
    EXPECT_NEAR(once.at(p).item(), 1.2, 1e-12);
    EXPECT_NEAR(once.at(q).item(), 1.6, 1e-12);
    const GradMap twice = clip_by_norm(once, 2.0);
    EXPECT_NEAR(twice.at(p).item(), once.at(p).item(), 1e-12);
    EXPECT_NEAR(twice.at(q).item(), once.at(q).item(), 1e-12);
}

TEST(Clip, RejectsNonPositiveThreshold) {
    GradMap g;
    EXPECT_THROW(clip_by_norm(g, 0.0), std::invalid_argument);
}

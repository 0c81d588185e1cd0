#include <functional>

#include <gtest/gtest.h>

#include "cmidd/autodiff.hpp"
#include "helpers.hpp"

using namespace cmidd;
using namespace cmidd::ad;
using cmidd::testing::max_relative_error;
using cmidd::testing::numeric_gradient;
using cmidd::testing::random_matrix;

namespace {

using ScalarFn = std::function<Var(const Var&)>;

/// Analytic gradient of f at x against central differences.
double check(const ScalarFn& f, const Matrix& x) {
    Var leaf = Var::leaf(x);
    Matrix analytic = grad(f(leaf), leaf).value();
    Matrix numeric = numeric_gradient(
        [&](const Matrix& m) {
            NoGradGuard g;
            return f(Var::constant(m)).item();
        },
        x);
    return max_relative_error(analytic, numeric);
}

/// Gradient of ||grad f||^2, which exercises the backward rules of the backward rules.
double check_second_order(const ScalarFn& f, const Matrix& x) {
    auto g2 = [&](const Var& v) {
        Var inner = grad(f(v), v, true);
        return sum_all(mul(inner, inner));
    };
    Var leaf = Var::leaf(x);
    Matrix analytic = grad(g2(leaf), leaf).value();
    Matrix numeric = numeric_gradient(
        [&](const Matrix& m) {
            Var l = Var::leaf(m);
            Var inner = grad(f(l), l);
            double s = 0;
            for (double v : inner.value().data) s += v * v;
            return s;
        },
        x);
    return max_relative_error(analytic, numeric);
}

std::mt19937_64 gen(42);

}  // namespace

TEST(Autodiff, ElementwiseForward) {
    Var a = Var::constant(Matrix(1, 3, std::vector<double>{1, 2, 3}));
    Var b = Var::constant(Matrix(1, 3, std::vector<double>{4, 5, 6}));
    EXPECT_EQ(add(a, b).value().data, (std::vector<double>{5, 7, 9}));
    EXPECT_EQ(sub(a, b).value().data, (std::vector<double>{-3, -3, -3}));
    EXPECT_EQ(mul(a, b).value().data, (std::vector<double>{4, 10, 18}));
    EXPECT_EQ(div(b, a).value().data, (std::vector<double>{4, 2.5, 2}));
    EXPECT_EQ(clamp_min(a, 2.0).value().data, (std::vector<double>{2, 2, 3}));
}

TEST(Autodiff, BroadcastForward) {
    Var m = Var::constant(Matrix(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6}));
    Var row = Var::constant(Matrix(1, 3, std::vector<double>{10, 20, 30}));
    Var col = Var::constant(Matrix(2, 1, std::vector<double>{100, 200}));
    EXPECT_EQ(add(m, row).value().data, (std::vector<double>{11, 22, 33, 14, 25, 36}));
    EXPECT_EQ(add(m, col).value().data, (std::vector<double>{101, 102, 103, 204, 205, 206}));
    EXPECT_EQ(sum_rows(m).value().data, (std::vector<double>{5, 7, 9}));
    EXPECT_EQ(sum_cols(m).value().data, (std::vector<double>{6, 15}));
    EXPECT_EQ(sum_all(m).item(), 21.0);
    EXPECT_ANY_THROW(add(m, Var::constant(Matrix(3, 2))));
}

TEST(Autodiff, MatmulAndTranspose) {
    Var a = Var::constant(Matrix(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6}));
    Var b = Var::constant(Matrix(3, 1, std::vector<double>{1, 0, -1}));
    EXPECT_EQ(matmul(a, b).value().data, (std::vector<double>{-2, -2}));
    EXPECT_EQ(transpose(a).value(), Matrix(3, 2, std::vector<double>{1, 4, 2, 5, 3, 6}));
    EXPECT_ERROR_KIND(matmul(a, a), ErrorKind::shape_mismatch);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
    Var x = Var::constant(Matrix(2, 4, std::vector<double>{1000, 1001, 999, 1000, -5, 0, 5, 10}));
    Matrix p = softmax_rows(x).value();
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0;
        for (double v : p.row(r)) {
            EXPECT_TRUE(std::isfinite(v));
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-15);
    }
}

TEST(Autodiff, CrossEntropyMatchesDefinition) {
    Matrix logits(2, 3, std::vector<double>{1, 2, 3, 0, 0, 0});
    std::vector<int> labels{2, 1};
    double expected = (-std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0))) + std::log(3.0)) / 2;
    EXPECT_NEAR(cross_entropy(Var::constant(logits), labels).item(), expected, 1e-14);
    std::vector<int> bad{3, 0};
    EXPECT_ERROR_KIND(cross_entropy(Var::constant(logits), bad), ErrorKind::label_out_of_range);
}

TEST(Autodiff, GradientOfEachOp) {
    Matrix x = random_matrix(3, 4, gen, 0.2, 1.5);
    Var row = Var::constant(random_matrix(1, 4, gen, 0.5, 1.0));
    Var col = Var::constant(random_matrix(3, 1, gen, 0.5, 1.0));
    Var w = Var::constant(random_matrix(4, 2, gen));
    std::vector<std::pair<const char*, ScalarFn>> cases = {
        {"add-row", [&](const Var& v) { return sum_all(mul(add(v, row), add(v, row))); }},
        {"sub-col", [&](const Var& v) { return sum_all(mul(sub(col, v), v)); }},
        {"mul", [&](const Var& v) { return sum_all(mul(mul(v, v), v)); }},
        {"div", [&](const Var& v) { return sum_all(div(row, v)); }},
        {"div-num", [&](const Var& v) { return sum_all(div(v, add(v, col))); }},
        {"scale-neg", [&](const Var& v) { return sum_all(mul(neg(scale(v, 3.0)), v)); }},
        {"matmul", [&](const Var& v) { return sum_all(tanh(matmul(v, w))); }},
        {"matmul-left", [&](const Var& v) { return sum_all(tanh(matmul(transpose(w), transpose(v)))); }},
        {"tanh", [&](const Var& v) { return sum_all(tanh(v)); }},
        {"exp", [&](const Var& v) { return sum_all(exp(v)); }},
        {"log", [&](const Var& v) { return sum_all(log(v)); }},
        {"sqrt", [&](const Var& v) { return sum_all(sqrt(v)); }},
        {"clamp", [&](const Var& v) { return sum_all(mul(clamp_min(v, 0.8), v)); }},
        {"sum-rows", [&](const Var& v) { return sum_all(exp(sum_rows(v))); }},
        {"sum-cols", [&](const Var& v) { return sum_all(exp(sum_cols(v))); }},
        {"broadcast", [&](const Var& v) { return sum_all(tanh(broadcast_to(sum_rows(v), 5, 4))); }},
        {"select-rows",
         [&](const Var& v) {
             std::vector<std::size_t> rows{2, 0, 2};
             return sum_all(mul(select_rows(v, rows), select_rows(v, rows)));
         }},
        {"softmax", [&](const Var& v) { return sum_all(mul(softmax_rows(v), softmax_rows(mul(v, v)))); }},
        {"cross-entropy",
         [&](const Var& v) {
             std::vector<int> labels{0, 3, 1};
             return cross_entropy(v, labels);
         }},
    };
    for (const auto& [name, f] : cases) EXPECT_LT(check(f, x), 1e-6) << name;
}

TEST(Autodiff, SecondOrderGradients) {
    Matrix x = random_matrix(3, 4, gen, 0.2, 1.5);
    Var w = Var::constant(random_matrix(4, 3, gen));
    std::vector<std::pair<const char*, ScalarFn>> cases = {
        {"tanh-matmul", [&](const Var& v) { return sum_all(tanh(matmul(v, w))); }},
        {"softmax", [&](const Var& v) { return sum_all(mul(softmax_rows(v), v)); }},
        {"log-div", [&](const Var& v) { return sum_all(log(div(v, sum_cols(v)))); }},
        {"sqrt-exp", [&](const Var& v) { return sum_all(sqrt(exp(v))); }},
        {"cross-entropy",
         [&](const Var& v) {
             std::vector<int> labels{1, 2, 0};
             return cross_entropy(matmul(v, w), labels);
         }},
    };
    for (const auto& [name, f] : cases) EXPECT_LT(check_second_order(f, x), 1e-5) << name;
}

TEST(Autodiff, GatherScatterAreAdjoint) {
    auto idx = std::make_shared<std::vector<long>>(std::vector<long>{3, -1, 0, 3, 5, 2});
    Matrix x = random_matrix(2, 3, gen);
    EXPECT_LT(check([&](const Var& v) { return sum_all(exp(gather(v, idx, 3, 2))); }, x), 1e-6);
    Matrix y = random_matrix(3, 2, gen);
    EXPECT_LT(check([&](const Var& v) { return sum_all(exp(scatter_add(v, idx, 2, 3))); }, y), 1e-6);
    Matrix g = gather(Var::constant(x), idx, 3, 2).value();
    EXPECT_EQ(g(0, 1), 0.0);
    EXPECT_EQ(g(1, 1), x.data[3]);
}

TEST(Autodiff, UnrelatedInputsGetZeroGradient) {
    Var a = Var::leaf(Matrix(2, 2, 1.0));
    Var b = Var::leaf(Matrix(1, 3, 1.0));
    Var y = sum_all(mul(a, a));
    std::vector<Var> xs{a, b};
    auto g = grad(y, xs);
    EXPECT_EQ(g[0].value(), Matrix(2, 2, 2.0));
    EXPECT_EQ(g[1].value(), Matrix(1, 3, 0.0));
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
    Var a = Var::leaf(Matrix(1, 1, 3.0));
    Var t = mul(a, a);
    Var y = add(t, mul(t, a));  // a^2 + a^3
    EXPECT_DOUBLE_EQ(grad(y, a).item(), 2 * 3.0 + 3 * 9.0);
}

TEST(Autodiff, NoGradGuardStopsRecording) {
    Var a = Var::leaf(Matrix(1, 1, 2.0));
    {
        NoGradGuard g;
        EXPECT_FALSE(mul(a, a).requires_grad());
    }
    EXPECT_TRUE(mul(a, a).requires_grad());
    EXPECT_FALSE(detach(mul(a, a)).requires_grad());
}

TEST(Autodiff, GradRequiresScalar) {
    Var a = Var::leaf(Matrix(2, 2, 1.0));
    EXPECT_ERROR_KIND(grad(mul(a, a), a), ErrorKind::shape_mismatch);
}

TEST(Autodiff, DeepChainDoesNotOverflowTheStack) {
    Var a = Var::leaf(Matrix(1, 1, 0.5));
    Var y = a;
    for (int i = 0; i < 20000; ++i) y = add(y, scale(a, 1e-4));
    EXPECT_NEAR(grad(y, a).item(), 1.0 + 20000 * 1e-4, 1e-9);
}

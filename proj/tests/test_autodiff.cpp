#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "kdiga/autodiff.hpp"
#include "kdiga/rng.hpp"

using namespace kdiga;
using ad::Matrix;
using ad::Var;

namespace {

Matrix random_matrix(int rows, int cols, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng = make_rng(seed, "test");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = uniform(rng, lo, hi);
    return m;
}

// Central differences of a scalar function of one matrix.
Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h = 1e-5) {
    Matrix g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Matrix p = x, m = x;
        p(i) += h;
        m(i) -= h;
        g(i) = (f(p) - f(m)) / (2 * h);
    }
    return g;
}

void expect_gradient_matches(const std::function<Var(const Var&)>& fn, const Matrix& x, double tol = 1e-7) {
    const Var in = ad::variable(x);
    const Matrix analytic = ad::grad(ad::sum_all(fn(in)), in).value();
    const Matrix numeric = numeric_gradient([&](const Matrix& v) { return fn(ad::constant(v)).value().sum(); }, x);
    EXPECT_LT((analytic - numeric).cwiseAbs().maxCoeff(), tol) << "analytic\n" << analytic << "\nnumeric\n" << numeric;
}

}  // namespace

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
    const Matrix x = random_matrix(3, 4, 1);
    const Matrix w = random_matrix(3, 4, 2);
    expect_gradient_matches([&](const Var& v) { return ad::mul(v, ad::constant(w)); }, x);
    expect_gradient_matches([](const Var& v) { return ad::tanh(v); }, x);
    expect_gradient_matches([](const Var& v) { return ad::exp(v); }, x);
    expect_gradient_matches([](const Var& v) { return ad::square(v); }, x);
    expect_gradient_matches([](const Var& v) { return ad::log(ad::add_scalar(ad::square(v), 1.0)); }, x);
    expect_gradient_matches([](const Var& v) { return ad::safe_reciprocal(ad::add_scalar(v, 3.0)); }, x);
    expect_gradient_matches([](const Var& v) { return ad::relu(v); }, x);
}

TEST(Autodiff, ReductionsAndBroadcastsMatchFiniteDifferences) {
    const Matrix x = random_matrix(4, 3, 3);
    const Matrix w = random_matrix(4, 3, 4);
    auto weighted = [&](const Var& v) { return ad::mul(v, ad::constant(w)); };
    expect_gradient_matches([&](const Var& v) { return weighted(ad::broadcast_rows(ad::sum_rows(v), 4)); }, x);
    expect_gradient_matches([&](const Var& v) { return weighted(ad::broadcast_cols(ad::sum_cols(v), 3)); }, x);
    expect_gradient_matches([&](const Var& v) { return weighted(ad::softmax_rows(v)); }, x);
    expect_gradient_matches([&](const Var& v) { return weighted(ad::log_softmax_rows(v)); }, x);
    expect_gradient_matches([&](const Var& v) { return ad::logsumexp_rows(v); }, x);
    expect_gradient_matches([&](const Var& v) { return ad::norm_rows(v); }, x);
    expect_gradient_matches([&](const Var& v) { return ad::norm_all(v); }, x);
    expect_gradient_matches([&](const Var& v) { return ad::mul(ad::reshape(v, 2, 6), ad::constant(random_matrix(2, 6, 5))); }, x);
}

TEST(Autodiff, MatmulAndTransposeMatchFiniteDifferences) {
    const Matrix a = random_matrix(3, 4, 6);
    const Matrix b = random_matrix(4, 2, 7);
    expect_gradient_matches([&](const Var& v) { return ad::square(ad::matmul(v, ad::constant(b))); }, a);
    expect_gradient_matches([&](const Var& v) { return ad::square(ad::matmul(ad::constant(a), v)); }, b);
    expect_gradient_matches([&](const Var& v) { return ad::square(ad::transpose(v)); }, a);
}

TEST(Autodiff, GatherAndScatterAreAdjoint) {
    // Row-major flat indices; -1 gives a zero entry.
    auto map = std::make_shared<const std::vector<ad::Index>>(std::vector<ad::Index>{5, 0, -1, 3, 3, 1});
    const Matrix x = random_matrix(2, 3, 8);
    const Var g = ad::gather(ad::constant(x), map, 2, 3);
    EXPECT_DOUBLE_EQ(g.value()(0, 0), x(1, 2));
    EXPECT_DOUBLE_EQ(g.value()(0, 1), x(0, 0));
    EXPECT_DOUBLE_EQ(g.value()(0, 2), 0.0);
    EXPECT_DOUBLE_EQ(g.value()(1, 0), x(1, 0));
    EXPECT_DOUBLE_EQ(g.value()(1, 2), x(0, 1));

    // <gather(x), y> == <x, scatter_add(y)>
    const Matrix y = random_matrix(2, 3, 9);
    const Matrix s = ad::scatter_add(ad::constant(y), map, 2, 3).value();
    EXPECT_NEAR(g.value().cwiseProduct(y).sum(), x.cwiseProduct(s).sum(), 1e-14);
    expect_gradient_matches([&](const Var& v) { return ad::square(ad::gather(v, map, 2, 3)); }, x);
}

TEST(Autodiff, UnreachedInputsGetZeroGradient) {
    const Var a = ad::variable(random_matrix(2, 2, 10));
    const Var b = ad::variable(random_matrix(3, 1, 11));
    const std::vector<Var> inputs{a, b};
    const auto g = ad::grad(ad::sum_all(ad::square(a)), inputs);
    EXPECT_EQ(g[1].value().rows(), 3);
    EXPECT_EQ(g[1].value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Autodiff, NoGradGuardSkipsRecording) {
    const Var a = ad::variable(random_matrix(2, 2, 12));
    Var out;
    {
        ad::NoGradGuard guard;
        out = ad::square(a);
    }
    EXPECT_FALSE(out.requires_grad());
    const Var out2 = ad::square(a);
    EXPECT_TRUE(out2.requires_grad());
}

TEST(Autodiff, DoubleBackpropMatchesFiniteDifferencesOnToy) {
    // f(x; θ) = tanh(θ0 x0 + θ1 x1) * θ1; penalty P(θ) = ||∂f/∂x||^2.
    // dP/dθ by double backprop vs central differences of P.
    const Matrix x = (Matrix(1, 2) << 0.3, -0.7).finished();
    auto penalty = [&](const Matrix& theta, bool create_graph, Var* theta_var) {
        const Var th = theta_var ? *theta_var : ad::constant(theta);
        const Var in = ad::variable(x);
        const Var z = ad::matmul(in, ad::transpose(th));
        const Var f = ad::mul(ad::tanh(z), ad::gather(th, std::make_shared<const std::vector<ad::Index>>(std::vector<ad::Index>{1}), 1, 1));
        const Var gx = ad::grad(ad::sum_all(f), in, create_graph);
        return ad::sum_all(ad::square(gx));
    };
    const Matrix theta = (Matrix(1, 2) << 0.8, -1.3).finished();
    Var th = ad::variable(theta);
    const Var p = penalty(theta, true, &th);
    const Matrix analytic = ad::grad(p, th).value();
    const Matrix numeric = numeric_gradient([&](const Matrix& t) { return penalty(t, false, nullptr).value()(0, 0); }, theta, 1e-4);
    const double rel = (analytic - numeric).norm() / std::max(1e-12, numeric.norm());
    EXPECT_LT(rel, 1e-3);
    EXPECT_GT(analytic.norm(), 1e-3);
}

TEST(Rng, SubstreamsAreStableAndDistinct) {
    EXPECT_EQ(substream_seed(7, "data"), substream_seed(7, "data"));
    EXPECT_NE(substream_seed(7, "data"), substream_seed(7, "init"));
    EXPECT_NE(substream_seed(7, "data", 0), substream_seed(7, "data", 1));
    Rng a = make_rng(3, "attack");
    Rng b = make_rng(3, "attack");
    for (int i = 0; i < 10; ++i) EXPECT_EQ(uniform(a), uniform(b));
}

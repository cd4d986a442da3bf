#include <gtest/gtest.h>

#include <future>

#include "kdiga/attacks.hpp"

using namespace kdiga;

namespace {

Batch random_batch(int n, int dim, int classes, std::uint64_t seed) {
    Rng rng = make_rng(seed, "batch");
    Batch b;
    b.x.resize(n, dim);
    for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x(i) = uniform(rng, 0.0, 1.0);
    b.y.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) b.y[static_cast<std::size_t>(i)] = i % classes;
    return b;
}

// Exhaustive maximum of CE over the corners of [x - eps, x + eps] ∩ [0, 1].
double corner_max(const Classifier& m, const Vector& x, int y, double eps) {
    const int d = static_cast<int>(x.size());
    double best = -1e300;
    for (long mask = 0; mask < (1L << d); ++mask) {
        Matrix p(1, d);
        for (int j = 0; j < d; ++j) p(0, j) = std::clamp(((mask >> j) & 1) ? x(j) + eps : x(j) - eps, 0.0, 1.0);
        best = std::max(best, cross_entropy(m.logits(p).row(0).transpose(), y));
    }
    return best;
}

}  // namespace

TEST(Pgd, SingleStepReachesCornerMaximumOnBinaryLinearModels) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const int d = 2 + static_cast<int>(s % 6);
        const auto model = build_model({Family::linear, {d}, 2, 0, 1, 0, 1.0}, 100 + s);
        const Batch b = random_batch(4, d, 2, 200 + s);
        const AttackSpec spec{0.1, 0.1, 1, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy};
        const auto adv = pgd_attack(model, b, spec);
        for (Eigen::Index i = 0; i < b.size(); ++i) {
            EXPECT_NEAR(adv.loss(i), corner_max(model, b.x.row(i).transpose(), b.y[static_cast<std::size_t>(i)], 0.1), 1e-9);
        }
    }
}

TEST(Pgd, ZeroRadiusReturnsInput) {
    const auto model = build_model({Family::mlp_relu, {3}, 3, 5, 1, 0, 1.0}, 1);
    const Batch b = random_batch(6, 3, 3, 2);
    const auto adv = pgd_attack(model, b, AttackSpec{0.0, 0.0, 5, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy});
    EXPECT_EQ(adv.x_adv, b.x);
}

TEST(Pgd, OutputsAreFeasible) {
    const auto model = build_model({Family::mlp_relu, {6}, 4, 8, 2, 0, 1.0}, 3);
    const Batch b = random_batch(20, 6, 4, 4);
    for (bool random_start : {false, true}) {
        AttackSpec spec{0.3, 0.0, 10, 0.0, 1.0, random_start, 3, 9, AttackObjective::cross_entropy};
        const auto adv = pgd_attack(model, b, spec);
        const auto rep = check_feasibility(b.x, adv.x_adv, 0.3);
        EXPECT_TRUE(rep.ok());
        EXPECT_EQ(rep.checked, 120u);
    }
}

TEST(Pgd, RunsExactlyTheRequestedSteps) {
    // With a tiny step the ball never binds, so each coordinate with a
    // nonzero gradient moves by exactly steps * alpha.
    const auto model = build_model({Family::linear, {3}, 2, 0, 1, 0, 1.0}, 5);
    Batch b{Matrix::Constant(1, 3, 0.5), Labels{0}};
    const AttackSpec spec{0.5, 0.001, 7, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy};
    const auto adv = pgd_attack(model, b, spec);
    EXPECT_NEAR((adv.x_adv - b.x).cwiseAbs().maxCoeff(), 0.007, 1e-15);
    EXPECT_NEAR((adv.x_adv - b.x).cwiseAbs().minCoeff(), 0.007, 1e-15);
}

TEST(Pgd, DefaultStepIsTwoAndAHalfEpsOverSteps) {
    EXPECT_DOUBLE_EQ(effective_alpha(AttackSpec{0.2, 0.0, 10, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy}), 0.05);
    EXPECT_DOUBLE_EQ(effective_alpha(AttackSpec{0.2, 0.01, 10, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy}), 0.01);
}

TEST(Pgd, RandomStartIsSeededAndRestartsKeepTheBest) {
    const auto model = build_model({Family::mlp_relu, {4}, 3, 6, 1, 0, 1.0}, 6);
    const Batch b = random_batch(10, 4, 3, 7);
    AttackSpec one{0.2, 0.0, 5, 0.0, 1.0, true, 1, 11, AttackObjective::cross_entropy};
    AttackSpec many = one;
    many.restarts = 4;
    const auto a1 = pgd_attack(model, b, one);
    const auto a2 = pgd_attack(model, b, one);
    EXPECT_EQ(a1.x_adv, a2.x_adv);
    const auto am = pgd_attack(model, b, many);
    for (Eigen::Index i = 0; i < b.size(); ++i) EXPECT_GE(am.loss(i), a1.loss(i));
}

TEST(Pgd, MarginObjectiveAndSuccessFlags) {
    const auto model = build_model({Family::mlp_relu, {4}, 3, 6, 1, 0, 1.0}, 8);
    const Batch b = random_batch(10, 4, 3, 9);
    const auto adv = pgd_attack(model, b, AttackSpec{0.3, 0.0, 10, 0.0, 1.0, false, 1, 0, AttackObjective::margin});
    const Labels pred = model.predict(adv.x_adv);
    for (std::size_t i = 0; i < pred.size(); ++i) EXPECT_EQ(adv.success[i], pred[i] != b.y[i]);
}

TEST(Pgd, InvalidSpecsAndModelsAreRejected) {
    const auto model = build_model({Family::linear, {2}, 2, 0, 1, 0, 1.0}, 1);
    const Batch b = random_batch(2, 2, 2, 1);
    EXPECT_THROW(pgd_attack(model, b, AttackSpec{-0.1, 0.0, 1, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy}), Error);
    EXPECT_THROW(pgd_attack(model, b, AttackSpec{0.1, 0.0, 1, 0.0, 1.0, false, 0, 0, AttackObjective::cross_entropy}), Error);
    EXPECT_THROW(inner_max_delta(model, b, AttackSpec{0.0, 0.0, 1, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy}), Error);
    BlackBoxClassifier box(2, 2, [](const Matrix& x) { return Matrix::Zero(x.rows(), 2); });
    try {
        (void)pgd_attack(box, b, AttackSpec{});
        FAIL() << "expected unsupported-capability";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::unsupported);
    }
}

TEST(Pgd, NonFiniteGradientIsReportedWithExampleIndex) {
    ZooClassifier model = build_model({Family::linear, {2}, 2, 0, 1, 0, 1.0}, 1);
    model.parameters()[0](1, 0) = std::numeric_limits<double>::infinity();
    const Batch b = random_batch(3, 2, 2, 2);
    try {
        (void)pgd_attack(model, b, AttackSpec{0.1, 0.0, 2, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy});
        FAIL() << "expected non-finite";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::non_finite);
        EXPECT_NE(std::string(e.what()).find("example 0"), std::string::npos);
    }
}

TEST(Pgd, ConcurrentAttacksMatchSequentialOnes) {
    const auto model = build_model({Family::mlp_relu, {5}, 3, 8, 1, 0, 1.0}, 12);
    std::vector<Batch> batches;
    for (int i = 0; i < 4; ++i) batches.push_back(random_batch(16, 5, 3, 50 + static_cast<std::uint64_t>(i)));
    const AttackSpec spec{0.2, 0.0, 10, 0.0, 1.0, true, 2, 3, AttackObjective::cross_entropy};
    std::vector<Matrix> sequential;
    for (const auto& b : batches) sequential.push_back(pgd_attack(model, b, spec).x_adv);
    std::vector<std::future<AdversarialBatch>> futures;
    for (const auto& b : batches) futures.push_back(std::async(std::launch::async, [&, b] { return pgd_attack(model, b, spec); }));
    for (std::size_t i = 0; i < futures.size(); ++i) EXPECT_EQ(futures[i].get().x_adv, sequential[i]);
}

TEST(Feasibility, CountsBallAndRangeViolations) {
    const Matrix x = Matrix::Constant(1, 3, 0.5);
    Matrix adv = x;
    adv(0, 0) = 0.5 + 0.2;
    adv(0, 1) = 1.2;
    const auto r = check_feasibility(x, adv, 0.1);
    EXPECT_EQ(r.ball_violations, 2u);
    EXPECT_EQ(r.range_violations, 1u);
    EXPECT_FALSE(r.ok());
}

TEST(ExternalAttacks, RegistryRevalidatesFeasibility) {
    const auto model = build_model({Family::linear, {2}, 2, 0, 1, 0, 1.0}, 1);
    const Batch b = random_batch(2, 2, 2, 1);
    AttackRegistry reg;
    reg.register_attack("shift", [](const Classifier&, const Batch& batch, double) {
        AdversarialBatch out;
        out.x_adv = batch.x.array() + 0.5;
        return out;
    });
    reg.register_attack("pgd", [](const Classifier& m, const Batch& batch, double r) {
        AttackSpec s;
        s.epsilon = r;
        return pgd_attack(m, batch, s);
    });
    EXPECT_THROW(reg.run("shift", model, b, 0.1), Error);
    EXPECT_NO_THROW(reg.run("pgd", model, b, 0.1));
    EXPECT_THROW(reg.run("missing", model, b, 0.1), Error);
}

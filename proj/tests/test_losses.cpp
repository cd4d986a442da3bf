#include <gtest/gtest.h>

#include "kdiga/losses.hpp"

using namespace kdiga;

namespace {

struct Fixture {
    ZooClassifier student = build_model({Family::mlp_relu, {4}, 3, 6, 1, 0, 1.0}, 1);
    ZooClassifier teacher = build_model({Family::mlp_relu, {4}, 3, 10, 2, 0, 1.0}, 2);
    Batch batch;
    Matrix delta;

    Fixture() {
        Rng rng = make_rng(3, "batch");
        batch.x.resize(5, 4);
        for (Eigen::Index i = 0; i < batch.x.size(); ++i) batch.x(i) = uniform(rng, 0.1, 0.9);
        batch.y = {0, 1, 2, 1, 0};
        delta.resize(5, 4);
        for (Eigen::Index i = 0; i < delta.size(); ++i) delta(i) = uniform(rng, -0.05, 0.05);
    }
};

double mean_ce(const Classifier& m, const Matrix& x, const Labels& y) {
    const Matrix z = m.logits(x);
    double s = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) s += cross_entropy(z.row(i).transpose(), y[static_cast<std::size_t>(i)]);
    return s / static_cast<double>(z.rows());
}

double mean_kl(const Matrix& zs, const Matrix& zt, double t) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < zs.rows(); ++i) s += kl_with_temperature(zs.row(i).transpose(), zt.row(i).transpose(), t);
    return s / static_cast<double>(zs.rows());
}

DistillLossConfig cfg(Variant v, double lambda_iga = 0.0, double t = 1.0) {
    return {v, 0.5, 0.5, lambda_iga, t, IgaAggregation::whole_batch_norm};
}

}  // namespace

TEST(Losses, KdMatchesComposedFormulaWithTemperatureSquared) {
    Fixture f;
    for (double t : {1.0, 4.0}) {
        const auto b = compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::KD, 0.0, t));
        const double ce = mean_ce(f.student, f.batch.x, f.batch.y);
        const double kl = mean_kl(f.student.logits(f.batch.x), f.teacher.logits(f.batch.x), t);
        EXPECT_NEAR(b.ce_term, ce, 1e-14);
        EXPECT_NEAR(b.kl_term, kl, 1e-14);
        EXPECT_NEAR(b.total, 0.5 * ce + 0.5 * t * t * kl, 1e-13);
    }
}

TEST(Losses, StIsPlainCrossEntropy) {
    Fixture f;
    const auto b = compute_loss(f.student, nullptr, f.batch, {Variant::ST, 1.0, 0.0, 0.0, 1.0, IgaAggregation::whole_batch_norm});
    EXPECT_NEAR(b.total, mean_ce(f.student, f.batch.x, f.batch.y), 1e-14);
    EXPECT_EQ(b.kl_term, 0.0);
}

TEST(Losses, KdigaAddsGradientGap) {
    Fixture f;
    const auto kd = compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::KD));
    const auto kg = compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::KDIGA, 0.3));
    const Matrix gap = input_gradient_ce(f.student, f.batch.x, f.batch.y) - input_gradient_ce(f.teacher, f.batch.x, f.batch.y);
    EXPECT_NEAR(kg.iga_term, gap.norm(), 1e-13);
    EXPECT_NEAR(kg.total, kd.total + 0.3 * gap.norm(), 1e-13);

    DistillLossConfig per = cfg(Variant::KDIGA, 0.3);
    per.aggregation = IgaAggregation::per_sample_mean;
    EXPECT_NEAR(compute_loss(f.student, &f.teacher, f.batch, per).iga_term, gap.rowwise().norm().mean(), 1e-13);
}

TEST(Losses, KdigaWithZeroCoefficientIsBitwiseKd) {
    Fixture f;
    const auto params_a = f.student.parameter_vars(true);
    const auto params_b = f.student.parameter_vars(true);
    const LossGraph kd = build_loss_graph(f.student, params_a, &f.teacher, f.batch, cfg(Variant::KD));
    const LossGraph kg = build_loss_graph(f.student, params_b, &f.teacher, f.batch, cfg(Variant::KDIGA, 0.0));
    EXPECT_EQ(kd.breakdown.total, kg.breakdown.total);
    EXPECT_GT(kg.breakdown.iga_term, 0.0);  // still reported
    const auto ga = ad::grad(kd.total, params_a);
    const auto gb = ad::grad(kg.total, params_b);
    ASSERT_EQ(ga.size(), gb.size());
    for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_EQ(ga[i].value(), gb[i].value());
}

TEST(Losses, ArdUsesPerturbedStudentAgainstCleanTeacher) {
    Fixture f;
    const auto b = compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::ARD), f.delta);
    const Matrix x_adv = f.batch.x + f.delta;
    EXPECT_NEAR(b.ce_term, mean_ce(f.student, f.batch.x, f.batch.y), 1e-14);
    EXPECT_NEAR(b.kl_term, mean_kl(f.student.logits(x_adv), f.teacher.logits(f.batch.x), 1.0), 1e-14);
}

TEST(Losses, ArdVariantsPlaceTheGradientGapCorrectly) {
    Fixture f;
    const Matrix x_adv = f.batch.x + f.delta;
    const auto c = compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::KDIGA_ARD_C, 0.2), f.delta);
    const Matrix gap_clean = input_gradient_ce(f.student, f.batch.x, f.batch.y) - input_gradient_ce(f.teacher, f.batch.x, f.batch.y);
    EXPECT_NEAR(c.iga_term, gap_clean.norm(), 1e-13);
    EXPECT_NEAR(c.kl_term, mean_kl(f.student.logits(x_adv), f.teacher.logits(f.batch.x), 1.0), 1e-14);

    const auto a = compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::KDIGA_ARD_A, 0.2), f.delta);
    const Matrix gap_adv = input_gradient_ce(f.student, x_adv, f.batch.y) - input_gradient_ce(f.teacher, x_adv, f.batch.y);
    EXPECT_NEAR(a.iga_term, gap_adv.norm(), 1e-13);
    EXPECT_NEAR(a.kl_term, mean_kl(f.student.logits(x_adv), f.teacher.logits(x_adv), 1.0), 1e-14);
}

TEST(Losses, PerturbationPresenceIsChecked) {
    Fixture f;
    try {
        (void)compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::ARD));
        FAIL() << "expected invalid-call";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_call);
    }
    try {
        (void)compute_loss(f.student, &f.teacher, f.batch, cfg(Variant::KD), f.delta);
        FAIL() << "expected invalid-call";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_call);
    }
    EXPECT_THROW((void)compute_loss(f.student, nullptr, f.batch, cfg(Variant::KD)), Error);
}

TEST(Losses, ConfigInvariants) {
    EXPECT_THROW(validate(DistillLossConfig{Variant::ST, 1.0, 0.5, 0.0, 1.0, IgaAggregation::whole_batch_norm}), Error);
    EXPECT_THROW(validate(DistillLossConfig{Variant::KD, 0.5, 0.5, 1.0, 1.0, IgaAggregation::whole_batch_norm}), Error);
    EXPECT_THROW(validate(DistillLossConfig{Variant::KD, -0.5, 0.5, 0.0, 1.0, IgaAggregation::whole_batch_norm}), Error);
    EXPECT_THROW(validate(DistillLossConfig{Variant::KD, 0.5, 0.5, 0.0, 0.0, IgaAggregation::whole_batch_norm}), Error);
    EXPECT_NO_THROW(validate(DistillLossConfig{Variant::KDIGA, 0.5, 0.5, 0.0, 1.0, IgaAggregation::whole_batch_norm}));
    EXPECT_DOUBLE_EQ(lambda_iga_from_batch(10.0, 125), 0.08);
    EXPECT_EQ(parse_variant("KDIGA_ARD_A"), Variant::KDIGA_ARD_A);
    EXPECT_THROW(parse_variant("kdiga"), Error);
}

TEST(Losses, TeacherIsNeverUpdated) {
    Fixture f;
    const auto before = parameter_hash(f.teacher);
    const auto params = f.student.parameter_vars(true);
    for (Variant v : {Variant::KD, Variant::KDIGA, Variant::ARD, Variant::KDIGA_ARD_C, Variant::KDIGA_ARD_A}) {
        const LossGraph g = build_loss_graph(f.student, params, &f.teacher, f.batch, cfg(v, uses_iga(v) ? 0.5 : 0.0),
                                             is_adversarial(v) ? &f.delta : nullptr);
        const auto grads = ad::grad(g.total, params);
        EXPECT_EQ(grads.size(), f.student.parameters().size());
        // Teacher parameters exposed as variables never receive a gradient through the loss.
        const auto teacher_vars = f.teacher.parameter_vars(true);
        const auto tg = ad::grad(g.total, teacher_vars);
        for (const auto& t : tg) EXPECT_EQ(t.value().cwiseAbs().maxCoeff(), 0.0);
    }
    EXPECT_EQ(parameter_hash(f.teacher), before);
}

TEST(Losses, IgaParameterGradientMatchesCentralDifferences) {
    // Smooth model so that central differences are well defined.
    ZooClassifier student = build_model({Family::tiny_attention, {2, 2}, 3, 4, 1, 0, 1.0}, 5);
    ZooClassifier teacher = build_model({Family::tiny_attention, {2, 2}, 3, 4, 1, 0, 1.0}, 6);
    Fixture f;
    const DistillLossConfig c{Variant::KDIGA, 0.0, 0.0, 1.0, 1.0, IgaAggregation::whole_batch_norm};
    const auto params = student.parameter_vars(true);
    const LossGraph g = build_loss_graph(student, params, &teacher, f.batch, c);
    std::vector<Matrix> analytic;
    for (const auto& v : ad::grad(g.total, params)) analytic.push_back(v.value());
    const Vector theta = student.flat_parameters();
    Vector flat_analytic(theta.size());
    Eigen::Index k = 0;
    for (const auto& m : analytic)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index col = 0; col < m.cols(); ++col) flat_analytic(k++) = m(r, col);
    Vector numeric(theta.size());
    const double h = 1e-4;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        Vector p = theta, m = theta;
        p(i) += h;
        m(i) -= h;
        student.set_flat_parameters(p);
        const double fp = compute_loss(student, &teacher, f.batch, c).total;
        student.set_flat_parameters(m);
        const double fm = compute_loss(student, &teacher, f.batch, c).total;
        numeric(i) = (fp - fm) / (2 * h);
    }
    EXPECT_LT((flat_analytic - numeric).norm() / numeric.norm(), 1e-3);
}

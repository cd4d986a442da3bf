#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "kdiga/attacks.hpp"
#include "kdiga/autodiff.hpp"
#include "kdiga/diffmodel.hpp"
#include "kdiga/errors.hpp"
#include "kdiga/losses.hpp"
#include "kdiga/rng.hpp"

namespace kdiga {

// ---------------------------------------------------------------------------
// Gradient identity: ∇_x L_CE(f(x), y) = (softmax(f(x)) - e_y)^T J.

struct GradientIdentityResult {
    Vector autodiff_gradient;
    Vector identity_gradient;
    double relative_residual = 0.0;
};

inline GradientIdentityResult gradient_identity(const Classifier& model, const Vector& x, int y) {
    GradientIdentityResult r;
    r.autodiff_gradient = input_gradient_ce(model, x.transpose(), Labels{y}).row(0).transpose();
    const Matrix jac = logit_jacobian(model, x);
    Vector coeff = softmax(model.logits(x.transpose()).row(0).transpose());
    coeff(y) -= 1.0;
    r.identity_gradient = jac.transpose() * coeff;
    r.relative_residual =
        (r.autodiff_gradient - r.identity_gradient).norm() / std::max(1.0, r.autodiff_gradient.norm());
    return r;
}

// ---------------------------------------------------------------------------
// Local linearity measure over the ℓ∞ ball B(δ).

enum class LlmMethod { grid, ascent };

inline std::string to_string(LlmMethod m) { return m == LlmMethod::grid ? "grid" : "ascent"; }

struct LlmBudget {
    int grid_resolution = 101;  // lattice points per axis, corners included
    int restarts = 10;
    int steps = 50;
    std::uint64_t seed = 0;

    bool operator==(const LlmBudget&) const = default;
};

struct LLMEstimate {
    double gamma = 0.0;
    double radius = 0.0;
    LlmMethod method = LlmMethod::grid;
    Vector argmax_perturbation;
    int restarts_used = 0;
};

namespace detail {

/// Residuals L(x+ε) - L(x) - εᵀg for every row ε of `eps`, and optionally
/// their ε-gradients ∇L(x+ε) - g.
inline Vector llm_residuals(const Classifier& model, const Vector& x, int y, double ce0, const Vector& g0,
                            const Matrix& eps, Matrix* gradient = nullptr) {
    Matrix points = eps.rowwise() + x.transpose();
    const Labels labels(static_cast<std::size_t>(eps.rows()), y);
    Vector ce;
    if (gradient) {
        auto [loss, g] = objective_and_gradient(model, points, labels, AttackObjective::cross_entropy);
        ce = std::move(loss);
        *gradient = g.rowwise() - g0.transpose();
    } else {
        ad::NoGradGuard no_grad;
        ce = graph::cross_entropy(ad::constant(model.logits(points)), labels).value().col(0);
    }
    return (ce.array() - ce0).matrix() - eps * g0;
}

inline Matrix lattice(int dim, double delta, int resolution, bool orthant) {
    require(resolution >= 2, ErrorKind::invalid_config, "lattice resolution must be >= 2");
    Eigen::Index count = 1;
    for (int d = 0; d < dim; ++d) count *= resolution;
    Matrix pts(count, dim);
    const double lo = orthant ? 0.0 : -delta;
    const double step = (delta - lo) / (resolution - 1);
    for (Eigen::Index k = 0; k < count; ++k) {
        Eigen::Index rem = k;
        for (int d = dim - 1; d >= 0; --d) {
            const int idx = static_cast<int>(rem % resolution);
            rem /= resolution;
            pts(k, d) = idx == resolution - 1 ? delta : lo + step * idx;
        }
    }
    return pts;
}

}  // namespace detail

/// LLM(f, x, δ) = max_{ε ∈ B(δ)} |L(x+ε) - L(x) - εᵀ∇L(x)|, B(δ) the ℓ∞ ball.
/// grid: exhaustive lattice (D ≤ 3). ascent: sign-gradient ascent on the
/// absolute residual from random starts; a lower bound on the maximum.
inline LLMEstimate estimate_llm(const Classifier& model, const Vector& x, int y, double delta, LlmMethod method,
                                const LlmBudget& budget = {}) {
    require(delta >= 0.0, ErrorKind::invalid_config, "estimate_llm: radius must be >= 0");
    require(model.supports_gradients(), ErrorKind::unsupported, "estimate_llm: model has no gradient support");
    const int dim = static_cast<int>(x.size());
    LLMEstimate est;
    est.radius = delta;
    est.method = method;
    est.argmax_perturbation = Vector::Zero(dim);
    if (method == LlmMethod::grid) {
        require(dim <= 3, ErrorKind::unsupported, "estimate_llm: grid method requires input dimension <= 3");
    }
    if (delta == 0.0) return est;

    const Matrix x_row = x.transpose();
    const double ce0 = cross_entropy(model.logits(x_row).row(0).transpose(), y);
    const Vector g0 = input_gradient_ce(model, x_row, Labels{y}).row(0).transpose();

    if (method == LlmMethod::grid) {
        const Matrix eps = detail::lattice(dim, delta, budget.grid_resolution, false);
        constexpr Eigen::Index chunk = 8192;
        for (Eigen::Index start = 0; start < eps.rows(); start += chunk) {
            const Eigen::Index n = std::min(chunk, eps.rows() - start);
            const Vector r = detail::llm_residuals(model, x, y, ce0, g0, eps.middleRows(start, n));
            for (Eigen::Index i = 0; i < n; ++i) {
                if (std::abs(r(i)) > est.gamma) {
                    est.gamma = std::abs(r(i));
                    est.argmax_perturbation = eps.row(start + i).transpose();
                }
            }
        }
        return est;
    }

    // All restarts advance together as rows of one batch.
    const int restarts = std::max(1, budget.restarts);
    Rng rng = make_rng(budget.seed, "llm");
    Matrix eps(restarts, dim);
    // Even restarts start at a random vertex of the ball, odd ones inside it.
    // Piecewise-linear losses are often flat around x, where a zero gradient
    // would leave an interior start stuck.
    for (Eigen::Index i = 0; i < eps.rows(); ++i) {
        for (Eigen::Index d = 0; d < dim; ++d) {
            eps(i, d) = i % 2 == 0 ? (rng() & 1 ? delta : -delta) : uniform(rng, -delta, delta);
        }
    }
    est.restarts_used = restarts;
    for (int step = 0; step <= budget.steps; ++step) {
        Matrix grad;
        const Vector r = detail::llm_residuals(model, x, y, ce0, g0, eps, step < budget.steps ? &grad : nullptr);
        for (Eigen::Index i = 0; i < r.size(); ++i) {
            if (std::abs(r(i)) > est.gamma) {
                est.gamma = std::abs(r(i));
                est.argmax_perturbation = eps.row(i).transpose();
            }
        }
        if (step == budget.steps) break;
        // Linearly decaying step: large moves reach faces and corners, small
        // ones refine interior maxima.
        const double alpha = delta * static_cast<double>(budget.steps - step) / budget.steps;
        for (Eigen::Index i = 0; i < eps.rows(); ++i) {
            const double dir = detail::sign(r(i));
            for (Eigen::Index d = 0; d < dim; ++d) {
                eps(i, d) = std::clamp(eps(i, d) + alpha * dir * detail::sign(grad(i, d)), -delta, delta);
            }
        }
    }
    return est;
}

// ---------------------------------------------------------------------------
// Robustness bound |L_s(x+ε) - L_t(x+ε)| ≤ γ_s + γ_t + φ.

struct RobustnessBound {
    double radius = 0.0;
    double gamma_s = 0.0;
    double gamma_t = 0.0;
    double ce_s = 0.0;
    double ce_t = 0.0;
    double grad_gap = 0.0;       // ‖g_s - g_t‖₂
    double grad_gap_dual = 0.0;  // ‖g_s - g_t‖₁, the dual of the ℓ∞ ball
    double phi = 0.0;            // ce_s + ce_t + δ · grad_gap_dual
    double total = 0.0;
    LlmMethod method = LlmMethod::grid;
};

inline RobustnessBound robustness_bound(const Classifier& student, const Classifier& teacher, const Vector& x, int y,
                                        double delta, LlmMethod method, const LlmBudget& budget = {}) {
    require(student.input_dim() == teacher.input_dim() && student.num_classes() == teacher.num_classes(),
            ErrorKind::invalid_input, "robustness_bound: models disagree on input or output space");
    const Matrix x_row = x.transpose();
    RobustnessBound b;
    b.radius = delta;
    b.method = method;
    b.gamma_s = estimate_llm(student, x, y, delta, method, budget).gamma;
    b.gamma_t = estimate_llm(teacher, x, y, delta, method, budget).gamma;
    b.ce_s = cross_entropy(student.logits(x_row).row(0).transpose(), y);
    b.ce_t = cross_entropy(teacher.logits(x_row).row(0).transpose(), y);
    const Vector gap = (input_gradient_ce(student, x_row, Labels{y}) - input_gradient_ce(teacher, x_row, Labels{y}))
                           .row(0)
                           .transpose();
    b.grad_gap = gap.norm();
    b.grad_gap_dual = gap.lpNorm<1>();
    b.phi = b.ce_s + b.ce_t + delta * b.grad_gap_dual;
    b.total = b.gamma_s + b.gamma_t + b.phi;
    return b;
}

/// One row of the bound table: means over a sample set.
struct BoundTableRow {
    std::string model_id;
    std::vector<double> radii;
    std::vector<double> llm;  // mean student LLM per radius
    double ce = 0.0;
    double grad_gap = 0.0;
    LlmMethod method = LlmMethod::ascent;
    std::size_t samples = 0;
};

inline BoundTableRow bound_table_row(const std::string& model_id, const Classifier& student, const Classifier& teacher,
                                     const Batch& batch, const std::vector<double>& radii, LlmMethod method,
                                     const LlmBudget& budget = {}) {
    BoundTableRow row;
    row.model_id = model_id;
    row.radii = radii;
    row.llm.assign(radii.size(), 0.0);
    row.method = method;
    row.samples = static_cast<std::size_t>(batch.size());
    if (batch.size() == 0) return row;
    const Matrix ce = graph::cross_entropy(ad::constant(student.logits(batch.x)), batch.y).value();
    row.ce = ce.mean();
    const Matrix gap = input_gradient_ce(student, batch.x, batch.y) - input_gradient_ce(teacher, batch.x, batch.y);
    row.grad_gap = gap.rowwise().norm().mean();
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
        const Vector x = batch.x.row(i).transpose();
        for (std::size_t r = 0; r < radii.size(); ++r) {
            LlmBudget b = budget;
            b.seed = substream_seed(budget.seed, "bound-table", static_cast<std::uint64_t>(i));
            row.llm[r] += estimate_llm(student, x, batch.y[static_cast<std::size_t>(i)], radii[r], method, b).gamma;
        }
    }
    for (double& v : row.llm) v /= static_cast<double>(batch.size());
    return row;
}

// ---------------------------------------------------------------------------
// Monte-Carlo verification of the bound.

struct BoundViolationReport {
    std::size_t instances = 0;
    std::size_t samples = 0;
    std::size_t violations = 0;
    double worst_margin = std::numeric_limits<double>::infinity();  // min over samples of (bound + slack - lhs)
    bool advisory = false;  // LLM came from ascent, so the check is not theorem-level
    std::size_t l2_phi_violations = 0;  // same check with δ‖g_s - g_t‖₂ in φ (not a valid bound for the ℓ∞ ball)
};

namespace detail {

// Bounds the residual change between a sample and its nearest lattice point
// (ℓ∞ distance ≤ h/2) by h · max‖∇r‖₁ over the lattice (a factor 2 over the
// first-order estimate).
inline double lattice_slack(const Classifier& model, const Vector& x, int y, double delta, int resolution) {
    if (delta == 0.0) return 0.0;
    const Matrix x_row = x.transpose();
    const double ce0 = cross_entropy(model.logits(x_row).row(0).transpose(), y);
    const Vector g0 = input_gradient_ce(model, x_row, Labels{y}).row(0).transpose();
    const Matrix eps = lattice(static_cast<int>(x.size()), delta, resolution, false);
    Matrix grad;
    (void)llm_residuals(model, x, y, ce0, g0, eps, &grad);
    const double h = 2.0 * delta / (resolution - 1);
    return h * grad.rowwise().lpNorm<1>().maxCoeff();
}

}  // namespace detail

inline BoundViolationReport verify_bound(const Classifier& student, const Classifier& teacher, const Batch& batch,
                                         double delta, int samples, const LlmBudget& budget = {}) {
    BoundViolationReport report;
    const int dim = student.input_dim();
    const LlmMethod method = dim <= 2 ? LlmMethod::grid : LlmMethod::ascent;
    report.advisory = method == LlmMethod::ascent;
    Rng rng = make_rng(budget.seed, "verify-bound");
    const Labels* labels = &batch.y;
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
        const Vector x = batch.x.row(i).transpose();
        const int y = (*labels)[static_cast<std::size_t>(i)];
        const RobustnessBound b = robustness_bound(student, teacher, x, y, delta, method, budget);
        double slack = 0.0;
        if (method == LlmMethod::grid) {
            slack = detail::lattice_slack(student, x, y, delta, budget.grid_resolution) +
                    detail::lattice_slack(teacher, x, y, delta, budget.grid_resolution);
        }
        Matrix eps(samples, dim);
        for (Eigen::Index k = 0; k < eps.size(); ++k) eps(k) = uniform(rng, -delta, delta);
        const Matrix points = eps.rowwise() + x.transpose();
        const Labels ys(static_cast<std::size_t>(samples), y);
        const Vector ce_s = graph::cross_entropy(ad::constant(student.logits(points)), ys).value().col(0);
        const Vector ce_t = graph::cross_entropy(ad::constant(teacher.logits(points)), ys).value().col(0);
        const double l2_total = b.gamma_s + b.gamma_t + b.ce_s + b.ce_t + delta * b.grad_gap;
        for (int k = 0; k < samples; ++k) {
            const double lhs = std::abs(ce_s(k) - ce_t(k));
            const double margin = b.total + slack - lhs;
            report.worst_margin = std::min(report.worst_margin, margin);
            if (margin < 0.0) ++report.violations;
            if (l2_total + slack - lhs < 0.0) ++report.l2_phi_violations;
        }
        ++report.instances;
        report.samples += static_cast<std::size_t>(samples);
    }
    return report;
}

// ---------------------------------------------------------------------------
// δ-robustness of the argmax prediction.

struct DeltaRobustResult {
    bool robust = true;
    std::optional<Vector> witness;  // perturbation that changes the prediction
    std::size_t points_checked = 0;
    bool exhaustive = false;  // lattice over the whole box (D ≤ 2) vs sampled
};

/// Checks that argmax f(x + ε) == argmax f(x) for ε on a lattice over the
/// symmetric box [-δ, δ]^D (or the orthant [0, δ]^D). For D > 2, corners
/// and `resolution^2` uniform samples are checked instead.
inline DeltaRobustResult check_delta_robust(const Classifier& model, const Vector& x, double delta, int resolution = 41,
                                            bool orthant = false, std::uint64_t seed = 0) {
    DeltaRobustResult res;
    const int dim = static_cast<int>(x.size());
    const int reference = argmax(model.logits(x.transpose()).row(0));
    res.points_checked = 1;
    if (delta == 0.0) {
        res.exhaustive = true;
        return res;
    }
    Matrix eps;
    if (dim <= 2) {
        eps = detail::lattice(dim, delta, resolution, orthant);
        res.exhaustive = true;
    } else {
        const double lo = orthant ? 0.0 : -delta;
        const int corner_dims = std::min(dim, 12);
        const Eigen::Index corners = Eigen::Index{1} << corner_dims;
        const Eigen::Index random = static_cast<Eigen::Index>(resolution) * resolution;
        eps.resize(corners + random, dim);
        Rng rng = make_rng(seed, "delta-robust");
        for (Eigen::Index c = 0; c < corners; ++c) {
            for (int d = 0; d < dim; ++d) {
                eps(c, d) = d < corner_dims ? (((c >> d) & 1) ? delta : lo) : uniform(rng, lo, delta);
            }
        }
        for (Eigen::Index k = corners; k < eps.rows(); ++k)
            for (int d = 0; d < dim; ++d) eps(k, d) = uniform(rng, lo, delta);
    }
    const Matrix points = eps.rowwise() + x.transpose();
    const Labels pred = model.predict(points);
    res.points_checked += static_cast<std::size_t>(points.rows());
    for (std::size_t k = 0; k < pred.size(); ++k) {
        if (pred[k] != reference) {
            res.robust = false;
            res.witness = eps.row(static_cast<Eigen::Index>(k)).transpose();
            break;
        }
    }
    return res;
}

/// Per-radius robustness flags for one input along an increasing ladder.
inline std::vector<bool> robustness_ladder(const Classifier& model, const Vector& x, const std::vector<double>& radii,
                                           int resolution = 41, bool orthant = false) {
    std::vector<bool> out;
    out.reserve(radii.size());
    for (double r : radii) out.push_back(check_delta_robust(model, x, r, resolution, orthant).robust);
    return out;
}

// ---------------------------------------------------------------------------
// Perfect-student check.

struct PerfectStudentTolerances {
    double kl = 1e-12;
    double iga = 1e-12;
    double ce = std::numeric_limits<double>::infinity();  // an exact teacher copy keeps the teacher's CE
};

struct PerfectStudentReport {
    double max_kl = 0.0;
    double max_iga = 0.0;
    double max_ce = 0.0;
    bool within_tolerance = false;
    bool ladder_checked = false;
    std::vector<double> radii;
    std::vector<std::vector<bool>> student_ladder;  // per example, per radius
    std::vector<std::vector<bool>> teacher_ladder;
    bool ladders_identical = false;
    bool student_at_least_teacher = false;  // claim emitted only when ladder_checked
};

inline PerfectStudentReport perfect_student_check(const Classifier& student, const Classifier& teacher,
                                                  const Batch& dataset, const PerfectStudentTolerances& tol,
                                                  const std::vector<double>& radii, int resolution = 41,
                                                  double temperature = 1.0) {
    require(student.input_dim() == teacher.input_dim() && student.num_classes() == teacher.num_classes(),
            ErrorKind::invalid_input, "perfect_student_check: models disagree on input or output space");
    PerfectStudentReport rep;
    rep.radii = radii;
    const Matrix zs = student.logits(dataset.x);
    const Matrix zt = teacher.logits(dataset.x);
    const Matrix gs = input_gradient_ce(student, dataset.x, dataset.y);
    const Matrix gt = input_gradient_ce(teacher, dataset.x, dataset.y);
    for (Eigen::Index i = 0; i < dataset.size(); ++i) {
        const int y = dataset.y[static_cast<std::size_t>(i)];
        rep.max_kl = std::max(rep.max_kl, kl_with_temperature(zs.row(i).transpose(), zt.row(i).transpose(), temperature));
        rep.max_iga = std::max(rep.max_iga, (gs.row(i) - gt.row(i)).norm());
        rep.max_ce = std::max(rep.max_ce, cross_entropy(zs.row(i).transpose(), y));
    }
    rep.within_tolerance = rep.max_kl <= tol.kl && rep.max_iga <= tol.iga && rep.max_ce <= tol.ce;
    const bool eligible = student.piecewise_linear() && teacher.piecewise_linear() && student.input_dim() <= 2;
    if (!rep.within_tolerance || !eligible) return rep;

    rep.ladder_checked = true;
    rep.ladders_identical = true;
    rep.student_at_least_teacher = true;
    for (Eigen::Index i = 0; i < dataset.size(); ++i) {
        const Vector x = dataset.x.row(i).transpose();
        auto s = robustness_ladder(student, x, radii, resolution);
        auto t = robustness_ladder(teacher, x, radii, resolution);
        for (std::size_t r = 0; r < radii.size(); ++r) {
            if (t[r] && !s[r]) rep.student_at_least_teacher = false;
        }
        rep.ladders_identical = rep.ladders_identical && s == t;
        rep.student_ladder.push_back(std::move(s));
        rep.teacher_ladder.push_back(std::move(t));
    }
    return rep;
}

}  // namespace kdiga

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kdiga/autodiff.hpp"
#include "kdiga/diffmodel.hpp"
#include "kdiga/errors.hpp"
#include "kdiga/rng.hpp"

namespace kdiga {

enum class AttackObjective { cross_entropy, margin };

/// ℓ∞ PGD parameters. `alpha <= 0` selects the default 2.5 * epsilon / steps.
struct AttackSpec {
    double epsilon = 8.0 / 255.0;
    double alpha = 0.0;
    int steps = 20;
    double clip_min = 0.0;
    double clip_max = 1.0;
    bool random_start = false;
    int restarts = 1;
    std::uint64_t seed = 0;
    AttackObjective objective = AttackObjective::cross_entropy;

    bool operator==(const AttackSpec&) const = default;
};

inline void validate(const AttackSpec& s) {
    require(s.epsilon >= 0.0 && s.epsilon <= 1.0, ErrorKind::invalid_config, "attack: epsilon must lie in [0, 1]");
    require(s.steps >= 0, ErrorKind::invalid_config, "attack: steps must be >= 0");
    require(s.restarts >= 1, ErrorKind::invalid_config, "attack: restarts must be >= 1");
    require(s.clip_min < s.clip_max, ErrorKind::invalid_config, "attack: clip_min must be < clip_max");
    require(std::isfinite(s.alpha), ErrorKind::invalid_config, "attack: alpha must be finite");
}

inline double effective_alpha(const AttackSpec& s) {
    if (s.alpha > 0.0) return s.alpha;
    return s.steps > 0 ? 2.5 * s.epsilon / s.steps : 0.0;
}

struct AdversarialBatch {
    Matrix x_adv;
    Vector loss;
    std::vector<bool> success;  // adversarial prediction differs from the label
};

/// Projection onto [x0 - eps, x0 + eps] ∩ [clip_min, clip_max].
inline Matrix clip_to_ball_and_range(const Matrix& candidate, const Matrix& x0, const AttackSpec& spec) {
    require(candidate.rows() == x0.rows() && candidate.cols() == x0.cols(), ErrorKind::invalid_input,
            "clip_to_ball_and_range: shape mismatch");
    const double eps = spec.epsilon;
    Matrix out(candidate.rows(), candidate.cols());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        double v = std::clamp(candidate(i), x0(i) - eps, x0(i) + eps);
        out(i) = std::clamp(v, spec.clip_min, spec.clip_max);
    }
    return out;
}

namespace detail {

inline ad::Var attack_objective(const ad::Var& logits, const Labels& y, AttackObjective objective) {
    if (objective == AttackObjective::cross_entropy) return graph::cross_entropy(logits, y);
    // Margin: best wrong logit minus true logit.
    const Matrix& z = logits.value();
    Labels runner_up(y.size());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        int best = -1;
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            if (j == y[static_cast<std::size_t>(i)]) continue;
            if (best < 0 || z(i, j) > z(i, best)) best = static_cast<int>(j);
        }
        runner_up[static_cast<std::size_t>(i)] = best;
    }
    const ad::Var other = ad::gather(logits, graph::label_map(runner_up, z.cols()), z.rows(), 1);
    const ad::Var truth = ad::gather(logits, graph::label_map(y, z.cols()), z.rows(), 1);
    return ad::sub(other, truth);
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// Per-example attack objective and its input gradient at `x`.
inline std::pair<Vector, Matrix> objective_and_gradient(const Classifier& model, const Matrix& x, const Labels& y,
                                                        AttackObjective objective) {
    const ad::Var input = ad::variable(x);
    const ad::Var per_example = detail::attack_objective(model.forward(input), y, objective);
    Matrix g = ad::grad(ad::sum_all(per_example), input).value();
    return {per_example.value().col(0), std::move(g)};
}

/// ℓ∞ projected sign-gradient ascent. Each restart runs exactly `steps`
/// iterations; the per-example iterate with the highest final loss wins
/// (earlier restarts win ties).
inline AdversarialBatch pgd_attack(const Classifier& model, const Batch& batch, const AttackSpec& spec) {
    validate(spec);
    require(model.supports_gradients(), ErrorKind::unsupported, "pgd_attack: model has no gradient support");
    validate_batch(batch, model.num_classes());
    const Matrix& x0 = batch.x;
    const double alpha = effective_alpha(spec);

    AdversarialBatch best;
    for (int restart = 0; restart < spec.restarts; ++restart) {
        Matrix x = x0;
        if (spec.random_start) {
            Rng rng = make_rng(spec.seed, "attack", static_cast<std::uint64_t>(restart));
            for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += uniform(rng, -spec.epsilon, spec.epsilon);
        }
        x = clip_to_ball_and_range(x, x0, spec);
        for (int step = 0; step < spec.steps; ++step) {
            auto [loss, g] = objective_and_gradient(model, x, batch.y, spec.objective);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                if (!g.row(r).allFinite()) {
                    fail(ErrorKind::non_finite,
                         "pgd_attack: non-finite gradient for example " + std::to_string(r) + " at step " +
                             std::to_string(step));
                }
            }
            x = clip_to_ball_and_range(x + alpha * g.unaryExpr(&detail::sign), x0, spec);
        }
        Vector loss;
        {
            ad::NoGradGuard no_grad;
            loss = detail::attack_objective(ad::constant(model.logits(x)), batch.y, spec.objective).value().col(0);
        }
        if (restart == 0) {
            best.x_adv = std::move(x);
            best.loss = std::move(loss);
            continue;
        }
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            if (loss(r) > best.loss(r)) {
                best.loss(r) = loss(r);
                best.x_adv.row(r) = x.row(r);
            }
        }
    }
    const Labels pred = model.predict(best.x_adv);
    best.success.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) best.success[i] = pred[i] != batch.y[i];
    return best;
}

/// Inner maximization against the student: returns x_adv - x.
inline Matrix inner_max_delta(const Classifier& student, const Batch& batch, const AttackSpec& spec) {
    require(spec.epsilon > 0.0, ErrorKind::invalid_config, "inner_max_delta: epsilon must be positive");
    return pgd_attack(student, batch, spec).x_adv - batch.x;
}

struct FeasibilityReport {
    std::size_t checked = 0;
    std::size_t ball_violations = 0;
    std::size_t range_violations = 0;

    [[nodiscard]] bool ok() const noexcept { return ball_violations == 0 && range_violations == 0; }

    FeasibilityReport& operator+=(const FeasibilityReport& o) {
        checked += o.checked;
        ball_violations += o.ball_violations;
        range_violations += o.range_violations;
        return *this;
    }
};

/// Elementwise check of the ε-box (with 1e-9 slack) and the data range.
inline FeasibilityReport check_feasibility(const Matrix& x, const Matrix& x_adv, double epsilon, double clip_min = 0.0,
                                           double clip_max = 1.0) {
    require(x.rows() == x_adv.rows() && x.cols() == x_adv.cols(), ErrorKind::invalid_input,
            "check_feasibility: shape mismatch");
    FeasibilityReport report;
    report.checked = static_cast<std::size_t>(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (!(std::abs(x_adv(i) - x(i)) <= epsilon + 1e-9)) ++report.ball_violations;
        if (!(x_adv(i) >= clip_min && x_adv(i) <= clip_max)) ++report.range_violations;
    }
    return report;
}

/// External attack slot: (model, batch, radius) -> perturbed batch. Results
/// are re-validated against the feasibility invariants by the caller.
using ExternalAttack = std::function<AdversarialBatch(const Classifier&, const Batch&, double radius)>;

class AttackRegistry {
public:
    void register_attack(const std::string& name, ExternalAttack attack) { attacks_[name] = std::move(attack); }

    [[nodiscard]] bool contains(const std::string& name) const { return attacks_.count(name) != 0; }

    [[nodiscard]] AdversarialBatch run(const std::string& name, const Classifier& model, const Batch& batch,
                                       double radius) const {
        auto it = attacks_.find(name);
        require(it != attacks_.end(), ErrorKind::unsupported, "no external attack registered as '" + name + "'");
        AdversarialBatch result = it->second(model, batch, radius);
        const auto report = check_feasibility(batch.x, result.x_adv, radius);
        require(report.ok(), ErrorKind::integrity, "external attack '" + name + "' returned infeasible examples");
        return result;
    }

private:
    std::map<std::string, ExternalAttack> attacks_;
};

}  // namespace kdiga

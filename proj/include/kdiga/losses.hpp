#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdiga/autodiff.hpp"
#include "kdiga/diffmodel.hpp"
#include "kdiga/errors.hpp"

namespace kdiga {

enum class Variant { ST, KD, KDIGA, ARD, KDIGA_ARD_C, KDIGA_ARD_A };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::ST: return "ST";
        case Variant::KD: return "KD";
        case Variant::KDIGA: return "KDIGA";
        case Variant::ARD: return "ARD";
        case Variant::KDIGA_ARD_C: return "KDIGA_ARD_C";
        case Variant::KDIGA_ARD_A: return "KDIGA_ARD_A";
    }
    return "unknown";
}

inline Variant parse_variant(const std::string& name) {
    for (Variant v : {Variant::ST, Variant::KD, Variant::KDIGA, Variant::ARD, Variant::KDIGA_ARD_C, Variant::KDIGA_ARD_A}) {
        if (to_string(v) == name) return v;
    }
    fail(ErrorKind::invalid_config, "unknown loss variant '" + name + "'");
}

[[nodiscard]] constexpr bool is_adversarial(Variant v) {
    return v == Variant::ARD || v == Variant::KDIGA_ARD_C || v == Variant::KDIGA_ARD_A;
}

[[nodiscard]] constexpr bool uses_teacher(Variant v) { return v != Variant::ST; }

[[nodiscard]] constexpr bool uses_iga(Variant v) {
    return v == Variant::KDIGA || v == Variant::KDIGA_ARD_C || v == Variant::KDIGA_ARD_A;
}

enum class IgaAggregation { per_sample_mean, whole_batch_norm };

inline std::string to_string(IgaAggregation a) {
    return a == IgaAggregation::per_sample_mean ? "per-sample-mean" : "whole-batch-norm";
}

inline IgaAggregation parse_aggregation(const std::string& name) {
    if (name == "per-sample-mean") return IgaAggregation::per_sample_mean;
    if (name == "whole-batch-norm") return IgaAggregation::whole_batch_norm;
    fail(ErrorKind::invalid_config, "unknown iga aggregation '" + name + "'");
}

struct DistillLossConfig {
    Variant variant = Variant::KD;
    double lambda_ce = 0.5;
    double lambda_kl = 0.5;
    double lambda_iga = 0.0;
    double temperature = 1.0;
    IgaAggregation aggregation = IgaAggregation::whole_batch_norm;

    bool operator==(const DistillLossConfig&) const = default;
};

inline void validate(const DistillLossConfig& c) {
    require(c.lambda_ce >= 0.0 && c.lambda_kl >= 0.0 && c.lambda_iga >= 0.0, ErrorKind::invalid_config,
            "loss: coefficients must be nonnegative");
    require(c.temperature > 0.0, ErrorKind::invalid_config, "loss: temperature must be positive");
    if (c.variant == Variant::ST) {
        require(c.lambda_kl == 0.0 && c.lambda_iga == 0.0, ErrorKind::invalid_config,
                "loss: ST requires lambda_kl = lambda_iga = 0");
    }
    if (c.variant == Variant::KD || c.variant == Variant::ARD) {
        require(c.lambda_iga == 0.0, ErrorKind::invalid_config, "loss: KD and ARD require lambda_iga = 0");
    }
}

/// Input-gradient alignment coefficient scaled by batch size.
inline double lambda_iga_from_batch(double c, int batch_size) {
    require(batch_size >= 1, ErrorKind::invalid_config, "lambda_iga_from_batch: batch size must be >= 1");
    return c / static_cast<double>(batch_size);
}

struct LossBreakdown {
    double total = 0.0;
    double ce_term = 0.0;
    double kl_term = 0.0;
    double iga_term = 0.0;
};

/// ℓ2 gradient-alignment penalty between per-example gradient rows.
inline double iga_term(const Matrix& g_student, const Matrix& g_teacher, IgaAggregation aggregation) {
    require(g_student.rows() == g_teacher.rows() && g_student.cols() == g_teacher.cols(), ErrorKind::invalid_input,
            "iga_term: gradient shape mismatch");
    const Matrix diff = g_student - g_teacher;
    if (aggregation == IgaAggregation::whole_batch_norm) return diff.norm();
    if (diff.rows() == 0) return 0.0;
    return diff.rowwise().norm().mean();
}

inline ad::Var iga_term_graph(const ad::Var& g_student, const Matrix& g_teacher, IgaAggregation aggregation) {
    require(g_student.rows() == g_teacher.rows() && g_student.cols() == g_teacher.cols(), ErrorKind::invalid_input,
            "iga_term: gradient shape mismatch");
    const ad::Var diff = ad::sub(g_student, ad::constant(g_teacher));
    if (aggregation == IgaAggregation::whole_batch_norm) return ad::norm_all(diff);
    return graph::mean(ad::norm_rows(diff));
}

/// Teacher quantities on the clean batch; supplied when cached.
struct TeacherOutputs {
    Matrix logits;
    Matrix input_gradient;  // empty when the variant needs none
};

struct LossGraph {
    ad::Var total;
    LossBreakdown breakdown;
};

namespace detail {

inline TeacherOutputs teacher_outputs(const Classifier& teacher, const Matrix& x, const Labels& y, bool need_gradient) {
    TeacherOutputs out;
    out.logits = teacher.logits(x);
    if (need_gradient) out.input_gradient = input_gradient_ce(teacher, x, y);
    return out;
}

}  // namespace detail

/// Builds the composite objective as a graph over `student_params`. The
/// teacher enters only through constants, so no derivative reaches it.
/// `delta` is required exactly for the adversarial variants.
inline LossGraph build_loss_graph(const ZooClassifier& student, std::span<const ad::Var> student_params,
                                  const Classifier* teacher, const Batch& batch, const DistillLossConfig& config,
                                  const Matrix* delta = nullptr, const TeacherOutputs* cached_clean = nullptr) {
    validate(config);
    const Variant v = config.variant;
    require(!is_adversarial(v) || delta != nullptr, ErrorKind::invalid_call,
            "compute_loss: variant " + to_string(v) + " requires a perturbation batch");
    require(is_adversarial(v) || delta == nullptr, ErrorKind::invalid_call,
            "compute_loss: variant " + to_string(v) + " does not take a perturbation batch");
    require(!uses_teacher(v) || teacher != nullptr, ErrorKind::invalid_call, "compute_loss: teacher required");
    validate_batch(batch, student.num_classes());
    if (delta) {
        require(delta->rows() == batch.x.rows() && delta->cols() == batch.x.cols(), ErrorKind::invalid_input,
                "compute_loss: perturbation shape mismatch");
    }

    const double t = config.temperature;
    const bool iga_in_graph = uses_iga(v) && config.lambda_iga != 0.0;
    const bool iga_on_clean = v == Variant::KDIGA || v == Variant::KDIGA_ARD_C;

    LossGraph out;
    // Clean student pass; the input is a graph variable when the clean
    // student gradient is needed for the penalty (double backprop).
    const ad::Var x_clean = iga_in_graph && iga_on_clean ? ad::variable(batch.x) : ad::constant(batch.x);
    const ad::Var logits_clean = student.forward(x_clean, student_params);
    const ad::Var ce_per = graph::cross_entropy(logits_clean, batch.y);
    const ad::Var ce = graph::mean(ce_per);
    out.breakdown.ce_term = ce.scalar();
    out.total = ad::scale(ce, config.lambda_ce);

    if (!uses_teacher(v)) {
        out.breakdown.total = out.total.scalar();
        return out;
    }

    const bool need_teacher_clean_grad = iga_on_clean && uses_iga(v);
    TeacherOutputs clean;
    if (cached_clean) {
        clean = *cached_clean;
        if (need_teacher_clean_grad && clean.input_gradient.size() == 0) {
            clean.input_gradient = input_gradient_ce(*teacher, batch.x, batch.y);
        }
    } else {
        clean = detail::teacher_outputs(*teacher, batch.x, batch.y, need_teacher_clean_grad);
    }

    // KL term.
    ad::Var kl;
    Matrix x_adv;
    ad::Var x_adv_var;
    ad::Var logits_adv;
    if (is_adversarial(v)) {
        x_adv = batch.x + *delta;
        x_adv_var = iga_in_graph && v == Variant::KDIGA_ARD_A ? ad::variable(x_adv) : ad::constant(x_adv);
        logits_adv = student.forward(x_adv_var, student_params);
    }
    if (v == Variant::KD || v == Variant::KDIGA) {
        kl = graph::mean(graph::kl_with_temperature(logits_clean, ad::constant(clean.logits), t));
    } else if (v == Variant::ARD || v == Variant::KDIGA_ARD_C) {
        kl = graph::mean(graph::kl_with_temperature(logits_adv, ad::constant(clean.logits), t));
    } else {
        kl = graph::mean(graph::kl_with_temperature(logits_adv, ad::constant(teacher->logits(x_adv)), t));
    }
    out.breakdown.kl_term = kl.scalar();
    out.total = ad::add(out.total, ad::scale(kl, config.lambda_kl * t * t));

    if (uses_iga(v)) {
        const Matrix& x_iga = iga_on_clean ? batch.x : x_adv;
        const Matrix g_teacher = iga_on_clean ? clean.input_gradient : input_gradient_ce(*teacher, x_iga, batch.y);
        if (iga_in_graph) {
            const ad::Var& x_var = iga_on_clean ? x_clean : x_adv_var;
            const ad::Var& logits = iga_on_clean ? logits_clean : logits_adv;
            const ad::Var ce_sum = ad::sum_all(iga_on_clean ? ce_per : graph::cross_entropy(logits, batch.y));
            const ad::Var g_student = ad::grad(ce_sum, x_var, true);
            const ad::Var iga = iga_term_graph(g_student, g_teacher, config.aggregation);
            out.breakdown.iga_term = iga.scalar();
            out.total = ad::add(out.total, ad::scale(iga, config.lambda_iga));
        } else {
            // Coefficient is zero: report the penalty without wiring it in.
            const Matrix g_student = input_gradient_ce(student, x_iga, batch.y);
            out.breakdown.iga_term = iga_term(g_student, g_teacher, config.aggregation);
        }
    }
    out.breakdown.total = out.total.scalar();
    return out;
}

inline LossBreakdown compute_loss(const ZooClassifier& student, const Classifier* teacher, const Batch& batch,
                                  const DistillLossConfig& config, const std::optional<Matrix>& delta = std::nullopt) {
    const auto params = student.parameter_vars(false);
    return build_loss_graph(student, params, teacher, batch, config, delta ? &*delta : nullptr).breakdown;
}

}  // namespace kdiga

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdiga/attacks.hpp"
#include "kdiga/config.hpp"
#include "kdiga/diffmodel.hpp"
#include "kdiga/distiller.hpp"

namespace kdiga {

inline constexpr const char* report_schema = "kdiga.report/1";

struct RobustnessReport {
    std::string model_id;
    double clean_accuracy = 0.0;
    std::vector<std::pair<double, double>> robust;  // (radius, accuracy), radius ascending
    AttackSpec attack;                              // epsilon unused; one entry per radius instead
    std::size_t samples = 0;
    std::optional<double> teacher_clean_accuracy;
    std::vector<std::pair<double, double>> teacher_robust;
    FeasibilityReport feasibility;

    [[nodiscard]] double robust_at(double radius) const {
        for (const auto& [r, a] : robust)
            if (r == radius) return a;
        fail(ErrorKind::index, "report '" + model_id + "' has no entry for radius " + std::to_string(radius));
    }

    /// Robust accuracy non-increasing along the ladder.
    [[nodiscard]] bool monotone() const {
        for (std::size_t i = 1; i < robust.size(); ++i)
            if (robust[i].second > robust[i - 1].second) return false;
        return true;
    }
};

inline nlohmann::json to_json(const RobustnessReport& r) {
    nlohmann::json robust = nlohmann::json::array();
    for (const auto& [radius, acc] : r.robust) robust.push_back({{"radius", radius}, {"accuracy", acc}});
    nlohmann::json attack = to_json(r.attack);
    attack.erase("epsilon");
    nlohmann::json j{{"schema", report_schema},
                     {"model_id", r.model_id},
                     {"clean_accuracy", r.clean_accuracy},
                     {"robust", robust},
                     {"monotone", r.monotone()},
                     {"attack", attack},
                     {"samples", r.samples},
                     {"feasibility",
                      {{"checked", r.feasibility.checked},
                       {"ball_violations", r.feasibility.ball_violations},
                       {"range_violations", r.feasibility.range_violations}}}};
    if (r.teacher_clean_accuracy) {
        nlohmann::json tr = nlohmann::json::array();
        for (const auto& [radius, acc] : r.teacher_robust) tr.push_back({{"radius", radius}, {"accuracy", acc}});
        j["teacher"] = {{"clean_accuracy", *r.teacher_clean_accuracy}, {"robust", tr}};
    }
    return j;
}

inline RobustnessReport report_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "report", {"schema", "model_id", "clean_accuracy", "robust", "monotone", "attack", "samples",
                                     "feasibility", "teacher"});
    require(j.value("schema", "") == report_schema, ErrorKind::parse,
            std::string("report: schema must be '") + report_schema + "'");
    RobustnessReport r;
    try {
        r.model_id = j.at("model_id").get<std::string>();
        r.clean_accuracy = j.at("clean_accuracy").get<double>();
        for (const auto& e : j.at("robust")) r.robust.emplace_back(e.at("radius").get<double>(), e.at("accuracy").get<double>());
        r.attack = attack_from_json(j.at("attack"), "report.attack");
        r.samples = j.at("samples").get<std::size_t>();
        const auto& f = j.at("feasibility");
        r.feasibility.checked = f.at("checked").get<std::size_t>();
        r.feasibility.ball_violations = f.at("ball_violations").get<std::size_t>();
        r.feasibility.range_violations = f.at("range_violations").get<std::size_t>();
        if (j.contains("teacher")) {
            const auto& t = j.at("teacher");
            r.teacher_clean_accuracy = t.at("clean_accuracy").get<double>();
            for (const auto& e : t.at("robust"))
                r.teacher_robust.emplace_back(e.at("radius").get<double>(), e.at("accuracy").get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("report: ") + e.what());
    }
    return r;
}

struct EvaluationOutput {
    double clean_accuracy = 0.0;
    std::vector<std::pair<double, double>> robust;
    FeasibilityReport feasibility;
};

namespace detail {

inline EvaluationOutput evaluate_ladder(const Classifier& model, const Batch& test, const std::vector<double>& radii,
                                        const AttackSpec& attack, Eigen::Index chunk = 512) {
    EvaluationOutput out;
    out.clean_accuracy = accuracy(model, test);
    for (double radius : radii) {
        AttackSpec spec = attack;
        spec.epsilon = radius;
        if (radius == 0.0) {
            out.robust.emplace_back(radius, out.clean_accuracy);
            continue;
        }
        std::size_t correct = 0;
        for (Eigen::Index start = 0; start < test.size(); start += chunk) {
            const Eigen::Index rows = std::min(chunk, test.size() - start);
            Batch part{test.x.middleRows(start, rows),
                       Labels(test.y.begin() + start, test.y.begin() + start + rows)};
            spec.seed = substream_seed(attack.seed, "attack", static_cast<std::uint64_t>(start));
            const AdversarialBatch adv = pgd_attack(model, part, spec);
            out.feasibility += check_feasibility(part.x, adv.x_adv, radius, spec.clip_min, spec.clip_max);
            for (bool s : adv.success) correct += !s;
        }
        out.robust.emplace_back(radius, test.size() == 0 ? 0.0
                                                         : static_cast<double>(correct) / static_cast<double>(test.size()));
    }
    return out;
}

}  // namespace detail

/// Clean accuracy plus PGD robust accuracy at each radius of the ladder.
inline RobustnessReport evaluate(const std::string& model_id, const Classifier& model, const Batch& test,
                                 const std::vector<double>& radii, const AttackSpec& attack,
                                 const Classifier* teacher = nullptr) {
    validate(attack);
    require(!radii.empty(), ErrorKind::invalid_config, "evaluate: radius list must not be empty");
    for (std::size_t i = 1; i < radii.size(); ++i)
        require(radii[i] > radii[i - 1], ErrorKind::invalid_config, "evaluate: radius list must be strictly increasing");
    validate_batch(test, model.num_classes());
    RobustnessReport report;
    report.model_id = model_id;
    report.attack = attack;
    report.samples = static_cast<std::size_t>(test.size());
    auto result = detail::evaluate_ladder(model, test, radii, attack);
    report.clean_accuracy = result.clean_accuracy;
    report.robust = std::move(result.robust);
    report.feasibility = result.feasibility;
    if (teacher) {
        auto t = detail::evaluate_ladder(*teacher, test, radii, attack);
        report.teacher_clean_accuracy = t.clean_accuracy;
        report.teacher_robust = std::move(t.robust);
        report.feasibility += t.feasibility;
    }
    return report;
}

/// Deterministic evaluation subset (0 keeps the full split).
inline Batch evaluation_split(const Batch& test, const EvaluationConfig& e) {
    return deterministic_subset(test, e.subsample, e.subsample_seed, "eval-subsample");
}

/// Mean over seed replicates sharing a label; radii must agree.
inline RobustnessReport average_reports(const std::string& model_id, const std::vector<RobustnessReport>& reps) {
    require(!reps.empty(), ErrorKind::invalid_input, "average_reports: no reports");
    RobustnessReport out = reps.front();
    out.model_id = model_id;
    const double n = static_cast<double>(reps.size());
    out.clean_accuracy = 0.0;
    for (auto& [r, a] : out.robust) a = 0.0;
    out.feasibility = {};
    for (const auto& rep : reps) {
        require(rep.robust.size() == out.robust.size(), ErrorKind::invalid_input, "average_reports: radius mismatch");
        out.clean_accuracy += rep.clean_accuracy / n;
        for (std::size_t i = 0; i < rep.robust.size(); ++i) {
            require(rep.robust[i].first == out.robust[i].first, ErrorKind::invalid_input, "average_reports: radius mismatch");
            out.robust[i].second += rep.robust[i].second / n;
        }
        out.feasibility += rep.feasibility;
    }
    return out;
}

}  // namespace kdiga

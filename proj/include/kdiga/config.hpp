#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdiga/attacks.hpp"
#include "kdiga/checkpoint.hpp"
#include "kdiga/data.hpp"
#include "kdiga/distiller.hpp"
#include "kdiga/errors.hpp"
#include "kdiga/losses.hpp"

namespace kdiga {

inline constexpr const char* experiment_schema = "kdiga.experiment/1";

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    require(j.is_object(), ErrorKind::invalid_config, where + ": expected an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : j.items()) {
        require(ok.count(key) != 0, ErrorKind::invalid_config, where + ": unknown key '" + key + "'");
    }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_config, where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

// ---- sub-config (de)serialization -----------------------------------------

inline nlohmann::json to_json(const DatasetDescriptor& d) {
    return {{"kind", to_string(d.kind)}, {"paths", d.paths},     {"test_paths", d.test_paths},
            {"sha256", d.sha256},        {"n", d.n},             {"noise", d.noise},
            {"centers", d.centers},      {"dim", d.dim},         {"cluster_std", d.cluster_std},
            {"test_fraction", d.test_fraction}, {"train_subset", d.train_subset}, {"seed", d.seed}};
}

inline DatasetDescriptor dataset_from_json(const nlohmann::json& j) {
    const std::string w = "dataset";
    detail::check_keys(j, w, {"kind", "paths", "test_paths", "sha256", "n", "noise", "centers", "dim", "cluster_std",
                              "test_fraction", "train_subset", "seed"});
    require(j.contains("kind"), ErrorKind::invalid_config, "dataset: missing 'kind'");
    DatasetDescriptor d;
    d.kind = parse_dataset_kind(j.at("kind").get<std::string>());
    detail::read_opt(j, "paths", d.paths, w);
    detail::read_opt(j, "test_paths", d.test_paths, w);
    detail::read_opt(j, "sha256", d.sha256, w);
    detail::read_opt(j, "n", d.n, w);
    detail::read_opt(j, "noise", d.noise, w);
    detail::read_opt(j, "centers", d.centers, w);
    detail::read_opt(j, "dim", d.dim, w);
    detail::read_opt(j, "cluster_std", d.cluster_std, w);
    detail::read_opt(j, "test_fraction", d.test_fraction, w);
    detail::read_opt(j, "train_subset", d.train_subset, w);
    detail::read_opt(j, "seed", d.seed, w);
    return d;
}

inline std::string to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

inline Precision parse_precision(const std::string& s) {
    if (s == "f64") return Precision::f64;
    if (s == "f32") return Precision::f32;
    fail(ErrorKind::invalid_config, "unknown precision '" + s + "'");
}

inline nlohmann::json to_json(const OptimizerConfig& o) {
    return {{"learning_rate", o.learning_rate}, {"momentum", o.momentum},
            {"weight_decay", o.weight_decay},   {"milestones", o.milestones},
            {"decay_factor", o.decay_factor},   {"epochs", o.epochs},
            {"batch_size", o.batch_size},       {"seed", o.seed},
            {"precision", to_string(o.precision)}, {"grad_clip_norm", o.grad_clip_norm}};
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
    const std::string w = "optimizer";
    detail::check_keys(j, w, {"learning_rate", "momentum", "weight_decay", "milestones", "decay_factor", "epochs",
                              "batch_size", "seed", "precision", "grad_clip_norm"});
    OptimizerConfig o;
    detail::read_opt(j, "learning_rate", o.learning_rate, w);
    detail::read_opt(j, "momentum", o.momentum, w);
    detail::read_opt(j, "weight_decay", o.weight_decay, w);
    detail::read_opt(j, "milestones", o.milestones, w);
    detail::read_opt(j, "decay_factor", o.decay_factor, w);
    detail::read_opt(j, "epochs", o.epochs, w);
    detail::read_opt(j, "batch_size", o.batch_size, w);
    detail::read_opt(j, "seed", o.seed, w);
    detail::read_opt(j, "grad_clip_norm", o.grad_clip_norm, w);
    if (j.contains("precision")) o.precision = parse_precision(j.at("precision").get<std::string>());
    return o;
}

inline std::string to_string(AttackObjective o) { return o == AttackObjective::cross_entropy ? "cross-entropy" : "margin"; }

inline AttackObjective parse_attack_objective(const std::string& s) {
    if (s == "cross-entropy") return AttackObjective::cross_entropy;
    if (s == "margin") return AttackObjective::margin;
    fail(ErrorKind::invalid_config, "unknown attack objective '" + s + "'");
}

inline nlohmann::json to_json(const AttackSpec& a) {
    return {{"epsilon", a.epsilon},   {"alpha", a.alpha},         {"steps", a.steps},
            {"clip_min", a.clip_min}, {"clip_max", a.clip_max},   {"random_start", a.random_start},
            {"restarts", a.restarts}, {"seed", a.seed},           {"objective", to_string(a.objective)}};
}

inline AttackSpec attack_from_json(const nlohmann::json& j, const std::string& w = "attack") {
    detail::check_keys(j, w, {"epsilon", "alpha", "steps", "clip_min", "clip_max", "random_start", "restarts", "seed",
                              "objective"});
    AttackSpec a;
    detail::read_opt(j, "epsilon", a.epsilon, w);
    detail::read_opt(j, "alpha", a.alpha, w);
    detail::read_opt(j, "steps", a.steps, w);
    detail::read_opt(j, "clip_min", a.clip_min, w);
    detail::read_opt(j, "clip_max", a.clip_max, w);
    detail::read_opt(j, "random_start", a.random_start, w);
    detail::read_opt(j, "restarts", a.restarts, w);
    detail::read_opt(j, "seed", a.seed, w);
    if (j.contains("objective")) a.objective = parse_attack_objective(j.at("objective").get<std::string>());
    return a;
}

/// One distillation variant in the grid. `label` names the report row.
struct VariantConfig {
    std::string label;
    DistillLossConfig loss;
    bool iga_per_batch = true;  // lambda_iga is divided by the batch size

    bool operator==(const VariantConfig&) const = default;
};

inline DistillLossConfig effective_loss(const VariantConfig& v, int batch_size) {
    DistillLossConfig c = v.loss;
    if (v.iga_per_batch) c.lambda_iga = lambda_iga_from_batch(c.lambda_iga, batch_size);
    return c;
}

inline nlohmann::json to_json(const VariantConfig& v) {
    return {{"label", v.label},
            {"variant", to_string(v.loss.variant)},
            {"lambda_ce", v.loss.lambda_ce},
            {"lambda_kl", v.loss.lambda_kl},
            {"lambda_iga", v.loss.lambda_iga},
            {"iga_per_batch", v.iga_per_batch},
            {"temperature", v.loss.temperature},
            {"aggregation", to_string(v.loss.aggregation)}};
}

inline VariantConfig variant_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        VariantConfig v;
        v.loss.variant = parse_variant(j.get<std::string>());
        v.label = j.get<std::string>();
        if (v.loss.variant == Variant::ST) v.loss = {Variant::ST, 1.0, 0.0, 0.0, 1.0, IgaAggregation::whole_batch_norm};
        return v;
    }
    const std::string w = "variants[]";
    detail::check_keys(j, w, {"label", "variant", "lambda_ce", "lambda_kl", "lambda_iga", "iga_per_batch", "temperature",
                              "aggregation"});
    require(j.contains("variant"), ErrorKind::invalid_config, "variants[]: missing 'variant'");
    VariantConfig v;
    v.loss.variant = parse_variant(j.at("variant").get<std::string>());
    v.label = to_string(v.loss.variant);
    if (v.loss.variant == Variant::ST) v.loss.lambda_ce = 1.0, v.loss.lambda_kl = 0.0;
    detail::read_opt(j, "label", v.label, w);
    detail::read_opt(j, "lambda_ce", v.loss.lambda_ce, w);
    detail::read_opt(j, "lambda_kl", v.loss.lambda_kl, w);
    detail::read_opt(j, "lambda_iga", v.loss.lambda_iga, w);
    detail::read_opt(j, "iga_per_batch", v.iga_per_batch, w);
    detail::read_opt(j, "temperature", v.loss.temperature, w);
    if (j.contains("aggregation")) v.loss.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    return v;
}

// ---- experiment config ------------------------------------------------------

/// Teacher source: an existing checkpoint, or a training recipe.
struct TeacherSource {
    std::string checkpoint;
    ModelZooSpec model;
    OptimizerConfig optimizer;
    std::optional<AttackSpec> adversarial;  // nullopt: standard training
    std::uint64_t init_seed = 0;

    bool operator==(const TeacherSource&) const = default;
};

struct StudentSource {
    std::string checkpoint;  // fine-tuning mode when set
    ModelZooSpec model;

    bool operator==(const StudentSource&) const = default;
};

struct EvaluationConfig {
    std::vector<double> radii{0.0};
    AttackSpec attack;     // epsilon is overridden per radius
    int subsample = 0;     // 0 evaluates the whole test split
    std::uint64_t subsample_seed = 0;

    bool operator==(const EvaluationConfig&) const = default;
};

struct BoundConfig {
    std::vector<double> radii;  // empty disables the bound table
    int samples = 100;          // test points used for the table
    LlmBudget budget;

    bool operator==(const BoundConfig&) const = default;
};

struct ExperimentConfig {
    std::string name = "experiment";
    DatasetDescriptor dataset;
    TeacherSource teacher;
    StudentSource student;
    std::vector<VariantConfig> variants;
    OptimizerConfig optimizer;
    std::optional<AttackSpec> train_attack;  // inner maximization for ARD-style variants
    EvaluationConfig evaluation;
    BoundConfig bounds;
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "runs/experiment";
    bool validate_paths = true;

    bool operator==(const ExperimentConfig&) const = default;
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json teacher;
    if (!c.teacher.checkpoint.empty()) {
        teacher = {{"checkpoint", c.teacher.checkpoint}};
    } else {
        nlohmann::json recipe{{"model", to_json(c.teacher.model)},
                              {"optimizer", to_json(c.teacher.optimizer)},
                              {"init_seed", c.teacher.init_seed}};
        recipe["adversarial"] = c.teacher.adversarial ? to_json(*c.teacher.adversarial) : nlohmann::json(nullptr);
        teacher = {{"recipe", recipe}};
    }
    nlohmann::json student = c.student.checkpoint.empty() ? nlohmann::json{{"model", to_json(c.student.model)}}
                                                          : nlohmann::json{{"checkpoint", c.student.checkpoint}};
    nlohmann::json variants = nlohmann::json::array();
    for (const auto& v : c.variants) variants.push_back(to_json(v));
    nlohmann::json evaluation{{"radii", c.evaluation.radii},
                              {"attack", to_json(c.evaluation.attack)},
                              {"subsample", c.evaluation.subsample},
                              {"subsample_seed", c.evaluation.subsample_seed}};
    nlohmann::json bounds{{"radii", c.bounds.radii},
                          {"samples", c.bounds.samples},
                          {"grid_resolution", c.bounds.budget.grid_resolution},
                          {"restarts", c.bounds.budget.restarts},
                          {"steps", c.bounds.budget.steps},
                          {"seed", c.bounds.budget.seed}};
    return {{"schema", experiment_schema},
            {"name", c.name},
            {"dataset", to_json(c.dataset)},
            {"teacher", teacher},
            {"student", student},
            {"variants", variants},
            {"optimizer", to_json(c.optimizer)},
            {"train_attack", c.train_attack ? to_json(*c.train_attack) : nlohmann::json(nullptr)},
            {"evaluation", evaluation},
            {"bounds", bounds},
            {"seeds", c.seeds},
            {"output_dir", c.output_dir}};
}

inline void validate(const ExperimentConfig& c) {
    require(!c.variants.empty(), ErrorKind::invalid_config, "experiment: at least one variant required");
    require(!c.seeds.empty(), ErrorKind::invalid_config, "experiment: at least one seed required");
    std::set<std::string> labels;
    bool any_adversarial = false;
    for (const auto& v : c.variants) {
        require(!v.label.empty(), ErrorKind::invalid_config, "experiment: empty variant label");
        require(labels.insert(v.label).second, ErrorKind::invalid_config, "experiment: duplicate variant label '" + v.label + "'");
        validate(effective_loss(v, c.optimizer.batch_size));
        any_adversarial = any_adversarial || is_adversarial(v.loss.variant);
    }
    require(!any_adversarial || c.train_attack.has_value(), ErrorKind::invalid_config,
            "experiment: adversarial variants need 'train_attack'");
    if (c.train_attack) validate(*c.train_attack);
    validate(c.optimizer);
    require(!c.evaluation.radii.empty(), ErrorKind::invalid_config, "evaluation: radius list must not be empty");
    for (std::size_t i = 0; i < c.evaluation.radii.size(); ++i) {
        require(c.evaluation.radii[i] >= 0.0, ErrorKind::invalid_config, "evaluation: radii must be >= 0");
        require(i == 0 || c.evaluation.radii[i] > c.evaluation.radii[i - 1], ErrorKind::invalid_config,
                "evaluation: radius list must be strictly increasing");
    }
    validate(c.evaluation.attack);
    require(c.evaluation.subsample >= 0, ErrorKind::invalid_config, "evaluation: subsample must be >= 0");
    for (std::size_t i = 0; i < c.bounds.radii.size(); ++i) {
        require(c.bounds.radii[i] >= 0.0, ErrorKind::invalid_config, "bounds: radii must be >= 0");
        require(i == 0 || c.bounds.radii[i] > c.bounds.radii[i - 1], ErrorKind::invalid_config,
                "bounds: radius list must be strictly increasing");
    }
    require(c.bounds.samples >= 1, ErrorKind::invalid_config, "bounds: samples must be >= 1");
    if (c.teacher.checkpoint.empty()) {
        validate(c.teacher.model);
        validate(c.teacher.optimizer);
        if (c.teacher.adversarial) validate(*c.teacher.adversarial);
    }
    if (c.student.checkpoint.empty()) validate(c.student.model);
    require(!c.output_dir.empty(), ErrorKind::invalid_config, "experiment: empty output_dir");
    if (c.validate_paths) {
        auto exists = [](const std::string& p, const std::string& what) {
            require(std::filesystem::exists(p), ErrorKind::invalid_config, what + " does not exist: " + p);
        };
        for (const auto& p : c.dataset.paths) exists(p, "dataset path");
        for (const auto& p : c.dataset.test_paths) exists(p, "dataset test path");
        if (!c.teacher.checkpoint.empty()) exists(c.teacher.checkpoint, "teacher checkpoint");
        if (!c.student.checkpoint.empty()) exists(c.student.checkpoint, "student checkpoint");
    }
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "experiment", {"schema", "name", "dataset", "teacher", "student", "variants", "optimizer",
                                         "train_attack", "evaluation", "bounds", "seeds", "output_dir"});
    require(j.contains("schema") && j.at("schema") == experiment_schema, ErrorKind::invalid_config,
            std::string("experiment: schema must be '") + experiment_schema + "'");
    ExperimentConfig c;
    detail::read_opt(j, "name", c.name, "experiment");
    require(j.contains("dataset"), ErrorKind::invalid_config, "experiment: missing 'dataset'");
    c.dataset = dataset_from_json(j.at("dataset"));

    require(j.contains("teacher"), ErrorKind::invalid_config, "experiment: missing 'teacher'");
    const auto& t = j.at("teacher");
    detail::check_keys(t, "teacher", {"checkpoint", "recipe"});
    require(t.contains("checkpoint") != t.contains("recipe"), ErrorKind::invalid_config,
            "teacher: exactly one of 'checkpoint' or 'recipe' required");
    if (t.contains("checkpoint")) {
        c.teacher.checkpoint = t.at("checkpoint").get<std::string>();
    } else {
        const auto& r = t.at("recipe");
        detail::check_keys(r, "teacher.recipe", {"model", "optimizer", "adversarial", "init_seed"});
        require(r.contains("model"), ErrorKind::invalid_config, "teacher.recipe: missing 'model'");
        c.teacher.model = model_spec_from_json(r.at("model"));
        if (r.contains("optimizer")) c.teacher.optimizer = optimizer_from_json(r.at("optimizer"));
        if (r.contains("adversarial") && !r.at("adversarial").is_null())
            c.teacher.adversarial = attack_from_json(r.at("adversarial"), "teacher.recipe.adversarial");
        detail::read_opt(r, "init_seed", c.teacher.init_seed, "teacher.recipe");
    }

    require(j.contains("student"), ErrorKind::invalid_config, "experiment: missing 'student'");
    const auto& s = j.at("student");
    detail::check_keys(s, "student", {"checkpoint", "model"});
    require(s.contains("checkpoint") != s.contains("model"), ErrorKind::invalid_config,
            "student: exactly one of 'checkpoint' or 'model' required");
    if (s.contains("checkpoint")) c.student.checkpoint = s.at("checkpoint").get<std::string>();
    else c.student.model = model_spec_from_json(s.at("model"));

    require(j.contains("variants") && j.at("variants").is_array(), ErrorKind::invalid_config,
            "experiment: 'variants' must be a list");
    for (const auto& v : j.at("variants")) c.variants.push_back(variant_from_json(v));
    if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"));
    if (j.contains("train_attack") && !j.at("train_attack").is_null())
        c.train_attack = attack_from_json(j.at("train_attack"), "train_attack");

    if (j.contains("evaluation")) {
        const auto& e = j.at("evaluation");
        detail::check_keys(e, "evaluation", {"radii", "attack", "subsample", "subsample_seed"});
        detail::read_opt(e, "radii", c.evaluation.radii, "evaluation");
        if (e.contains("attack")) c.evaluation.attack = attack_from_json(e.at("attack"), "evaluation.attack");
        detail::read_opt(e, "subsample", c.evaluation.subsample, "evaluation");
        detail::read_opt(e, "subsample_seed", c.evaluation.subsample_seed, "evaluation");
    }
    if (j.contains("bounds")) {
        const auto& b = j.at("bounds");
        detail::check_keys(b, "bounds", {"radii", "samples", "grid_resolution", "restarts", "steps", "seed"});
        detail::read_opt(b, "radii", c.bounds.radii, "bounds");
        detail::read_opt(b, "samples", c.bounds.samples, "bounds");
        detail::read_opt(b, "grid_resolution", c.bounds.budget.grid_resolution, "bounds");
        detail::read_opt(b, "restarts", c.bounds.budget.restarts, "bounds");
        detail::read_opt(b, "steps", c.bounds.budget.steps, "bounds");
        detail::read_opt(b, "seed", c.bounds.budget.seed, "bounds");
    }
    detail::read_opt(j, "seeds", c.seeds, "experiment");
    detail::read_opt(j, "output_dir", c.output_dir, "experiment");
    return c;
}

inline ExperimentConfig parse_experiment_config(const std::string& text, bool validate_paths = true) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::parse, std::string("config: ") + e.what());
    }
    ExperimentConfig c = experiment_from_json(j);
    c.validate_paths = validate_paths;
    validate(c);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path, bool validate_paths = true) {
    const auto bytes = read_file_bytes(path);
    return parse_experiment_config(std::string(bytes.begin(), bytes.end()), validate_paths);
}

inline std::string serialize(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

/// CIFAR-10 preset: the reference optimizer recipe verbatim, KD vs KDIGA
/// with lambda_iga = 10 / B, on a 4000-sample training subset.
inline ExperimentConfig cifar10_preset_config(const std::string& data_dir) {
    ExperimentConfig c;
    c.name = "cifar10-kd-vs-kdiga";
    c.dataset.kind = DatasetKind::cifar10_binary;
    c.dataset.paths = {data_dir};
    c.dataset.train_subset = 4000;
    c.teacher.model = {Family::cnn_relu, {32, 32, 3}, 10, 32, 2, 0, 1.0};
    c.teacher.optimizer = cifar10_preset();
    c.teacher.adversarial = AttackSpec{8.0 / 255.0, 2.0 / 255.0, 10, 0.0, 1.0, true, 1, 0, AttackObjective::cross_entropy};
    c.student.model = {Family::cnn_relu, {32, 32, 3}, 10, 16, 2, 0, 1.0};
    c.optimizer = cifar10_preset();
    c.variants = {VariantConfig{"KD", {Variant::KD, 0.5, 0.5, 0.0, 1.0, IgaAggregation::whole_batch_norm}, true},
                  VariantConfig{"KDIGA", {Variant::KDIGA, 0.5, 0.5, 10.0, 1.0, IgaAggregation::whole_batch_norm}, true}};
    c.evaluation.radii = {0.0, 1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0};
    c.evaluation.attack.steps = 20;
    c.evaluation.subsample = 1000;
    c.bounds.radii = {4.0 / 255.0};
    c.seeds = {0, 1, 2};
    c.output_dir = "runs/cifar10";
    return c;
}

}  // namespace kdiga

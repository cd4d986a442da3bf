// kdiga command-line front end.
//
//   kdiga experiment --config cfg.json [--output-dir DIR] [--force]
//   kdiga train      --config cfg.json --variant KDIGA --seed 0
//   kdiga attack     --config cfg.json --checkpoint student.ckpt --out report.json
//   kdiga analyze    --config cfg.json --student s.ckpt --teacher t.ckpt --out bounds.json
//   kdiga verify     --config cfg.json --model m.ckpt [--teacher t.ckpt] --suite all --out verify.json
//   kdiga plot       --reports reports.json --radii 0,0.1 --out plot.svg
//
// Any config field can be overridden with --set path.to.field=JSON; the
// dedicated flags are shorthands for common fields. Flags always win over
// the config file. Failures print one JSON error record on stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "kdiga/kdiga.hpp"

namespace {

using kdiga::ErrorKind;
using nlohmann::json;

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string output_dir;
    std::vector<std::uint64_t> seeds;
    std::vector<double> radii;
    int epochs = 0;
    double learning_rate = 0.0;
    int batch_size = 0;
    int subsample = -1;
    int steps = -1;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool need_config = true) {
    auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
    if (need_config) opt->required()->check(CLI::ExistingFile);
    cmd->add_option("--set", c.sets, "override a config field: path.to.field=JSON");
    cmd->add_option("--output-dir", c.output_dir, "output directory");
    cmd->add_option("--seeds", c.seeds, "seed list")->delimiter(',');
    cmd->add_option("--radii", c.radii, "evaluation radius ladder")->delimiter(',');
    cmd->add_option("--epochs", c.epochs, "optimizer epochs");
    cmd->add_option("--lr", c.learning_rate, "initial learning rate");
    cmd->add_option("--batch-size", c.batch_size, "batch size");
    cmd->add_option("--subsample", c.subsample, "evaluation subsample (0 = full test split)");
    cmd->add_option("--steps", c.steps, "evaluation PGD steps");
    cmd->add_flag("--quiet", c.quiet, "no progress log");
}

json parse_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return json(text);
    }
}

void set_path(json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    kdiga::require(eq != std::string::npos && eq > 0, ErrorKind::invalid_config, "--set expects path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    json* node = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        kdiga::require(!key.empty(), ErrorKind::invalid_config, "--set: empty path component in '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[key] = parse_value(assignment.substr(eq + 1));
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

kdiga::ExperimentConfig load_config(const Common& c, bool validate_paths = true) {
    const auto bytes = kdiga::read_file_bytes(c.config);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        kdiga::fail(ErrorKind::parse, c.config + ": " + e.what());
    }
    for (const auto& s : c.sets) set_path(j, s);
    if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
    if (!c.seeds.empty()) j["seeds"] = c.seeds;
    if (!c.radii.empty()) j["evaluation"]["radii"] = c.radii;
    if (c.epochs > 0) j["optimizer"]["epochs"] = c.epochs;
    if (c.learning_rate > 0.0) j["optimizer"]["learning_rate"] = c.learning_rate;
    if (c.batch_size > 0) j["optimizer"]["batch_size"] = c.batch_size;
    if (c.subsample >= 0) j["evaluation"]["subsample"] = c.subsample;
    if (c.steps >= 0) j["evaluation"]["attack"]["steps"] = c.steps;
    kdiga::ExperimentConfig cfg = kdiga::experiment_from_json(j);
    cfg.validate_paths = validate_paths;
    kdiga::validate(cfg);
    return cfg;
}

std::function<void(const std::string&)> logger(bool quiet) {
    if (quiet) return {};
    return [](const std::string& s) { std::cerr << "[kdiga] " << s << "\n"; };
}

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    kdiga::write_file_atomic(path, text);
}

kdiga::ZooClassifier load_model(const std::string& path) { return kdiga::load_checkpoint(path).model; }

json summary_json(const kdiga::ExperimentResult& r) {
    json j{{"output_dir", r.output_dir.string()}, {"skipped", r.skipped}, {"summary", json::array()}};
    for (const auto& s : r.summary) j["summary"].push_back(kdiga::to_json(s));
    return j;
}

int run(int argc, char** argv) {
    CLI::App app{"Knowledge distillation with input-gradient alignment"};
    app.require_subcommand(1);

    Common common;
    bool force = false;
    int workers = 1;

    auto* experiment = app.add_subcommand("experiment", "run a full (variant x seed) grid from a config");
    add_common(experiment, common);
    experiment->add_flag("--force", force, "rerun even if a complete manifest exists");
    experiment->add_option("--workers", workers, "cells trained concurrently");

    std::string variant_label;
    std::uint64_t train_seed = 0;
    auto* train = app.add_subcommand("train", "run one distillation cell");
    add_common(train, common);
    train->add_option("--variant", variant_label, "variant label from the config")->required();
    train->add_option("--seed", train_seed, "seed");
    train->add_flag("--force", force, "retrain even if outputs exist");

    std::string checkpoint, out, model_id;
    auto* attack = app.add_subcommand("attack", "evaluate a checkpoint over a radius ladder");
    add_common(attack, common);
    attack->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    attack->add_option("--out", out, "report path (default stdout)");
    attack->add_option("--model-id", model_id, "report model id (default: checkpoint file stem)");

    std::string student_path, teacher_path, method_name = "auto";
    std::vector<double> bound_radii;
    int samples = 0;
    auto* analyze = app.add_subcommand("analyze", "LLM / bound table for a student-teacher pair");
    add_common(analyze, common);
    analyze->add_option("--student", student_path, "student checkpoint")->required()->check(CLI::ExistingFile);
    analyze->add_option("--teacher", teacher_path, "teacher checkpoint")->required()->check(CLI::ExistingFile);
    analyze->add_option("--bound-radii", bound_radii, "LLM radii (default: config bounds.radii)")->delimiter(',');
    analyze->add_option("--samples", samples, "test points (default: config bounds.samples)");
    analyze->add_option("--method", method_name, "grid | ascent | auto")->check(CLI::IsMember({"grid", "ascent", "auto"}));
    analyze->add_option("--out", out, "output JSON (default stdout)");

    std::string suite = "all";
    double verify_delta = -1.0;
    auto* verify = app.add_subcommand("verify", "gradient-identity, bound-inequality and delta-robust suites");
    add_common(verify, common);
    verify->add_option("--model", student_path, "model checkpoint")->required()->check(CLI::ExistingFile);
    verify->add_option("--teacher", teacher_path, "teacher checkpoint (bound suite)")->check(CLI::ExistingFile);
    verify->add_option("--suite", suite, "gradient-identity | bound | delta-robust | all")
        ->check(CLI::IsMember({"gradient-identity", "bound", "delta-robust", "all"}));
    verify->add_option("--samples", samples, "test points (default: config bounds.samples)");
    verify->add_option("--delta", verify_delta, "bound radius (default: first positive evaluation radius)");
    verify->add_option("--out", out, "output JSON (default stdout)");

    std::string reports_path;
    std::vector<double> plot_radii;
    auto* plot = app.add_subcommand("plot", "grouped-bar figure of clean and robust accuracy");
    plot->add_option("--reports", reports_path, "reports.json, a report, or a list of reports")->required()->check(CLI::ExistingFile);
    plot->add_option("--radii", plot_radii, "radii to plot")->delimiter(',')->required();
    plot->add_option("--out", out, "SVG path; the table goes next to it with a .tsv extension")->required();
    plot->add_option("--title", model_id, "figure title");

    CLI11_PARSE(app, argc, argv);
    const auto log = logger(common.quiet);

    if (*experiment) {
        const auto cfg = load_config(common);
        kdiga::ExperimentOptions opts;
        opts.force = force;
        opts.workers = workers;
        opts.log = log;
        std::cout << summary_json(kdiga::run_experiment(cfg, opts)).dump(2) << "\n";
        return 0;
    }
    if (*train) {
        auto cfg = load_config(common);
        auto it = std::find_if(cfg.variants.begin(), cfg.variants.end(),
                               [&](const kdiga::VariantConfig& v) { return v.label == variant_label; });
        kdiga::require(it != cfg.variants.end(), ErrorKind::invalid_config, "train: no variant labelled '" + variant_label + "'");
        const kdiga::VariantConfig chosen = *it;
        cfg.variants = {chosen};
        cfg.seeds = {train_seed};
        if (common.output_dir.empty()) cfg.output_dir = cfg.output_dir + "/" + kdiga::cell_id(chosen, train_seed);
        kdiga::ExperimentOptions opts;
        opts.force = force;
        opts.log = log;
        std::cout << summary_json(kdiga::run_experiment(cfg, opts)).dump(2) << "\n";
        return 0;
    }

    if (*plot) {
        const auto bytes = kdiga::read_file_bytes(reports_path);
        json j;
        try {
            j = json::parse(bytes.begin(), bytes.end());
        } catch (const json::parse_error& e) {
            kdiga::fail(ErrorKind::parse, reports_path + ": " + e.what());
        }
        std::vector<kdiga::RobustnessReport> reports;
        if (j.is_object() && j.contains("summary")) {
            for (const auto& r : j.at("summary")) reports.push_back(kdiga::report_from_json(r));
        } else if (j.is_array()) {
            for (const auto& r : j) reports.push_back(kdiga::report_from_json(r));
        } else {
            reports.push_back(kdiga::report_from_json(j));
        }
        const auto result = model_id.empty() ? kdiga::emit_plot(reports, plot_radii) : kdiga::emit_plot(reports, plot_radii, model_id);
        write_output(out, result.svg);
        write_output(std::filesystem::path(out).replace_extension(".tsv").string(), result.table);
        return 0;
    }

    // Remaining verbs evaluate existing checkpoints on the config's dataset.
    const auto cfg = load_config(common, false);
    const kdiga::Dataset ds = kdiga::load_dataset(cfg.dataset);
    const kdiga::Batch test = kdiga::evaluation_split(ds.test, cfg.evaluation);

    if (*attack) {
        const auto model = load_model(checkpoint);
        const std::string id = model_id.empty() ? std::filesystem::path(checkpoint).stem().string() : model_id;
        const auto report = kdiga::evaluate(id, model, test, cfg.evaluation.radii, cfg.evaluation.attack);
        write_output(out, kdiga::to_json(report).dump(2) + "\n");
        return 0;
    }

    const int n_samples = samples > 0 ? samples : cfg.bounds.samples;
    const kdiga::Batch subset = kdiga::deterministic_subset(test, n_samples, cfg.bounds.budget.seed, "bound-samples");

    if (*analyze) {
        const auto student = load_model(student_path);
        const auto teacher = load_model(teacher_path);
        const auto radii = bound_radii.empty() ? cfg.bounds.radii : bound_radii;
        kdiga::require(!radii.empty(), ErrorKind::invalid_config, "analyze: no bound radii");
        kdiga::LlmMethod method = student.input_dim() <= 2 ? kdiga::LlmMethod::grid : kdiga::LlmMethod::ascent;
        if (method_name == "grid") method = kdiga::LlmMethod::grid;
        if (method_name == "ascent") method = kdiga::LlmMethod::ascent;
        const auto s_row = kdiga::bound_table_row(std::filesystem::path(student_path).stem().string(), student, teacher,
                                                  subset, radii, method, cfg.bounds.budget);
        const auto t_row = kdiga::bound_table_row(std::filesystem::path(teacher_path).stem().string(), teacher, teacher,
                                                  subset, radii, method, cfg.bounds.budget);
        json j{{"schema", "kdiga.bounds/1"}, {"rows", {kdiga::to_json(s_row), kdiga::to_json(t_row)}},
               {"table", kdiga::bounds_tsv({s_row, t_row})}};
        write_output(out, j.dump(2) + "\n");
        return 0;
    }

    if (*verify) {
        const auto model = load_model(student_path);
        json j{{"schema", "kdiga.verify/1"}};
        bool ok = true;
        if (suite == "gradient-identity" || suite == "all") {
            double worst = 0.0;
            for (Eigen::Index i = 0; i < subset.size(); ++i) {
                const auto r = kdiga::gradient_identity(model, subset.x.row(i).transpose(), subset.y[static_cast<std::size_t>(i)]);
                worst = std::max(worst, r.relative_residual);
            }
            const bool pass = worst < 1e-5;
            ok = ok && pass;
            j["gradient_identity"] = {{"samples", subset.size()}, {"max_relative_residual", worst}, {"pass", pass}};
        }
        double delta = verify_delta;
        if (delta < 0.0) {
            delta = 0.0;
            for (double r : cfg.evaluation.radii)
                if (r > 0.0) {
                    delta = r;
                    break;
                }
        }
        if (suite == "bound" || suite == "all") {
            kdiga::require(!teacher_path.empty() || suite == "all", ErrorKind::invalid_call, "verify: bound suite needs --teacher");
            if (!teacher_path.empty()) {
                const auto teacher = load_model(teacher_path);
                const auto rep = kdiga::verify_bound(model, teacher, subset, delta, 100, cfg.bounds.budget);
                const bool pass = rep.violations == 0;
                ok = ok && pass;
                j["bound"] = {{"delta", delta},
                              {"instances", rep.instances},
                              {"samples", rep.samples},
                              {"violations", rep.violations},
                              {"worst_margin", rep.worst_margin},
                              {"advisory", rep.advisory},
                              {"l2_phi_violations", rep.l2_phi_violations},
                              {"pass", pass}};
            }
        }
        if (suite == "delta-robust" || suite == "all") {
            json rows = json::array();
            std::size_t robust_count = 0;
            for (Eigen::Index i = 0; i < subset.size(); ++i) {
                const auto r = kdiga::check_delta_robust(model, subset.x.row(i).transpose(), delta, 41, false,
                                                         kdiga::substream_seed(cfg.bounds.budget.seed, "verify", static_cast<std::uint64_t>(i)));
                robust_count += r.robust;
                rows.push_back({{"index", i}, {"robust", r.robust}, {"points_checked", r.points_checked}, {"exhaustive", r.exhaustive}});
            }
            j["delta_robust"] = {{"delta", delta}, {"robust", robust_count}, {"samples", subset.size()}, {"points", rows}};
        }
        j["pass"] = ok;
        write_output(out, j.dump(2) + "\n");
        return ok ? 0 : 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const kdiga::Error& e) {
        std::cerr << json{{"error", {{"kind", std::string(kdiga::to_string(e.kind()))}, {"message", e.what()}}}}.dump() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << "\n";
        return 3;
    }
}

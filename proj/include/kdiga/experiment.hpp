#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdiga/analysis.hpp"
#include "kdiga/checkpoint.hpp"
#include "kdiga/config.hpp"
#include "kdiga/data.hpp"
#include "kdiga/distiller.hpp"
#include "kdiga/evaluate.hpp"
#include "kdiga/hashing.hpp"
#include "kdiga/plot.hpp"

namespace kdiga {

inline constexpr const char* manifest_schema = "kdiga.manifest/1";
inline constexpr const char* report_set_schema = "kdiga.report-set/1";

// ---- manifest ---------------------------------------------------------------

struct ManifestEntry {
    std::string path;  // relative to the output directory, '/' separated
    std::string sha256;
    std::uintmax_t bytes = 0;
};

struct Manifest {
    std::string name;
    std::vector<std::uint64_t> seeds;
    std::vector<ManifestEntry> artifacts;
    bool complete = false;
};

inline nlohmann::json to_json(const Manifest& m) {
    nlohmann::json arts = nlohmann::json::array();
    for (const auto& a : m.artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
    return {{"schema", manifest_schema},
            {"name", m.name},
            {"seeds", m.seeds},
            {"substreams", {"data", "init", "attack", "schedule"}},
            {"complete", m.complete},
            {"artifacts", arts}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
    require(j.value("schema", "") == manifest_schema, ErrorKind::parse, "manifest: unexpected schema");
    Manifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        m.complete = j.at("complete").get<bool>();
        for (const auto& a : j.at("artifacts"))
            m.artifacts.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>(),
                                   a.at("bytes").get<std::uintmax_t>()});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("manifest: ") + e.what());
    }
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return manifest_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::parse, "manifest: " + std::string(e.what()));
    }
}

/// Paths whose content no longer matches the manifest (missing files included).
inline std::vector<std::string> verify_manifest(const std::filesystem::path& root, const Manifest& m) {
    std::vector<std::string> bad;
    for (const auto& a : m.artifacts) {
        const auto p = root / a.path;
        if (!std::filesystem::exists(p) || sha256_file(p) != a.sha256) bad.push_back(a.path);
    }
    return bad;
}

// ---- experiment -------------------------------------------------------------

struct ExperimentOptions {
    bool force = false;
    int workers = 1;  // cells trained concurrently
    std::function<void(const std::string&)> log;
};

struct ExperimentResult {
    std::filesystem::path output_dir;
    bool skipped = false;  // an existing complete manifest made this run a no-op
    std::vector<RobustnessReport> reports;  // one per (variant, seed), variant-major
    std::vector<RobustnessReport> summary;  // seed-averaged, one per variant in config order
    std::vector<BoundTableRow> bounds;      // one per (variant, seed)
    RobustnessReport teacher;
    Manifest manifest;
};

inline std::string cell_id(const VariantConfig& v, std::uint64_t seed) { return v.label + "-seed" + std::to_string(seed); }

inline nlohmann::json to_json(const BoundTableRow& r) {
    return {{"model_id", r.model_id}, {"radii", r.radii},   {"llm", r.llm},         {"ce", r.ce},
            {"grad_gap", r.grad_gap}, {"method", to_string(r.method)}, {"samples", r.samples}};
}

inline BoundTableRow bound_row_from_json(const nlohmann::json& j) {
    BoundTableRow r;
    r.model_id = j.at("model_id").get<std::string>();
    r.radii = j.at("radii").get<std::vector<double>>();
    r.llm = j.at("llm").get<std::vector<double>>();
    r.ce = j.at("ce").get<double>();
    r.grad_gap = j.at("grad_gap").get<double>();
    r.method = j.at("method").get<std::string>() == "grid" ? LlmMethod::grid : LlmMethod::ascent;
    r.samples = j.at("samples").get<std::size_t>();
    return r;
}

inline std::string bounds_tsv(const std::vector<BoundTableRow>& rows) {
    std::string out = "model_id\tradius\tllm\tce\tgrad_gap_l2\tmethod\tsamples\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.radii.size(); ++i) {
            out += r.model_id + "\t" + detail::fmt("%.17g", r.radii[i]) + "\t" + detail::fmt("%.17g", r.llm[i]) + "\t" +
                   detail::fmt("%.17g", r.ce) + "\t" + detail::fmt("%.17g", r.grad_gap) + "\t" + to_string(r.method) +
                   "\t" + std::to_string(r.samples) + "\n";
        }
    }
    return out;
}

/// Trains (or loads) a teacher following the config's teacher source.
inline ZooClassifier prepare_teacher(const ExperimentConfig& c, const Dataset& ds, const std::filesystem::path& dir,
                                     const std::function<void(const std::string&)>& log) {
    if (!c.teacher.checkpoint.empty()) {
        if (log) log("teacher: loading " + c.teacher.checkpoint);
        return load_checkpoint(c.teacher.checkpoint).model;
    }
    const auto ckpt = dir / "teacher.ckpt";
    if (std::filesystem::exists(ckpt)) {
        if (log) log("teacher: reusing " + ckpt.string());
        return load_checkpoint(ckpt).model;
    }
    std::filesystem::create_directories(dir / "state");
    TrainOptions opts;
    opts.checkpoint_dir = dir / "state";
    opts.checkpoint_every = 1;
    opts.diagnostics_dir = dir;
    opts.log = log;
    if (std::filesystem::exists(dir / "state" / "last.state")) {
        opts.resume_from = dir / "state" / "last.state";
        if (log) log("teacher: partial run found, resuming from last checkpoint " + opts.resume_from.string());
    }
    ZooClassifier init = build_model(c.teacher.model, substream_seed(c.teacher.init_seed, "init"));
    TrainResult res = c.teacher.adversarial
                          ? adversarial_train(std::move(init), ds.train, *c.teacher.adversarial, c.teacher.optimizer, opts)
                          : standard_train(std::move(init), ds.train, c.teacher.optimizer, opts);
    write_file_atomic(dir / "history.jsonl", res.history.to_jsonl(false));
    save_checkpoint(ckpt, res.model);
    std::filesystem::remove_all(dir / "state");
    return std::move(res.model);
}

namespace detail {

inline void collect_artifacts(const std::filesystem::path& root, const std::filesystem::path& dir,
                              std::vector<ManifestEntry>& out) {
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_directory()) {
            if (entry.path().filename() == "state") continue;
            collect_artifacts(root, entry.path(), out);
        } else if (entry.is_regular_file()) {
            const auto rel = std::filesystem::relative(entry.path(), root).generic_string();
            if (rel == "manifest.json" || rel.find(".tmp") != std::string::npos) continue;
            out.push_back({rel, sha256_file(entry.path()), entry.file_size()});
        }
    }
}

struct CellOutcome {
    RobustnessReport report;
    BoundTableRow bound;
};

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& config, const ExperimentOptions& options = {}) {
    validate(config);
    const auto& log = options.log;
    std::mutex log_mutex;
    auto say = [&](const std::string& s) {
        if (!log) return;
        std::lock_guard<std::mutex> lock(log_mutex);
        log(s);
    };

    ExperimentResult result;
    result.output_dir = config.output_dir;
    const std::filesystem::path root = config.output_dir;
    const std::string snapshot = serialize(config);

    if (std::filesystem::exists(root / "config.json") && !options.force) {
        const auto prev = read_file_bytes(root / "config.json");
        require(std::string(prev.begin(), prev.end()) == snapshot, ErrorKind::invalid_config,
                "experiment: " + root.string() + " holds a different experiment config; use force to overwrite");
    }
    if (options.force && std::filesystem::exists(root)) {
        say("force: clearing " + root.string());
        std::filesystem::remove_all(root);
    }
    if (std::filesystem::exists(root / "manifest.json")) {
        Manifest m = load_manifest(root / "manifest.json");
        if (m.complete && verify_manifest(root, m).empty()) {
            say("manifest complete and verified, nothing to do: " + (root / "manifest.json").string());
            const auto bytes = read_file_bytes(root / "reports.json");
            const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
            result.skipped = true;
            result.teacher = report_from_json(j.at("teacher"));
            for (const auto& r : j.at("reports")) result.reports.push_back(report_from_json(r));
            for (const auto& r : j.at("summary")) result.summary.push_back(report_from_json(r));
            for (const auto& r : j.at("bounds")) result.bounds.push_back(bound_row_from_json(r));
            result.manifest = std::move(m);
            return result;
        }
        say("manifest present but incomplete or stale; continuing the run");
    }

    std::filesystem::create_directories(root);
    write_file_atomic(root / "config.json", snapshot);

    const Dataset ds = load_dataset(config.dataset);
    const Batch test = evaluation_split(ds.test, config.evaluation);
    say("dataset " + ds.name + ": " + std::to_string(ds.train.size()) + " train, " + std::to_string(test.size()) +
        " evaluation samples");

    const ZooClassifier teacher = prepare_teacher(config, ds, root / "teacher", say);
    result.teacher = evaluate("teacher", teacher, test, config.evaluation.radii, config.evaluation.attack);
    write_file_atomic(root / "teacher" / "report.json", to_json(result.teacher).dump(2) + "\n");

    std::optional<ZooClassifier> pretrained;
    if (!config.student.checkpoint.empty()) pretrained = load_checkpoint(config.student.checkpoint).model;

    struct Cell {
        const VariantConfig* variant;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (const auto& v : config.variants)
        for (std::uint64_t s : config.seeds) cells.push_back({&v, s});

    const Batch bound_batch = deterministic_subset(test, config.bounds.samples, config.bounds.budget.seed, "bound-samples");
    const LlmMethod bound_method = teacher.input_dim() <= 2 ? LlmMethod::grid : LlmMethod::ascent;

    auto run_cell = [&](const Cell& cell) -> detail::CellOutcome {
        const std::string id = cell_id(*cell.variant, cell.seed);
        const auto dir = root / "cells" / id;
        std::filesystem::create_directories(dir);
        ZooClassifier student = [&] {
            if (std::filesystem::exists(dir / "student.ckpt")) {
                say(id + ": reusing trained student");
                return load_checkpoint(dir / "student.ckpt").model;
            }
            OptimizerConfig opt = config.optimizer;
            opt.seed = substream_seed(cell.seed, "schedule");
            std::optional<AttackSpec> attack;
            if (is_adversarial(cell.variant->loss.variant)) {
                attack = *config.train_attack;
                attack->seed = substream_seed(cell.seed, "attack");
            }
            TrainOptions to;
            to.checkpoint_dir = dir / "state";
            to.checkpoint_every = 1;
            to.diagnostics_dir = dir;
            to.log = [&, id](const std::string& s) { say(id + ": " + s); };
            std::filesystem::create_directories(to.checkpoint_dir);
            if (std::filesystem::exists(to.checkpoint_dir / "last.state")) {
                to.resume_from = to.checkpoint_dir / "last.state";
                say(id + ": partial run found, resuming from last checkpoint " + to.resume_from.string());
            }
            ZooClassifier init = pretrained ? *pretrained : build_model(config.student.model, substream_seed(cell.seed, "init"));
            TrainResult res = train_distill(&teacher, std::move(init), ds.train,
                                            effective_loss(*cell.variant, config.optimizer.batch_size), opt, attack, to);
            write_file_atomic(dir / "history.jsonl", res.history.to_jsonl(false));
            save_checkpoint(dir / "student.ckpt", res.model);
            std::filesystem::remove_all(to.checkpoint_dir);
            say(id + ": trained");
            return std::move(res.model);
        }();
        detail::CellOutcome out;
        out.report = evaluate(id, student, test, config.evaluation.radii, config.evaluation.attack);
        out.report.teacher_clean_accuracy = result.teacher.clean_accuracy;
        out.report.teacher_robust = result.teacher.robust;
        write_file_atomic(dir / "report.json", to_json(out.report).dump(2) + "\n");
        if (!config.bounds.radii.empty()) {
            out.bound = bound_table_row(id, student, teacher, bound_batch, config.bounds.radii, bound_method, config.bounds.budget);
        }
        return out;
    };

    std::vector<detail::CellOutcome> outcomes(cells.size());
    const std::size_t workers = static_cast<std::size_t>(std::max(1, options.workers));
    for (std::size_t start = 0; start < cells.size(); start += workers) {
        std::vector<std::future<detail::CellOutcome>> futures;
        const std::size_t end = std::min(cells.size(), start + workers);
        for (std::size_t i = start; i < end; ++i)
            futures.push_back(std::async(workers == 1 ? std::launch::deferred : std::launch::async, run_cell, cells[i]));
        for (std::size_t i = start; i < end; ++i) outcomes[i] = futures[i - start].get();
    }

    for (auto& o : outcomes) {
        result.reports.push_back(o.report);
        if (!config.bounds.radii.empty()) result.bounds.push_back(o.bound);
    }
    for (const auto& v : config.variants) {
        std::vector<RobustnessReport> reps;
        for (std::size_t i = 0; i < cells.size(); ++i)
            if (cells[i].variant == &v) reps.push_back(result.reports[i]);
        result.summary.push_back(average_reports(v.label, reps));
    }

    nlohmann::json reports_json{{"schema", report_set_schema}, {"teacher", to_json(result.teacher)}};
    reports_json["reports"] = nlohmann::json::array();
    for (const auto& r : result.reports) reports_json["reports"].push_back(to_json(r));
    reports_json["summary"] = nlohmann::json::array();
    for (const auto& r : result.summary) reports_json["summary"].push_back(to_json(r));
    reports_json["bounds"] = nlohmann::json::array();
    for (const auto& b : result.bounds) reports_json["bounds"].push_back(to_json(b));
    write_file_atomic(root / "reports.json", reports_json.dump(2) + "\n");
    write_file_atomic(root / "bounds.tsv", bounds_tsv(result.bounds));

    const PlotOutput plot = emit_plot(result.summary, config.evaluation.radii);
    write_file_atomic(root / "plot.svg", plot.svg);
    write_file_atomic(root / "plot.tsv", plot.table);

    Manifest m;
    m.name = config.name;
    m.seeds = config.seeds;
    m.complete = true;
    detail::collect_artifacts(root, root, m.artifacts);
    std::sort(m.artifacts.begin(), m.artifacts.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
    write_file_atomic(root / "manifest.json", to_json(m).dump(2) + "\n");
    result.manifest = std::move(m);
    say("wrote " + (root / "manifest.json").string());
    return result;
}

}  // namespace kdiga

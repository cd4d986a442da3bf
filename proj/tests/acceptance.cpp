// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// if any criterion fails.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "kdiga/kdiga.hpp"

using namespace kdiga;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

FeasibilityReport g_feasibility;  // every adversarial example produced below

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

Vector random_vector(Rng& rng, Eigen::Index n, double lo = 0.0, double hi = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = uniform(rng, lo, hi);
    return v;
}

Batch random_batch(Rng& rng, int n, int dim, int classes) {
    Batch b;
    b.x.resize(n, dim);
    for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x(i) = uniform(rng, 0.0, 1.0);
    for (int i = 0; i < n; ++i) b.y.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(classes)));
    return b;
}

ModelZooSpec random_spec(Rng& rng, int classes) {
    switch (rng() % 4) {
        case 0: return {Family::linear, {2 + static_cast<int>(rng() % 8)}, classes, 0, 1, 0, 1.0};
        case 1: return {Family::mlp_relu, {2 + static_cast<int>(rng() % 8)}, classes, 4 + static_cast<int>(rng() % 12), 1 + static_cast<int>(rng() % 2), 0, 1.0};
        case 2: return {Family::cnn_relu, {6, 6, 1}, classes, 3, 1, 0, 1.0};
        default: return {Family::tiny_attention, {3, 2}, classes, 4, 1, 0, 1.0};
    }
}

std::string slurp(const fs::path& p) {
    const auto b = read_file_bytes(p);
    return {b.begin(), b.end()};
}

// ---- 1 ---------------------------------------------------------------------------

Outcome gradient_identity_criterion() {
    Rng rng = make_rng(1, "acceptance-identity");
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const int classes = 2 + static_cast<int>(rng() % 5);
        const auto model = build_model(random_spec(rng, classes), rng());
        const Vector x = random_vector(rng, model.input_dim());
        const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
        const auto r = gradient_identity(model, x, y);
        worst = std::max(worst, (r.autodiff_gradient - r.identity_gradient).norm() / r.identity_gradient.norm());
    }
    return {worst < 1e-5, "max relative residual " + fmt(worst) + " over 100 triples"};
}

// ---- 2 ---------------------------------------------------------------------------

Outcome finite_difference_criterion() {
    const double h = 1e-4;
    Rng rng = make_rng(2, "acceptance-fd");
    double worst_input = 0.0;
    for (int k = 0; k < 10; ++k) {
        const ModelZooSpec spec = k % 2 == 0 ? ModelZooSpec{Family::tiny_attention, {3, 2}, 3, 4, 1, 0, 1.0}
                                             : ModelZooSpec{Family::linear, {5}, 4, 0, 1, 0, 1.0};
        const auto model = build_model(spec, 500 + static_cast<std::uint64_t>(k));
        const Vector x = random_vector(rng, model.input_dim(), 0.1, 0.9);
        const int y = k % spec.num_classes;
        const Vector g = input_gradient_ce(model, x.transpose(), Labels{y}).row(0).transpose();
        Vector num(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            Vector p = x, m = x;
            p(i) += h;
            m(i) -= h;
            num(i) = (cross_entropy(model.logits(p.transpose()).row(0).transpose(), y) -
                      cross_entropy(model.logits(m.transpose()).row(0).transpose(), y)) / (2 * h);
        }
        worst_input = std::max(worst_input, (g - num).norm() / num.norm());
    }

    double worst_iga = 0.0;
    for (int k = 0; k < 3; ++k) {
        ZooClassifier student = build_model({Family::tiny_attention, {2, 2}, 3, 4, 1, 0, 1.0}, 600 + static_cast<std::uint64_t>(k));
        const ZooClassifier teacher = build_model({Family::tiny_attention, {2, 2}, 3, 4, 1, 0, 1.0}, 700 + static_cast<std::uint64_t>(k));
        const Batch batch = random_batch(rng, 5, 4, 3);
        const DistillLossConfig c{Variant::KDIGA, 0.0, 0.0, 1.0, 1.0, IgaAggregation::whole_batch_norm};
        const auto params = student.parameter_vars(true);
        const LossGraph g = build_loss_graph(student, params, &teacher, batch, c);
        Vector analytic(student.parameter_count());
        Eigen::Index n = 0;
        for (const auto& v : ad::grad(g.total, params))
            for (Eigen::Index r = 0; r < v.rows(); ++r)
                for (Eigen::Index col = 0; col < v.cols(); ++col) analytic(n++) = v.value()(r, col);
        const Vector theta = student.flat_parameters();
        Vector num(theta.size());
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            Vector p = theta, m = theta;
            p(i) += h;
            m(i) -= h;
            student.set_flat_parameters(p);
            const double fp = compute_loss(student, &teacher, batch, c).iga_term;
            student.set_flat_parameters(m);
            const double fm = compute_loss(student, &teacher, batch, c).iga_term;
            num(i) = (fp - fm) / (2 * h);
        }
        worst_iga = std::max(worst_iga, (analytic - num).norm() / num.norm());
    }
    return {worst_input < 1e-4 && worst_iga < 1e-3,
            "input-gradient rel err " + fmt(worst_input) + ", IGA theta-gradient rel err " + fmt(worst_iga)};
}

// ---- 3 ---------------------------------------------------------------------------

double corner_max(const Classifier& m, const Vector& x, int y, double eps) {
    const int d = static_cast<int>(x.size());
    double best = -std::numeric_limits<double>::infinity();
    for (long mask = 0; mask < (1L << d); ++mask) {
        Matrix p(1, d);
        for (int j = 0; j < d; ++j) p(0, j) = std::clamp(((mask >> j) & 1) ? x(j) + eps : x(j) - eps, 0.0, 1.0);
        best = std::max(best, cross_entropy(m.logits(p).row(0).transpose(), y));
    }
    return best;
}

Outcome pgd_oracle_criterion() {
    Rng rng = make_rng(3, "acceptance-pgd");
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
        const int d = 1 + static_cast<int>(rng() % 10);
        const auto model = build_model({Family::linear, {d}, 2, 0, 1, 0, 1.0}, rng());
        const Batch b = random_batch(rng, 4, d, 2);
        const double eps = uniform(rng, 0.01, 0.3);
        const AttackSpec spec{eps, eps, 1, 0.0, 1.0, false, 1, 0, AttackObjective::cross_entropy};
        const auto adv = pgd_attack(model, b, spec);
        g_feasibility += check_feasibility(b.x, adv.x_adv, eps);
        for (Eigen::Index i = 0; i < b.size(); ++i) {
            const double oracle = corner_max(model, b.x.row(i).transpose(), b.y[static_cast<std::size_t>(i)], eps);
            worst = std::max(worst, std::abs(adv.loss(i) - oracle));
        }
    }
    return {worst <= 1e-9, "max |PGD - corner max| " + fmt(worst) + " over 50 models, D <= 10"};
}

// ---- 4 ---------------------------------------------------------------------------

Outcome llm_oracle_criterion() {
    Rng rng = make_rng(4, "acceptance-llm");
    double worst_rel = 0.0;
    bool zero_exact = true;
    bool monotone = true;
    int instances = 0;
    for (int k = 0; k < 10; ++k) {
        const ModelZooSpec spec{k % 2 ? Family::mlp_relu : Family::tiny_attention, {2}, 3, 8, 1 + k % 2, 0, 1.0};
        const auto model = build_model(spec, 800 + static_cast<std::uint64_t>(k));
        for (int j = 0; j < 3; ++j) {
            const Vector x = random_vector(rng, 2, 0.1, 0.9);
            const int y = static_cast<int>(rng() % 3);
            zero_exact = zero_exact && estimate_llm(model, x, y, 0.0, LlmMethod::grid).gamma == 0.0 &&
                         estimate_llm(model, x, y, 0.0, LlmMethod::ascent).gamma == 0.0;
            double prev = 0.0;
            for (double d : {1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255}) {
                const double g = estimate_llm(model, x, y, d, LlmMethod::grid).gamma;
                monotone = monotone && g >= prev;
                prev = g;
            }
            for (double d : {4.0 / 255, 8.0 / 255}) {
                const double g = estimate_llm(model, x, y, d, LlmMethod::grid).gamma;
                const double a = estimate_llm(model, x, y, d, LlmMethod::ascent).gamma;
                worst_rel = std::max(worst_rel, std::abs(g - a) / std::max(g, a));
                ++instances;
            }
        }
    }
    return {worst_rel <= 0.05 && zero_exact && monotone,
            "grid vs ascent max rel diff " + fmt(worst_rel) + " over " + std::to_string(instances) +
                " instances; LLM(0)=0 " + (zero_exact ? "yes" : "no") + "; monotone " + (monotone ? "yes" : "no")};
}

// ---- 5 ---------------------------------------------------------------------------

Outcome bound_criterion() {
    std::size_t violations = 0, samples = 0;
    double worst_margin = std::numeric_limits<double>::infinity();
    const Batch data = make_moons(5, 0.1, 5);
    LlmBudget budget;
    budget.grid_resolution = 101;
    for (std::uint64_t p = 0; p < 20; ++p) {
        const auto student = build_model({Family::mlp_relu, {2}, 2, 8, 1, 0, 1.0}, 900 + p);
        const auto teacher = build_model({Family::mlp_relu, {2}, 2, 16, 2, 0, 1.0}, 1000 + p);
        budget.seed = p;
        const auto rep = verify_bound(student, teacher, data, p % 2 ? 8.0 / 255 : 0.1, 1000, budget);
        violations += rep.violations;
        samples += rep.samples;
        worst_margin = std::min(worst_margin, rep.worst_margin);
    }
    return {violations == 0 && samples == 20u * 5u * 1000u,
            std::to_string(violations) + " violations in " + std::to_string(samples) +
                " sampled perturbations (20 pairs); tightest margin " + fmt(worst_margin)};
}

// ---- 6 ---------------------------------------------------------------------------

Outcome perfect_student_criterion() {
    const Batch data = make_moons(120, 0.1, 6);
    OptimizerConfig o;
    o.epochs = 20;
    o.batch_size = 30;
    o.seed = 6;
    const auto teacher = standard_train(build_model({Family::mlp_relu, {2}, 2, 12, 1, 0, 1.0}, 6), data, o).model;
    const ZooClassifier student = teacher;
    bool zero_every_batch = true;
    const DistillLossConfig c{Variant::KDIGA, 0.5, 0.5, 1.0, 1.0, IgaAggregation::whole_batch_norm};
    for (Eigen::Index start = 0; start < data.size(); start += o.batch_size) {
        std::vector<std::size_t> rows;
        for (Eigen::Index i = start; i < std::min<Eigen::Index>(start + o.batch_size, data.size()); ++i) rows.push_back(static_cast<std::size_t>(i));
        const auto b = compute_loss(student, &teacher, select_rows(data, rows), c);
        zero_every_batch = zero_every_batch && b.kl_term == 0.0 && b.iga_term == 0.0;
    }
    const auto rep = perfect_student_check(student, teacher, data, {}, {0.0, 0.01, 0.02, 0.05, 0.1}, 41);
    return {zero_every_batch && rep.ladder_checked && rep.ladders_identical,
            std::string("KL = IGA = 0 on every batch: ") + (zero_every_batch ? "yes" : "no") +
                "; ladders identical over " + std::to_string(data.size()) + " points: " +
                (rep.ladders_identical ? "yes" : "no")};
}

// ---- 7 and 8 -----------------------------------------------------------------------

struct DigitsRun {
    ExperimentResult result;
    double seconds = 0.0;
};

const RobustnessReport* find_summary(const ExperimentResult& r, const std::string& id) {
    for (const auto& s : r.summary)
        if (s.model_id == id) return &s;
    return nullptr;
}

Outcome trend_criterion(const DigitsRun& run, double radius) {
    const auto* kd = find_summary(run.result, "KD");
    const auto* kg = find_summary(run.result, "KDIGA");
    if (!kd || !kg) return {false, "missing KD or KDIGA summary"};
    const double gain = kg->robust_at(radius) - kd->robust_at(radius);
    const double clean_gap = std::abs(kg->clean_accuracy - kd->clean_accuracy);
    std::ostringstream s;
    s << "digits eps=" << fmt(radius) << ": KD clean " << fmt(kd->clean_accuracy) << " robust "
      << fmt(kd->robust_at(radius)) << ", KDIGA clean " << fmt(kg->clean_accuracy) << " robust "
      << fmt(kg->robust_at(radius)) << " (3 seeds); robust gain " << fmt(100 * gain) << " pp, clean gap "
      << fmt(100 * clean_gap) << " pp; teacher robust " << fmt(run.result.teacher.robust_at(radius)) << "; "
      << fmt(run.seconds) << " s";
    return {gain >= 0.10 && clean_gap <= 0.03, s.str()};
}

Outcome bound_trend_criterion(const DigitsRun& run) {
    double gap[2] = {0, 0}, llm[2] = {0, 0};
    int n[2] = {0, 0};
    for (const auto& row : run.result.bounds) {
        const int k = row.model_id.rfind("KDIGA-", 0) == 0 ? 1 : row.model_id.rfind("KD-", 0) == 0 ? 0 : -1;
        if (k < 0 || row.llm.empty() || row.method != LlmMethod::ascent) continue;
        gap[k] += row.grad_gap;
        llm[k] += row.llm.back();
        ++n[k];
    }
    if (n[0] == 0 || n[1] == 0) return {false, "missing bound rows"};
    for (int k = 0; k < 2; ++k) gap[k] /= n[k], llm[k] /= n[k];
    return {gap[1] < gap[0] && llm[1] < llm[0],
            "||g_s - g_t||_2 KD " + fmt(gap[0]) + " vs KDIGA " + fmt(gap[1]) + "; ascent LLM KD " + fmt(llm[0]) +
                " vs KDIGA " + fmt(llm[1])};
}

// ---- 9 ---------------------------------------------------------------------------

bool same_files(const fs::path& a, const fs::path& b, const std::vector<std::string>& skip, std::string& why) {
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), a).generic_string();
        if (std::find(skip.begin(), skip.end(), rel) != skip.end()) continue;
        if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) {
            why = rel + " differs";
            return false;
        }
        ++compared;
    }
    if (compared == 0) {
        why = "no files compared";
        return false;
    }
    return true;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(KDIGA_CLI) + " " + args + " >> " + log.string() + " 2>&1";
    return std::system(cmd.c_str());
}

Outcome determinism_criterion(const fs::path& work) {
    // KDIGA with a zero coefficient against KD, per seed.
    DatasetDescriptor d;
    d.kind = DatasetKind::digits_8x8;
    d.paths = {std::string(KDIGA_SOURCE_DIR) + "/data/digits.csv"};
    const Dataset ds = load_dataset(d);
    OptimizerConfig to;
    to.learning_rate = 0.05;
    to.epochs = 3;
    to.batch_size = 64;
    const auto teacher = standard_train(build_model({Family::mlp_relu, {64}, 10, 32, 1, 0, 1.0}, 1), ds.train, to).model;
    bool bitwise = true;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        OptimizerConfig so = to;
        so.seed = substream_seed(seed, "schedule");
        const auto init = build_model({Family::mlp_relu, {64}, 10, 16, 1, 0, 1.0}, substream_seed(seed, "init"));
        const DistillLossConfig kd{Variant::KD, 0.5, 0.5, 0.0, 1.0, IgaAggregation::whole_batch_norm};
        DistillLossConfig kg = kd;
        kg.variant = Variant::KDIGA;
        const auto a = train_distill(&teacher, init, ds.train, kd, so);
        const auto b = train_distill(&teacher, init, ds.train, kg, so);
        bitwise = bitwise && a.model.flat_parameters() == b.model.flat_parameters() &&
                  parameter_hash(a.model) == parameter_hash(b.model);
    }

    // Every CLI verb, run twice into separate locations.
    const fs::path dir = work / "cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path log = dir / "cli.log";
    const std::string cfg = "--config " + std::string(KDIGA_SOURCE_DIR) + "/configs/moons.json --seeds 0,1 --quiet";
    std::vector<std::string> failures;
    auto check = [&](const std::string& verb, bool ok, const std::string& why) {
        if (!ok) failures.push_back(verb + ": " + why);
    };
    // Both runs write to the same paths so that config.json and the manifest
    // compare byte-for-byte as well; each run is moved aside afterwards.
    const auto exp = dir / "exp";
    const auto train = dir / "train";
    const auto ckpt = (exp / "cells" / "KD-seed0" / "student.ckpt").string();
    const auto tckpt = (exp / "teacher" / "teacher.ckpt").string();
    for (const char* r : {"a", "b"}) {
        const auto out = dir / r;
        fs::create_directories(out);
        if (run_cli("experiment " + cfg + " --output-dir " + exp.string(), log) != 0) check("experiment", false, "exit status");
        if (run_cli("train " + cfg + " --variant KDIGA --seed 1 --output-dir " + train.string(), log) != 0) check("train", false, "exit status");
        if (run_cli("attack " + cfg + " --checkpoint " + ckpt + " --out " + (out / "attack.json").string(), log) != 0) check("attack", false, "exit status");
        if (run_cli("analyze " + cfg + " --student " + ckpt + " --teacher " + tckpt + " --out " + (out / "analyze.json").string(), log) != 0) check("analyze", false, "exit status");
        if (run_cli("verify " + cfg + " --suite all --samples 10 --model " + ckpt + " --teacher " + tckpt + " --out " + (out / "verify.json").string(), log) != 0) check("verify", false, "exit status");
        if (run_cli("plot --reports " + (exp / "reports.json").string() + " --radii 0.02,0.05 --out " + (out / "plot.svg").string(), log) != 0) check("plot", false, "exit status");
        if (fs::exists(exp)) fs::rename(exp, out / "exp");
        if (fs::exists(train)) fs::rename(train, out / "train");
    }
    std::string why;
    check("experiment", same_files(dir / "a" / "exp", dir / "b" / "exp", {}, why), why);
    check("train", same_files(dir / "a" / "train", dir / "b" / "train", {}, why), why);
    for (const char* f : {"attack.json", "analyze.json", "verify.json", "plot.svg", "plot.tsv"}) {
        const bool ok = fs::exists(dir / "a" / f) && slurp(dir / "a" / f) == slurp(dir / "b" / f);
        check(f, ok, "differs or missing");
    }
    // Attack feasibility from the CLI-produced reports.
    if (fs::exists(dir / "a" / "exp" / "reports.json")) {
        const auto j = nlohmann::json::parse(slurp(dir / "a" / "exp" / "reports.json"));
        for (const auto& r : j.at("reports")) g_feasibility += report_from_json(r).feasibility;
        g_feasibility += report_from_json(j.at("teacher")).feasibility;
    }
    std::string detail = std::string("KDIGA(lambda=0) == KD bitwise for 3 seeds: ") + (bitwise ? "yes" : "no") +
                         "; CLI reruns (experiment, train, attack, analyze, verify, plot) ";
    if (failures.empty()) detail += "byte-identical";
    else
        for (const auto& f : failures) detail += "[" + f + "] ";
    return {bitwise && failures.empty(), detail};
}

// ---- 10 --------------------------------------------------------------------------

Outcome feasibility_criterion(const DigitsRun& run) {
    for (const auto& r : run.result.reports) g_feasibility += r.feasibility;
    g_feasibility += run.result.teacher.feasibility;
    // Random-start, multi-restart PGD on the digits teacher as well.
    DatasetDescriptor d;
    d.kind = DatasetKind::digits_8x8;
    d.paths = {std::string(KDIGA_SOURCE_DIR) + "/data/digits.csv"};
    const Dataset ds = load_dataset(d);
    const auto teacher = load_checkpoint(run.result.output_dir / "teacher" / "teacher.ckpt").model;
    for (double eps : {0.05, 0.1, 0.3}) {
        const AttackSpec spec{eps, 0.0, 10, 0.0, 1.0, true, 3, 7, AttackObjective::cross_entropy};
        g_feasibility += check_feasibility(ds.test.x, pgd_attack(teacher, ds.test, spec).x_adv, eps);
    }
    return {g_feasibility.ok() && g_feasibility.checked > 0,
            std::to_string(g_feasibility.checked) + " coordinates checked; " +
                std::to_string(g_feasibility.ball_violations) + " ball and " +
                std::to_string(g_feasibility.range_violations) + " range violations"};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "kdiga_acceptance";
    fs::create_directories(work);
    bool all = true;
    auto report = [&](int id, const std::function<Outcome()>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        all = all && o.pass;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  [" << fmt(s)
                  << " s]" << std::endl;
    };

    report(1, gradient_identity_criterion);
    report(2, finite_difference_criterion);
    report(3, pgd_oracle_criterion);
    report(4, llm_oracle_criterion);
    report(5, bound_criterion);
    report(6, perfect_student_criterion);

    DigitsRun digits;
    std::string digits_error;
    try {
        ExperimentConfig c = load_experiment_config(fs::path(KDIGA_SOURCE_DIR) / "configs" / "digits.json", false);
        c.dataset.paths = {std::string(KDIGA_SOURCE_DIR) + "/data/digits.csv"};
        c.output_dir = (work / "digits").string();
        c.validate_paths = true;
        ExperimentOptions opts;
        opts.force = true;
        const auto t0 = std::chrono::steady_clock::now();
        digits.result = run_experiment(c, opts);
        digits.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } catch (const std::exception& e) {
        digits_error = e.what();
    }
    auto needs_digits = [&](const std::function<Outcome()>& fn) {
        return [&, fn]() -> Outcome {
            if (!digits_error.empty()) return {false, "digits run failed: " + digits_error};
            return fn();
        };
    };
    report(7, needs_digits([&] { return trend_criterion(digits, 0.1); }));
    report(8, needs_digits([&] { return bound_trend_criterion(digits); }));
    report(9, [&] { return determinism_criterion(work); });
    report(10, needs_digits([&] { return feasibility_criterion(digits); }));
    return all ? 0 : 1;
}

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdiga/attacks.hpp"
#include "kdiga/autodiff.hpp"
#include "kdiga/checkpoint.hpp"
#include "kdiga/diffmodel.hpp"
#include "kdiga/errors.hpp"
#include "kdiga/losses.hpp"
#include "kdiga/rng.hpp"

namespace kdiga {

enum class Precision { f64, f32 };

struct OptimizerConfig {
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<int> milestones;
    double decay_factor = 0.1;
    int epochs = 10;
    int batch_size = 64;
    std::uint64_t seed = 0;
    Precision precision = Precision::f64;
    double grad_clip_norm = 0.0;  // 0 disables global-norm clipping

    bool operator==(const OptimizerConfig&) const = default;
};

inline void validate(const OptimizerConfig& o) {
    require(o.learning_rate > 0.0, ErrorKind::invalid_config, "optimizer: learning rate must be positive");
    require(o.momentum >= 0.0 && o.momentum < 1.0, ErrorKind::invalid_config, "optimizer: momentum must lie in [0, 1)");
    require(o.weight_decay >= 0.0, ErrorKind::invalid_config, "optimizer: weight decay must be >= 0");
    require(o.decay_factor > 0.0 && o.decay_factor <= 1.0, ErrorKind::invalid_config,
            "optimizer: decay factor must lie in (0, 1]");
    require(o.epochs >= 1, ErrorKind::invalid_config, "optimizer: epochs must be >= 1");
    require(o.batch_size >= 1, ErrorKind::invalid_config, "optimizer: batch size must be >= 1");
    require(o.grad_clip_norm >= 0.0, ErrorKind::invalid_config, "optimizer: grad_clip_norm must be >= 0");
    for (std::size_t i = 0; i < o.milestones.size(); ++i) {
        require(o.milestones[i] < o.epochs && o.milestones[i] >= 0, ErrorKind::invalid_config,
                "optimizer: milestones must lie in [0, epochs)");
        require(i == 0 || o.milestones[i] > o.milestones[i - 1], ErrorKind::invalid_config,
                "optimizer: milestones must be strictly increasing");
    }
    require(o.precision == Precision::f64, ErrorKind::unsupported, "optimizer: only f64 precision is implemented");
}

/// 200 epochs, batch 125, lr 0.1, milestones [100, 150] x0.1, momentum 0.9, weight decay 2e-4.
inline OptimizerConfig cifar10_preset() {
    OptimizerConfig o;
    o.learning_rate = 0.1;
    o.momentum = 0.9;
    o.weight_decay = 0.0002;
    o.milestones = {100, 150};
    o.decay_factor = 0.1;
    o.epochs = 200;
    o.batch_size = 125;
    return o;
}

/// 50 epochs, batch 128, lr 0.1, milestones [20, 30, 40] x0.1, momentum 0.9, weight decay 1e-4.
inline OptimizerConfig imagenet_preset() {
    OptimizerConfig o;
    o.learning_rate = 0.1;
    o.momentum = 0.9;
    o.weight_decay = 0.0001;
    o.milestones = {20, 30, 40};
    o.decay_factor = 0.1;
    o.epochs = 50;
    o.batch_size = 128;
    return o;
}

/// η · decay^{|{m ∈ milestones : m ≤ epoch}|}
inline double learning_rate_at(const OptimizerConfig& o, int epoch) {
    double lr = o.learning_rate;
    for (int m : o.milestones) {
        if (m <= epoch) lr *= o.decay_factor;
    }
    return lr;
}

struct SgdState {
    std::vector<Matrix> velocity;
};

/// v ← μ·v + (g + wd·θ);  θ ← θ − η·v
inline void sgd_momentum_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, SgdState& state,
                              double learning_rate, const OptimizerConfig& opt) {
    require(params.size() == grads.size(), ErrorKind::invalid_input, "sgd: parameter/gradient count mismatch");
    if (state.velocity.empty()) {
        for (const auto& p : params) state.velocity.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(params[i].rows() == grads[i].rows() && params[i].cols() == grads[i].cols(), ErrorKind::invalid_input,
                "sgd: gradient shape mismatch");
        state.velocity[i] = opt.momentum * state.velocity[i] + (grads[i] + opt.weight_decay * params[i]);
        params[i] -= learning_rate * state.velocity[i];
    }
}

struct EpochRecord {
    int epoch = 0;
    LossBreakdown mean_loss;
    LossBreakdown first_batch;
    double train_accuracy = 0.0;
    std::optional<double> validation_accuracy;
    double learning_rate = 0.0;
    int clip_events = 0;
    double wall_time_s = 0.0;
};

inline constexpr const char* history_schema = "kdiga.history/1";

inline nlohmann::json to_json(const LossBreakdown& l) {
    return {{"total", l.total}, {"ce", l.ce_term}, {"kl", l.kl_term}, {"iga", l.iga_term}};
}

inline LossBreakdown loss_breakdown_from_json(const nlohmann::json& j) {
    return {j.at("total").get<double>(), j.at("ce").get<double>(), j.at("kl").get<double>(), j.at("iga").get<double>()};
}

inline nlohmann::json to_json(const EpochRecord& r, bool include_timing = true) {
    nlohmann::json j{{"schema", history_schema},
                     {"epoch", r.epoch},
                     {"mean_loss", to_json(r.mean_loss)},
                     {"first_batch", to_json(r.first_batch)},
                     {"train_accuracy", r.train_accuracy},
                     {"learning_rate", r.learning_rate},
                     {"clip_events", r.clip_events}};
    if (r.validation_accuracy) j["validation_accuracy"] = *r.validation_accuracy;
    if (include_timing) j["wall_time_s"] = r.wall_time_s;
    return j;
}

inline EpochRecord epoch_record_from_json(const nlohmann::json& j) {
    require(j.value("schema", "") == history_schema, ErrorKind::parse, "history: unknown schema");
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.mean_loss = loss_breakdown_from_json(j.at("mean_loss"));
    r.first_batch = loss_breakdown_from_json(j.at("first_batch"));
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.learning_rate = j.at("learning_rate").get<double>();
    r.clip_events = j.at("clip_events").get<int>();
    if (j.contains("validation_accuracy")) r.validation_accuracy = j.at("validation_accuracy").get<double>();
    r.wall_time_s = j.value("wall_time_s", 0.0);
    return r;
}

struct TrainingHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;

    /// One JSON record per line.
    [[nodiscard]] std::string to_jsonl(bool include_timing = true) const {
        std::string out;
        for (const auto& r : epochs) out += to_json(r, include_timing).dump() + "\n";
        return out;
    }
};

inline double accuracy(const Classifier& model, const Batch& data) {
    if (data.size() == 0) return 0.0;
    const Labels pred = model.predict(data.x);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.y[i];
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

inline Batch select_rows(const Batch& data, std::span<const std::size_t> indices) {
    Batch out;
    out.x.resize(static_cast<Eigen::Index>(indices.size()), data.x.cols());
    out.y.resize(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        out.x.row(static_cast<Eigen::Index>(k)) = data.x.row(static_cast<Eigen::Index>(indices[k]));
        out.y[k] = data.y[indices[k]];
    }
    return out;
}

struct TrainOptions {
    const Batch* validation = nullptr;          // enables best-epoch selection
    std::filesystem::path checkpoint_dir;       // empty: no checkpoints
    int checkpoint_every = 0;                   // epochs; 0 disables periodic checkpoints
    std::filesystem::path resume_from;          // training-state checkpoint to continue from
    std::filesystem::path diagnostics_dir;      // where a divergence snapshot is written
    bool cache_teacher_outputs = false;         // precompute clean teacher logits/gradients once
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(const std::string&)> log;
};

struct TrainResult {
    ZooClassifier model;       // parameters after the last epoch
    ZooClassifier best_model;  // best validation accuracy (== model without a validation split)
    TrainingHistory history;
    int resumed_from_epoch = 0;
};

namespace detail {

/// Per-batch objective: builds the loss graph for the current parameters.
using BatchObjective = std::function<LossGraph(const ZooClassifier& model, std::span<const ad::Var> params,
                                               const Batch& batch, const std::vector<std::size_t>& indices,
                                               std::uint64_t batch_counter)>;

inline void save_training_state(const std::filesystem::path& path, const ZooClassifier& model, const SgdState& state,
                                const TrainingHistory& history, const ZooClassifier& best, double best_accuracy) {
    Checkpoint ckpt{model, nlohmann::json::object(), state.velocity};
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : history.epochs) hist.push_back(to_json(r));
    ckpt.metadata = {{"kind", "training-state"},
                     {"epochs_completed", history.epochs.size()},
                     {"best_epoch", history.best_epoch},
                     {"best_accuracy", best_accuracy},
                     {"history", hist}};
    for (const auto& p : best.parameters()) ckpt.extra_arrays.push_back(p);
    save_checkpoint(path, ckpt);
}

inline TrainResult train_loop(ZooClassifier model, const Batch& data, const OptimizerConfig& opt,
                              const TrainOptions& options, const BatchObjective& objective) {
    validate(opt);
    require(data.size() > 0, ErrorKind::invalid_input, "train: empty dataset");
    validate_batch(data, model.num_classes());
    model.set_mode(Mode::train);

    SgdState state;
    TrainingHistory history;
    ZooClassifier best = model;
    double best_accuracy = -1.0;
    int start_epoch = 0;

    if (!options.resume_from.empty()) {
        Checkpoint ckpt = load_checkpoint(options.resume_from);
        require(ckpt.model.spec() == model.spec(), ErrorKind::invalid_input, "resume: architecture mismatch");
        const std::size_t n = model.parameters().size();
        require(ckpt.extra_arrays.size() == 2 * n, ErrorKind::parse, "resume: not a training-state checkpoint");
        model.parameters() = ckpt.model.parameters();
        state.velocity.assign(ckpt.extra_arrays.begin(), ckpt.extra_arrays.begin() + static_cast<std::ptrdiff_t>(n));
        best.parameters().assign(ckpt.extra_arrays.begin() + static_cast<std::ptrdiff_t>(n), ckpt.extra_arrays.end());
        for (const auto& r : ckpt.metadata.at("history")) history.epochs.push_back(epoch_record_from_json(r));
        history.best_epoch = ckpt.metadata.at("best_epoch").get<int>();
        best_accuracy = ckpt.metadata.at("best_accuracy").get<double>();
        start_epoch = static_cast<int>(history.epochs.size());
        if (options.log) options.log("resuming from " + options.resume_from.string() + " at epoch " + std::to_string(start_epoch));
    }

    const std::size_t n = static_cast<std::size_t>(data.size());
    const std::size_t batch_size = static_cast<std::size_t>(opt.batch_size);
    for (int epoch = start_epoch; epoch < opt.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        EpochRecord record;
        record.epoch = epoch;
        record.learning_rate = learning_rate_at(opt, epoch);

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = make_rng(opt.seed, "data", static_cast<std::uint64_t>(epoch));
        shuffle(order, rng);

        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch_size) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
            const Batch batch = select_rows(data, idx);
            const std::uint64_t counter = static_cast<std::uint64_t>(epoch) * 1000003ULL + batches;

            const auto params = model.parameter_vars(true);
            const LossGraph loss = objective(model, params, batch, idx, counter);
            if (!std::isfinite(loss.breakdown.total)) {
                nlohmann::json snapshot{{"epoch", epoch},
                                        {"batch_index", batches},
                                        {"loss", to_json(loss.breakdown)},
                                        {"parameter_norm", model.flat_parameters().norm()},
                                        {"learning_rate", record.learning_rate}};
                if (!options.diagnostics_dir.empty()) {
                    write_file_atomic(options.diagnostics_dir / "divergence.json", snapshot.dump(2));
                }
                fail(ErrorKind::non_finite, "train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                                std::to_string(batches) + ": " + snapshot.dump());
            }
            std::vector<ad::Var> grads = ad::grad(loss.total, params);
            std::vector<Matrix> g;
            g.reserve(grads.size());
            double sq = 0.0;
            for (const auto& v : grads) {
                g.push_back(v.value());
                sq += v.value().squaredNorm();
            }
            if (opt.grad_clip_norm > 0.0 && std::sqrt(sq) > opt.grad_clip_norm) {
                const double factor = opt.grad_clip_norm / std::sqrt(sq);
                for (auto& m : g) m *= factor;
                ++record.clip_events;
            }
            sgd_momentum_step(model.parameters(), g, state, record.learning_rate, opt);

            if (batches == 0) record.first_batch = loss.breakdown;
            record.mean_loss.total += loss.breakdown.total;
            record.mean_loss.ce_term += loss.breakdown.ce_term;
            record.mean_loss.kl_term += loss.breakdown.kl_term;
            record.mean_loss.iga_term += loss.breakdown.iga_term;
            ++batches;
        }
        const double nb = static_cast<double>(batches);
        record.mean_loss.total /= nb;
        record.mean_loss.ce_term /= nb;
        record.mean_loss.kl_term /= nb;
        record.mean_loss.iga_term /= nb;
        record.train_accuracy = accuracy(model, data);
        const double score = options.validation ? accuracy(model, *options.validation) : record.train_accuracy;
        if (options.validation) record.validation_accuracy = score;
        if (!options.validation || score > best_accuracy) {
            best_accuracy = score;
            best = model;
            history.best_epoch = epoch;
        }
        record.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        history.epochs.push_back(record);
        if (options.on_epoch) options.on_epoch(record);

        const bool periodic = options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0;
        if (!options.checkpoint_dir.empty() && (periodic || epoch + 1 == opt.epochs)) {
            save_training_state(options.checkpoint_dir / "last.state", model, state, history, best, best_accuracy);
        }
    }
    model.set_mode(Mode::eval);
    best.set_mode(Mode::eval);
    TrainResult result{std::move(model), std::move(best), std::move(history), start_epoch};
    return result;
}

}  // namespace detail

/// Teacher-student training. The teacher is only read (eval mode); the
/// student gradient flows through its own input gradient for the IGA
/// variants. A fresh perturbation is computed per batch for the
/// adversarial variants.
inline TrainResult train_distill(const Classifier* teacher, ZooClassifier student, const Batch& data,
                                 const DistillLossConfig& loss_config, const OptimizerConfig& opt,
                                 const std::optional<AttackSpec>& attack = std::nullopt,
                                 const TrainOptions& options = {}) {
    validate(loss_config);
    require(is_adversarial(loss_config.variant) == attack.has_value(), ErrorKind::invalid_call,
            "train_distill: an attack spec is required exactly for adversarial variants");
    require(!uses_teacher(loss_config.variant) || teacher != nullptr, ErrorKind::invalid_call,
            "train_distill: teacher required");
    if (teacher) {
        require(teacher->input_dim() == student.input_dim() && teacher->num_classes() == student.num_classes(),
                ErrorKind::invalid_input, "train_distill: teacher and student disagree on input or output space");
    }
    if (attack) validate(*attack);

    std::optional<TeacherOutputs> cache;
    if (options.cache_teacher_outputs && teacher && uses_teacher(loss_config.variant)) {
        const bool need_grad = loss_config.variant == Variant::KDIGA || loss_config.variant == Variant::KDIGA_ARD_C;
        cache = detail::teacher_outputs(*teacher, data.x, data.y, need_grad);
    }

    auto objective = [&](const ZooClassifier& model, std::span<const ad::Var> params, const Batch& batch,
                         const std::vector<std::size_t>& idx, std::uint64_t counter) {
        std::optional<Matrix> delta;
        if (attack) {
            AttackSpec spec = *attack;
            spec.seed = substream_seed(attack->seed, "ard", counter);
            delta = inner_max_delta(model, batch, spec);
        }
        std::optional<TeacherOutputs> cached_batch;
        if (cache) {
            cached_batch.emplace();
            cached_batch->logits = select_rows(Batch{cache->logits, Labels(cache->logits.rows(), 0)}, idx).x;
            if (cache->input_gradient.size() > 0) {
                cached_batch->input_gradient =
                    select_rows(Batch{cache->input_gradient, Labels(cache->input_gradient.rows(), 0)}, idx).x;
            }
        }
        return build_loss_graph(model, params, teacher, batch, loss_config, delta ? &*delta : nullptr,
                                cached_batch ? &*cached_batch : nullptr);
    };
    return detail::train_loop(std::move(student), data, opt, options, objective);
}

/// Standard training on PGD-perturbed inputs (the model attacks itself each
/// batch). With epsilon = 0 this reduces to standard training.
inline TrainResult adversarial_train(ZooClassifier model, const Batch& data, const AttackSpec& attack,
                                     const OptimizerConfig& opt, const TrainOptions& options = {}) {
    validate(attack);
    DistillLossConfig ce_only{Variant::ST, 1.0, 0.0, 0.0, 1.0, IgaAggregation::whole_batch_norm};
    auto objective = [&](const ZooClassifier& m, std::span<const ad::Var> params, const Batch& batch,
                         const std::vector<std::size_t>&, std::uint64_t counter) {
        AttackSpec spec = attack;
        spec.seed = substream_seed(attack.seed, "adv-train", counter);
        const Batch perturbed{pgd_attack(m, batch, spec).x_adv, batch.y};
        return build_loss_graph(m, params, nullptr, perturbed, ce_only);
    };
    return detail::train_loop(std::move(model), data, opt, options, objective);
}

inline TrainResult standard_train(ZooClassifier model, const Batch& data, const OptimizerConfig& opt,
                                  const TrainOptions& options = {}) {
    DistillLossConfig ce_only{Variant::ST, 1.0, 0.0, 0.0, 1.0, IgaAggregation::whole_batch_norm};
    return train_distill(nullptr, std::move(model), data, ce_only, opt, std::nullopt, options);
}

}  // namespace kdiga

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdiga/autodiff.hpp"
#include "kdiga/errors.hpp"
#include "kdiga/rng.hpp"

namespace kdiga {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Labels = std::vector<int>;

/// A batch of labeled examples: one example per row of `x`, pixel values in [0, 1].
struct Batch {
    Matrix x;
    Labels y;

    [[nodiscard]] Eigen::Index size() const { return x.rows(); }
};

inline void validate_batch(const Batch& batch, int num_classes) {
    require(static_cast<Eigen::Index>(batch.y.size()) == batch.x.rows(), ErrorKind::invalid_input,
            "batch: label count does not match example count");
    for (std::size_t i = 0; i < batch.y.size(); ++i) {
        require(batch.y[i] >= 0 && batch.y[i] < num_classes, ErrorKind::index,
                "batch: label out of range at example " + std::to_string(i));
    }
    require(batch.x.allFinite(), ErrorKind::invalid_input, "batch: non-finite input");
}

// ---------------------------------------------------------------------------
// Elementary probabilistic operations on a single logit vector.

inline void require_finite(const Vector& v, const char* what) {
    require(v.allFinite(), ErrorKind::invalid_input, std::string(what) + ": non-finite input");
}

inline double logsumexp(const Vector& logits) {
    const double m = logits.maxCoeff();
    return m + std::log((logits.array() - m).exp().sum());
}

inline Vector softmax(const Vector& logits) {
    require_finite(logits, "softmax");
    const double m = logits.maxCoeff();
    Vector p = (logits.array() - m).exp().matrix();
    return p / p.sum();
}

/// -logits[y] + log(sum_j exp(logits[j])), log-sum-exp stabilized.
inline double cross_entropy(const Vector& logits, int y) {
    require_finite(logits, "cross_entropy");
    require(y >= 0 && y < logits.size(), ErrorKind::index, "cross_entropy: label out of range");
    return logsumexp(logits) - logits(y);
}

/// KL(softmax(teacher / T) || softmax(student / T)). The T^2 factor belongs to
/// the loss composer.
inline double kl_with_temperature(const Vector& student_logits, const Vector& teacher_logits, double temperature) {
    require(temperature > 0.0, ErrorKind::invalid_config, "kl_with_temperature: temperature must be positive");
    require(student_logits.size() == teacher_logits.size(), ErrorKind::invalid_input,
            "kl_with_temperature: logit length mismatch");
    require_finite(student_logits, "kl_with_temperature");
    require_finite(teacher_logits, "kl_with_temperature");
    const Vector zs = student_logits / temperature;
    const Vector zt = teacher_logits / temperature;
    const Vector log_ps = zs.array() - logsumexp(zs);
    const Vector log_pt = zt.array() - logsumexp(zt);
    const double kl = (log_pt.array().exp() * (log_pt - log_ps).array()).sum();
    return std::max(kl, 0.0);
}

/// Lowest index among tied maxima.
inline int argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    int best = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j) {
        if (row(j) > row(best)) best = static_cast<int>(j);
    }
    return best;
}

inline Labels argmax_rows(const Matrix& logits) {
    Labels out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax(logits.row(i));
    return out;
}

// Batched graph versions. Rows are examples.
namespace graph {

inline std::shared_ptr<const std::vector<ad::Index>> label_map(const Labels& y, ad::Index num_classes) {
    auto map = std::make_shared<std::vector<ad::Index>>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) (*map)[i] = static_cast<ad::Index>(i) * num_classes + y[i];
    return map;
}

/// Per-example cross-entropy, shape (B, 1).
inline ad::Var cross_entropy(const ad::Var& logits, const Labels& y) {
    const ad::Var picked = ad::gather(logits, label_map(y, logits.cols()), logits.rows(), 1);
    return ad::sub(ad::logsumexp_rows(logits), picked);
}

/// Per-example KL(softmax(teacher/T) || softmax(student/T)), shape (B, 1).
inline ad::Var kl_with_temperature(const ad::Var& student_logits, const ad::Var& teacher_logits, double temperature) {
    require(temperature > 0.0, ErrorKind::invalid_config, "kl_with_temperature: temperature must be positive");
    const ad::Var log_ps = ad::log_softmax_rows(ad::scale(student_logits, 1.0 / temperature));
    const ad::Var log_pt = ad::log_softmax_rows(ad::scale(teacher_logits, 1.0 / temperature));
    return ad::sum_cols(ad::mul(ad::exp(log_pt), ad::sub(log_pt, log_ps)));
}

inline ad::Var mean(const ad::Var& column) {
    return ad::scale(ad::sum_all(column), 1.0 / static_cast<double>(column.rows()));
}

}  // namespace graph

// ---------------------------------------------------------------------------
// Classifier contract.

enum class Mode { train, eval };

/// A classifier f: R^D -> R^N. Logits are raw (never normalized internally).
class Classifier {
public:
    virtual ~Classifier() = default;

    [[nodiscard]] virtual int input_dim() const = 0;
    [[nodiscard]] virtual int num_classes() const = 0;
    [[nodiscard]] virtual bool supports_gradients() const = 0;
    [[nodiscard]] virtual bool piecewise_linear() const = 0;

    /// Eval-mode logits for a batch, shape (B, N).
    [[nodiscard]] virtual Matrix logits(const Matrix& x) const = 0;

    /// Differentiable forward with parameters held constant.
    [[nodiscard]] virtual ad::Var forward(const ad::Var& x) const {
        (void)x;
        fail(ErrorKind::unsupported, "classifier does not support gradients");
    }

    [[nodiscard]] Labels predict(const Matrix& x) const { return argmax_rows(logits(x)); }
};

/// Wraps an opaque logits function. No gradient support.
class BlackBoxClassifier final : public Classifier {
public:
    using LogitsFn = std::function<Matrix(const Matrix&)>;

    BlackBoxClassifier(int input_dim, int num_classes, LogitsFn fn)
        : input_dim_(input_dim), num_classes_(num_classes), fn_(std::move(fn)) {}

    int input_dim() const override { return input_dim_; }
    int num_classes() const override { return num_classes_; }
    bool supports_gradients() const override { return false; }
    bool piecewise_linear() const override { return false; }
    Matrix logits(const Matrix& x) const override { return fn_(x); }

private:
    int input_dim_;
    int num_classes_;
    LogitsFn fn_;
};

/// Per-example ∇_x L_CE(f(x), y), one row per example. With `create_graph`
/// the result stays connected to whatever parameters `forward` used.
inline ad::Var input_gradient_ce_graph(const std::function<ad::Var(const ad::Var&)>& forward, const Matrix& x,
                                       const Labels& y, bool create_graph) {
    const ad::Var input = ad::variable(x);
    const ad::Var loss = ad::sum_all(graph::cross_entropy(forward(input), y));
    return ad::grad(loss, input, create_graph);
}

inline Matrix input_gradient_ce(const Classifier& model, const Matrix& x, const Labels& y) {
    require(model.supports_gradients(), ErrorKind::unsupported, "input_gradient_ce: model has no gradient support");
    require(x.allFinite(), ErrorKind::invalid_input, "input_gradient_ce: non-finite input");
    validate_batch(Batch{x, y}, model.num_classes());
    return input_gradient_ce_graph([&](const ad::Var& in) { return model.forward(in); }, x, y, false).value();
}

/// Jacobian of the logits of one example w.r.t. its input, shape (N, D),
/// assembled column by column from directional derivatives of each logit.
inline Matrix logit_jacobian(const Classifier& model, const Vector& x) {
    require(model.supports_gradients(), ErrorKind::unsupported, "logit_jacobian: model has no gradient support");
    const int n = model.num_classes();
    Matrix jac(n, x.size());
    for (int k = 0; k < n; ++k) {
        const ad::Var input = ad::variable(x.transpose());
        const ad::Var out = model.forward(input);
        Matrix selector = Matrix::Zero(1, n);
        selector(0, k) = 1.0;
        const ad::Var picked = ad::sum_all(ad::mul(out, ad::constant(selector)));
        jac.row(k) = ad::grad(picked, input).value();
    }
    return jac;
}

// ---------------------------------------------------------------------------
// Model zoo.

enum class Family { linear, mlp_relu, cnn_relu, tiny_attention };

inline std::string to_string(Family f) {
    switch (f) {
        case Family::linear: return "linear";
        case Family::mlp_relu: return "mlp-relu";
        case Family::cnn_relu: return "cnn-relu";
        case Family::tiny_attention: return "tiny-attention";
    }
    return "unknown";
}

inline Family parse_family(const std::string& name) {
    if (name == "linear") return Family::linear;
    if (name == "mlp-relu") return Family::mlp_relu;
    if (name == "cnn-relu") return Family::cnn_relu;
    if (name == "tiny-attention") return Family::tiny_attention;
    fail(ErrorKind::invalid_config, "unknown model family '" + name + "'");
}

/// Architecture descriptor. `input_shape` is (H, W, C) for images, flattened
/// in HWC order; for flat inputs use {D}.
struct ModelZooSpec {
    Family family = Family::linear;
    std::vector<int> input_shape{2};
    int num_classes = 2;
    int width = 16;          // hidden width (mlp), channels (cnn), model dim (attention)
    int depth = 1;           // hidden layers (mlp), conv layers (cnn)
    int tokens = 0;          // attention: token count; 0 means one token per input row of an image, else D
    double init_scale = 1.0;

    [[nodiscard]] int input_dim() const {
        int d = 1;
        for (int s : input_shape) d *= s;
        return d;
    }

    bool operator==(const ModelZooSpec&) const = default;
};

inline void validate(const ModelZooSpec& spec) {
    require(!spec.input_shape.empty(), ErrorKind::invalid_config, "model: empty input shape");
    for (int s : spec.input_shape) require(s > 0, ErrorKind::invalid_config, "model: input dims must be positive");
    require(spec.num_classes >= 2, ErrorKind::invalid_config, "model: need at least two classes");
    require(spec.init_scale > 0.0, ErrorKind::invalid_config, "model: init_scale must be positive");
    if (spec.family != Family::linear) {
        require(spec.width >= 1, ErrorKind::invalid_config, "model: width must be >= 1");
        require(spec.depth >= 1, ErrorKind::invalid_config, "model: depth must be >= 1");
    }
    if (spec.family == Family::cnn_relu) {
        require(spec.input_shape.size() == 3, ErrorKind::invalid_config, "cnn-relu: input_shape must be (H, W, C)");
    }
    if (spec.family == Family::tiny_attention && spec.tokens > 0) {
        require(spec.input_dim() % spec.tokens == 0, ErrorKind::invalid_config,
                "tiny-attention: input dim must be divisible by token count");
    }
}

namespace detail {

struct ConvGeometry {
    int in_h, in_w, in_c, out_h, out_w, out_c;
    static constexpr int kernel = 3;
    static constexpr int stride = 2;
    static constexpr int pad = 1;
};

inline std::vector<ConvGeometry> conv_stack(const ModelZooSpec& spec) {
    std::vector<ConvGeometry> layers;
    int h = spec.input_shape[0], w = spec.input_shape[1], c = spec.input_shape[2];
    for (int l = 0; l < spec.depth; ++l) {
        ConvGeometry g{h, w, c, (h + 2 * ConvGeometry::pad - ConvGeometry::kernel) / ConvGeometry::stride + 1,
                       (w + 2 * ConvGeometry::pad - ConvGeometry::kernel) / ConvGeometry::stride + 1, spec.width};
        require(g.out_h >= 1 && g.out_w >= 1, ErrorKind::invalid_config, "cnn-relu: too many layers for input size");
        layers.push_back(g);
        h = g.out_h;
        w = g.out_w;
        c = g.out_c;
    }
    return layers;
}

// Patch extraction: rows are (example, output position), columns are
// (ky, kx, channel); zero padding maps to -1.
inline std::shared_ptr<const std::vector<ad::Index>> im2col_map(const ConvGeometry& g, ad::Index batch) {
    const ad::Index positions = static_cast<ad::Index>(g.out_h) * g.out_w;
    const ad::Index patch = static_cast<ad::Index>(ConvGeometry::kernel) * ConvGeometry::kernel * g.in_c;
    const ad::Index in_size = static_cast<ad::Index>(g.in_h) * g.in_w * g.in_c;
    auto map = std::make_shared<std::vector<ad::Index>>(static_cast<std::size_t>(batch * positions * patch));
    std::size_t k = 0;
    for (ad::Index b = 0; b < batch; ++b) {
        for (int oy = 0; oy < g.out_h; ++oy) {
            for (int ox = 0; ox < g.out_w; ++ox) {
                for (int ky = 0; ky < ConvGeometry::kernel; ++ky) {
                    for (int kx = 0; kx < ConvGeometry::kernel; ++kx) {
                        const int iy = oy * ConvGeometry::stride - ConvGeometry::pad + ky;
                        const int ix = ox * ConvGeometry::stride - ConvGeometry::pad + kx;
                        const bool inside = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
                        for (int c = 0; c < g.in_c; ++c) {
                            (*map)[k++] = inside ? b * in_size + (static_cast<ad::Index>(iy) * g.in_w + ix) * g.in_c + c : -1;
                        }
                    }
                }
            }
        }
    }
    return map;
}

inline ad::Var affine(const ad::Var& x, const ad::Var& weight, const ad::Var& bias) {
    return ad::add(ad::matmul(x, weight), ad::broadcast_rows(bias, x.rows()));
}

}  // namespace detail

/// A zoo architecture with its parameter arrays. Value type: copying yields
/// an independent snapshot.
class ZooClassifier final : public Classifier {
public:
    ZooClassifier() = default;

    ZooClassifier(ModelZooSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
        validate(spec_);
        allocate_and_initialize();
    }

    int input_dim() const override { return spec_.input_dim(); }
    int num_classes() const override { return spec_.num_classes; }
    bool supports_gradients() const override { return true; }
    bool piecewise_linear() const override { return spec_.family != Family::tiny_attention; }

    [[nodiscard]] const ModelZooSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
    [[nodiscard]] Mode mode() const noexcept { return mode_; }
    void set_mode(Mode m) noexcept { mode_ = m; }

    [[nodiscard]] const std::vector<Matrix>& parameters() const noexcept { return params_; }
    [[nodiscard]] std::vector<Matrix>& parameters() noexcept { return params_; }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
        return n;
    }

    /// Concatenation of all parameter arrays, each in row-major order.
    [[nodiscard]] Vector flat_parameters() const {
        Vector flat(static_cast<Eigen::Index>(parameter_count()));
        Eigen::Index k = 0;
        for (const auto& p : params_) {
            for (Eigen::Index r = 0; r < p.rows(); ++r)
                for (Eigen::Index c = 0; c < p.cols(); ++c) flat(k++) = p(r, c);
        }
        return flat;
    }

    void set_flat_parameters(const Vector& flat) {
        require(flat.size() == static_cast<Eigen::Index>(parameter_count()), ErrorKind::invalid_input,
                "set_flat_parameters: size mismatch");
        Eigen::Index k = 0;
        for (auto& p : params_) {
            for (Eigen::Index r = 0; r < p.rows(); ++r)
                for (Eigen::Index c = 0; c < p.cols(); ++c) p(r, c) = flat(k++);
        }
    }

    [[nodiscard]] std::vector<ad::Var> parameter_vars(bool requires_grad) const {
        std::vector<ad::Var> vars;
        vars.reserve(params_.size());
        for (const auto& p : params_) vars.push_back(requires_grad ? ad::variable(p) : ad::constant(p));
        return vars;
    }

    [[nodiscard]] ZooClassifier snapshot() const { return *this; }

    Matrix logits(const Matrix& x) const override {
        require(x.cols() == input_dim(), ErrorKind::invalid_input, "logits: input dimension mismatch");
        ad::NoGradGuard no_grad;
        return forward(ad::constant(x)).value();
    }

    ad::Var forward(const ad::Var& x) const override { return forward(x, parameter_vars(false)); }

    /// Forward pass with explicit parameter nodes (for parameter gradients).
    [[nodiscard]] ad::Var forward(const ad::Var& x, std::span<const ad::Var> params) const {
        require(x.cols() == input_dim(), ErrorKind::invalid_input, "forward: input dimension mismatch");
        require(params.size() == params_.size(), ErrorKind::invalid_input, "forward: parameter count mismatch");
        switch (spec_.family) {
            case Family::linear: return detail::affine(x, params[0], params[1]);
            case Family::mlp_relu: return forward_mlp(x, params);
            case Family::cnn_relu: return forward_cnn(x, params);
            case Family::tiny_attention: return forward_attention(x, params);
        }
        fail(ErrorKind::invalid_config, "unknown family");
    }

    [[nodiscard]] int attention_tokens() const {
        if (spec_.tokens > 0) return spec_.tokens;
        return spec_.input_shape.size() >= 2 ? spec_.input_shape[0] : spec_.input_dim();
    }

private:
    void add_dense(Rng& rng, int fan_in, int fan_out) {
        const double bound = spec_.init_scale / std::sqrt(static_cast<double>(fan_in));
        Matrix w(fan_in, fan_out);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = uniform(rng, -bound, bound);
        Matrix b(1, fan_out);
        for (Eigen::Index c = 0; c < b.cols(); ++c) b(0, c) = uniform(rng, -bound, bound);
        params_.push_back(std::move(w));
        params_.push_back(std::move(b));
    }

    void allocate_and_initialize() {
        params_.clear();
        Rng rng = make_rng(seed_, "init");
        const int d = input_dim();
        const int n = spec_.num_classes;
        switch (spec_.family) {
            case Family::linear: add_dense(rng, d, n); break;
            case Family::mlp_relu: {
                int fan_in = d;
                for (int l = 0; l < spec_.depth; ++l) {
                    add_dense(rng, fan_in, spec_.width);
                    fan_in = spec_.width;
                }
                add_dense(rng, fan_in, n);
                break;
            }
            case Family::cnn_relu: {
                const auto layers = detail::conv_stack(spec_);
                for (const auto& g : layers) add_dense(rng, detail::ConvGeometry::kernel * detail::ConvGeometry::kernel * g.in_c, g.out_c);
                const auto& last = layers.back();
                add_dense(rng, last.out_h * last.out_w * last.out_c, n);
                break;
            }
            case Family::tiny_attention: {
                const int tokens = attention_tokens();
                require(d % tokens == 0, ErrorKind::invalid_config, "tiny-attention: input dim not divisible by tokens");
                const int token_dim = d / tokens;
                const int dm = spec_.width;
                add_dense(rng, token_dim, dm);  // embedding
                Matrix pos(tokens, dm);
                for (Eigen::Index r = 0; r < pos.rows(); ++r)
                    for (Eigen::Index c = 0; c < pos.cols(); ++c) pos(r, c) = uniform(rng, -0.1, 0.1);
                params_.push_back(std::move(pos));
                add_dense(rng, dm, dm);  // keys
                add_dense(rng, dm, dm);  // values
                Matrix query(dm, 1);
                for (Eigen::Index r = 0; r < query.rows(); ++r) query(r, 0) = uniform(rng, -1.0, 1.0) / std::sqrt(dm);
                params_.push_back(std::move(query));
                add_dense(rng, dm, n);  // head
                break;
            }
        }
    }

    ad::Var forward_mlp(const ad::Var& x, std::span<const ad::Var> p) const {
        ad::Var h = x;
        std::size_t k = 0;
        for (int l = 0; l < spec_.depth; ++l, k += 2) h = ad::relu(detail::affine(h, p[k], p[k + 1]));
        return detail::affine(h, p[k], p[k + 1]);
    }

    ad::Var forward_cnn(const ad::Var& x, std::span<const ad::Var> p) const {
        const ad::Index batch = x.rows();
        ad::Var h = x;
        std::size_t k = 0;
        for (const auto& g : detail::conv_stack(spec_)) {
            const ad::Index positions = static_cast<ad::Index>(g.out_h) * g.out_w;
            const ad::Index patch = static_cast<ad::Index>(detail::ConvGeometry::kernel) * detail::ConvGeometry::kernel * g.in_c;
            const ad::Var patches = ad::gather(h, detail::im2col_map(g, batch), batch * positions, patch);
            const ad::Var conv = ad::relu(detail::affine(patches, p[k], p[k + 1]));
            // (B * P, C) -> (B, P * C): identical row-major flat order, HWC layout.
            h = ad::reshape(conv, batch, positions * g.out_c);
            k += 2;
        }
        return detail::affine(h, p[k], p[k + 1]);
    }

    // Single-query attention pooling over input tokens with tanh embeddings.
    ad::Var forward_attention(const ad::Var& x, std::span<const ad::Var> p) const {
        const ad::Index batch = x.rows();
        const ad::Index tokens = attention_tokens();
        const ad::Index token_dim = input_dim() / tokens;
        const ad::Index dm = spec_.width;

        const ad::Var tok = ad::reshape(x, batch * tokens, token_dim);
        auto pos_map = std::make_shared<std::vector<ad::Index>>(static_cast<std::size_t>(batch * tokens * dm));
        for (ad::Index k = 0; k < batch * tokens * dm; ++k) (*pos_map)[static_cast<std::size_t>(k)] = k % (tokens * dm);
        const ad::Var pos = ad::gather(p[2], pos_map, batch * tokens, dm);
        const ad::Var emb = ad::tanh(ad::add(detail::affine(tok, p[0], p[1]), pos));
        const ad::Var keys = detail::affine(emb, p[3], p[4]);
        const ad::Var values = detail::affine(emb, p[5], p[6]);
        const ad::Var scores = ad::scale(ad::matmul(keys, p[7]), 1.0 / std::sqrt(static_cast<double>(dm)));
        const ad::Var weights = ad::reshape(ad::softmax_rows(ad::reshape(scores, batch, tokens)), batch * tokens, 1);
        const ad::Var weighted = ad::mul(ad::broadcast_cols(weights, dm), values);
        Matrix pool = Matrix::Zero(tokens * dm, dm);
        for (ad::Index t = 0; t < tokens; ++t) pool.block(t * dm, 0, dm, dm).setIdentity();
        const ad::Var pooled = ad::matmul(ad::reshape(weighted, batch, tokens * dm), ad::constant(pool));
        return detail::affine(pooled, p[8], p[9]);
    }

    ModelZooSpec spec_;
    std::uint64_t seed_ = 0;
    Mode mode_ = Mode::eval;
    std::vector<Matrix> params_;
};

inline ZooClassifier build_model(const ModelZooSpec& spec, std::uint64_t seed) { return ZooClassifier(spec, seed); }

/// FNV-1a over the little-endian bytes of every parameter.
inline std::uint64_t parameter_hash(const ZooClassifier& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const Vector flat = model.flat_parameters();
    for (Eigen::Index i = 0; i < flat.size(); ++i) {
        std::uint64_t bits;
        const double v = flat(i);
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

}  // namespace kdiga

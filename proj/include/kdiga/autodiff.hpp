#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// Every backward rule is written in terms of the same differentiable
// operations, so a gradient computed with `create_graph = true` is itself a
// node in the graph and can be differentiated again (double backprop). This
// is what the input-gradient alignment penalty needs: the penalty contains
// d(loss)/dx and training differentiates it with respect to parameters.
//
// Flat indices used by `gather`/`scatter_add`/`reshape` are row-major
// (r * cols + c) regardless of Eigen's column-major storage.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kdiga/errors.hpp"

namespace kdiga::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Node;

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
    [[nodiscard]] const Matrix& value() const;
    [[nodiscard]] bool requires_grad() const;
    [[nodiscard]] Index rows() const { return value().rows(); }
    [[nodiscard]] Index cols() const { return value().cols(); }
    [[nodiscard]] double scalar() const { return value()(0, 0); }
    [[nodiscard]] Node* node() const noexcept { return node_.get(); }

private:
    std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<std::vector<Var>(const Var& grad_output)>;

struct Node {
    Matrix value;
    std::vector<Var> parents;
    BackwardFn backward;  // one gradient per parent; undefined Var means "no contribution"
    bool requires_grad = false;
};

inline const Matrix& Var::value() const { return node_->value; }
inline bool Var::requires_grad() const { return node_ && node_->requires_grad; }

namespace detail {

inline thread_local bool grad_enabled = true;

inline Var make_leaf(Matrix value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
}

// Creates an op node; the backward closure is kept only when some parent
// needs a gradient and graph recording is enabled.
inline Var make_op(Matrix value, std::vector<Var> parents, BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    if (grad_enabled) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline Var constant(Matrix value) { return detail::make_leaf(std::move(value), false); }
inline Var variable(Matrix value) { return detail::make_leaf(std::move(value), true); }
inline Var detach(const Var& v) { return constant(v.value()); }

inline Var scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

// ---------------------------------------------------------------------------
// Operations. Declarations first: backward rules are mutually recursive.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum_all(const Var& a);
Var expand_scalar(const Var& a, Index rows, Index cols);
Var sum_rows(const Var& a);
Var broadcast_rows(const Var& a, Index rows);
Var sum_cols(const Var& a);
Var broadcast_cols(const Var& a, Index cols);
Var mask_mul(const Var& a, const Matrix& mask);
Var relu(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var safe_reciprocal(const Var& a);
Var logsumexp_rows(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var norm_rows(const Var& a);
Var norm_all(const Var& a);
Var reshape(const Var& a, Index rows, Index cols);
Var gather(const Var& a, std::shared_ptr<const std::vector<Index>> map, Index rows, Index cols);
Var scatter_add(const Var& a, std::shared_ptr<const std::vector<Index>> map, Index rows, Index cols);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double f, const Var& a) { return scale(a, f); }

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::invalid_input,
            std::string(op) + ": shape mismatch");
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "add");
    return detail::make_op(a.value() + b.value(), {a, b},
                           [](const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "sub");
    return detail::make_op(a.value() - b.value(), {a, b},
                           [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "mul");
    return detail::make_op(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Var& g) {
        return std::vector<Var>{a.requires_grad() ? mul(g, b) : Var{},
                                b.requires_grad() ? mul(g, a) : Var{}};
    });
}

inline Var neg(const Var& a) {
    return detail::make_op(-a.value(), {a}, [](const Var& g) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double factor) {
    return detail::make_op(a.value() * factor, {a},
                           [factor](const Var& g) { return std::vector<Var>{scale(g, factor)}; });
}

inline Var add_scalar(const Var& a, double offset) {
    return detail::make_op((a.value().array() + offset).matrix(), {a},
                           [](const Var& g) { return std::vector<Var>{g}; });
}

inline Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), ErrorKind::invalid_input, "matmul: inner dimension mismatch");
    return detail::make_op(a.value() * b.value(), {a, b}, [a, b](const Var& g) {
        return std::vector<Var>{a.requires_grad() ? matmul(g, transpose(b)) : Var{},
                                b.requires_grad() ? matmul(transpose(a), g) : Var{}};
    });
}

inline Var transpose(const Var& a) {
    return detail::make_op(a.value().transpose(), {a},
                           [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

inline Var sum_all(const Var& a) {
    const Index r = a.rows(), c = a.cols();
    return detail::make_op(Matrix::Constant(1, 1, a.value().sum()), {a},
                           [r, c](const Var& g) { return std::vector<Var>{expand_scalar(g, r, c)}; });
}

inline Var expand_scalar(const Var& a, Index rows, Index cols) {
    require(a.rows() == 1 && a.cols() == 1, ErrorKind::invalid_input, "expand_scalar: expects 1x1");
    return detail::make_op(Matrix::Constant(rows, cols, a.scalar()), {a},
                           [](const Var& g) { return std::vector<Var>{sum_all(g)}; });
}

inline Var sum_rows(const Var& a) {
    const Index r = a.rows();
    return detail::make_op(a.value().colwise().sum(), {a},
                           [r](const Var& g) { return std::vector<Var>{broadcast_rows(g, r)}; });
}

inline Var broadcast_rows(const Var& a, Index rows) {
    require(a.rows() == 1, ErrorKind::invalid_input, "broadcast_rows: expects a row vector");
    return detail::make_op(a.value().replicate(rows, 1), {a},
                           [](const Var& g) { return std::vector<Var>{sum_rows(g)}; });
}

inline Var sum_cols(const Var& a) {
    const Index c = a.cols();
    return detail::make_op(a.value().rowwise().sum(), {a},
                           [c](const Var& g) { return std::vector<Var>{broadcast_cols(g, c)}; });
}

inline Var broadcast_cols(const Var& a, Index cols) {
    require(a.cols() == 1, ErrorKind::invalid_input, "broadcast_cols: expects a column vector");
    return detail::make_op(a.value().replicate(1, cols), {a},
                           [](const Var& g) { return std::vector<Var>{sum_cols(g)}; });
}

inline Var mask_mul(const Var& a, const Matrix& mask) {
    return mul(a, constant(mask));
}

// Subgradient at zero is zero.
inline Var relu(const Var& a) {
    const Matrix mask = (a.value().array() > 0.0).cast<double>().matrix();
    return mask_mul(a, mask);
}

inline Var tanh(const Var& a) {
    return detail::make_op(a.value().array().tanh().matrix(), {a}, [a](const Var& g) {
        return std::vector<Var>{mul(g, add_scalar(neg(square(tanh(a))), 1.0))};
    });
}

inline Var exp(const Var& a) {
    return detail::make_op(a.value().array().exp().matrix(), {a},
                           [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; });
}

inline Var log(const Var& a) {
    return detail::make_op(a.value().array().log().matrix(), {a},
                           [a](const Var& g) { return std::vector<Var>{mul(g, safe_reciprocal(a))}; });
}

inline Var square(const Var& a) {
    return detail::make_op(a.value().array().square().matrix(), {a},
                           [a](const Var& g) { return std::vector<Var>{mul(g, scale(a, 2.0))}; });
}

// 1/x elementwise, defined as 0 where x == 0.
inline Var safe_reciprocal(const Var& a) {
    Matrix out = a.value().unaryExpr([](double v) { return v == 0.0 ? 0.0 : 1.0 / v; });
    return detail::make_op(std::move(out), {a}, [a](const Var& g) {
        return std::vector<Var>{neg(mul(g, square(safe_reciprocal(a))))};
    });
}

namespace detail {

inline Matrix logsumexp_rows_value(const Matrix& z) {
    Matrix out(z.rows(), 1);
    for (Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        out(i, 0) = m + std::log((z.row(i).array() - m).exp().sum());
    }
    return out;
}

inline Matrix softmax_rows_value(const Matrix& z) {
    Matrix out(z.rows(), z.cols());
    for (Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        out.row(i) = (z.row(i).array() - m).exp().matrix();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

}  // namespace detail

inline Var logsumexp_rows(const Var& a) {
    const Index c = a.cols();
    return detail::make_op(detail::logsumexp_rows_value(a.value()), {a}, [a, c](const Var& g) {
        return std::vector<Var>{mul(broadcast_cols(g, c), softmax_rows(a))};
    });
}

inline Var softmax_rows(const Var& a) {
    const Index c = a.cols();
    return detail::make_op(detail::softmax_rows_value(a.value()), {a}, [a, c](const Var& g) {
        const Var s = softmax_rows(a);
        return std::vector<Var>{mul(s, sub(g, broadcast_cols(sum_cols(mul(g, s)), c)))};
    });
}

inline Var log_softmax_rows(const Var& a) {
    return sub(a, broadcast_cols(logsumexp_rows(a), a.cols()));
}

// Gradient of the norm at a zero row is zero (subgradient choice).
inline Var norm_rows(const Var& a) {
    const Index c = a.cols();
    return detail::make_op(a.value().rowwise().norm(), {a}, [a, c](const Var& g) {
        return std::vector<Var>{mul(broadcast_cols(mul(g, safe_reciprocal(norm_rows(a))), c), a)};
    });
}

inline Var norm_all(const Var& a) {
    const Index r = a.rows(), c = a.cols();
    return detail::make_op(Matrix::Constant(1, 1, a.value().norm()), {a}, [a, r, c](const Var& g) {
        return std::vector<Var>{mul(expand_scalar(mul(g, safe_reciprocal(norm_all(a))), r, c), a)};
    });
}

/// Row-major reshape (flat order r * cols + c is preserved).
inline Var reshape(const Var& a, Index rows, Index cols) {
    require(rows * cols == a.rows() * a.cols(), ErrorKind::invalid_input, "reshape: size mismatch");
    const Index r0 = a.rows(), c0 = a.cols();
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMajor src = a.value();
    Matrix out = Eigen::Map<const RowMajor>(src.data(), rows, cols);
    return detail::make_op(std::move(out), {a},
                           [r0, c0](const Var& g) { return std::vector<Var>{reshape(g, r0, c0)}; });
}

/// out.flat[k] = a.flat[map[k]], or 0 when map[k] < 0.
inline Var gather(const Var& a, std::shared_ptr<const std::vector<Index>> map, Index rows, Index cols) {
    require(static_cast<Index>(map->size()) == rows * cols, ErrorKind::invalid_input, "gather: map size mismatch");
    const Index r0 = a.rows(), c0 = a.cols();
    const Matrix& src = a.value();
    Matrix out(rows, cols);
    for (Index k = 0; k < rows * cols; ++k) {
        const Index from = (*map)[static_cast<std::size_t>(k)];
        out(k / cols, k % cols) = from < 0 ? 0.0 : src(from / c0, from % c0);
    }
    return detail::make_op(std::move(out), {a}, [map, r0, c0](const Var& g) {
        return std::vector<Var>{scatter_add(g, map, r0, c0)};
    });
}

/// Adjoint of gather: out.flat[map[k]] += a.flat[k].
inline Var scatter_add(const Var& a, std::shared_ptr<const std::vector<Index>> map, Index rows, Index cols) {
    const Index c0 = a.cols();
    const Matrix& src = a.value();
    Matrix out = Matrix::Zero(rows, cols);
    for (Index k = 0; k < a.rows() * a.cols(); ++k) {
        const Index to = (*map)[static_cast<std::size_t>(k)];
        if (to >= 0) out(to / cols, to % cols) += src(k / c0, k % c0);
    }
    const Index r0 = a.rows();
    return detail::make_op(std::move(out), {a}, [map, r0, c0](const Var& g) {
        return std::vector<Var>{gather(g, map, r0, c0)};
    });
}

// ---------------------------------------------------------------------------

/// Gradients of a scalar `output` with respect to `inputs`. With
/// `create_graph` the returned gradients are differentiable graph nodes;
/// otherwise they are detached constants. Inputs the output does not depend
/// on receive zeros.
inline std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false) {
    require(output.rows() == 1 && output.cols() == 1, ErrorKind::invalid_input,
            "grad: output must be a scalar");

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    {
        std::vector<std::pair<Node*, std::size_t>> stack;
        if (output.requires_grad()) {
            stack.emplace_back(output.node(), 0);
            visited.insert(output.node());
        }
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* parent = node->parents[next++].node();
                if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::unordered_map<Node*, Var> grads;
    {
        std::unique_ptr<NoGradGuard> guard;
        if (!create_graph) guard = std::make_unique<NoGradGuard>();
        if (output.requires_grad()) grads[output.node()] = scalar_constant(1.0);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            auto found = grads.find(node);
            if (found == grads.end() || !node->backward) continue;
            const Var g = found->second;
            std::vector<Var> parent_grads = node->backward(g);
            for (std::size_t i = 0; i < node->parents.size(); ++i) {
                if (!parent_grads[i].defined()) continue;
                Node* parent = node->parents[i].node();
                if (!parent->requires_grad) continue;
                auto slot = grads.find(parent);
                if (slot == grads.end()) {
                    grads.emplace(parent, parent_grads[i]);
                } else {
                    slot->second = add(slot->second, parent_grads[i]);
                }
            }
        }
    }

    std::vector<Var> result;
    result.reserve(inputs.size());
    for (const auto& input : inputs) {
        auto found = grads.find(input.node());
        if (found == grads.end()) {
            result.push_back(constant(Matrix::Zero(input.rows(), input.cols())));
        } else {
            result.push_back(create_graph ? found->second : detach(found->second));
        }
    }
    return result;
}

inline Var grad(const Var& output, const Var& input, bool create_graph = false) {
    return grad(output, std::span<const Var>(&input, 1), create_graph).front();
}

}  // namespace kdiga::ad

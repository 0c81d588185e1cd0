#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every backward rule is itself expressed with recorded ops, so
// gradients can be differentiated again (needed by gradient matching).

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmidd/error.hpp"

namespace cmidd::ad {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) throw Error(ErrorKind::shape_mismatch, "matrix payload does not match shape");
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    friend bool operator==(const Matrix&, const Matrix&) = default;
};

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Var;
using BackwardFn = std::function<std::vector<Var>(const Var& grad, const std::vector<bool>& needed)>;

struct Node {
    Matrix value;
    bool requires_grad = false;
    std::vector<Var> inputs;
    BackwardFn backward;
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Matrix value) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        return Var(std::move(n));
    }
    static Var leaf(Matrix value) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = true;
        return Var(std::move(n));
    }
    static Var scalar(double v) { return constant(Matrix(1, 1, v)); }

    bool defined() const { return static_cast<bool>(node_); }
    const Matrix& value() const { return node_->value; }
    std::size_t rows() const { return node_->value.rows; }
    std::size_t cols() const { return node_->value.cols; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    double item() const { return node_->value.data.at(0); }
    Node* node() const { return node_.get(); }

private:
    std::shared_ptr<Node> node_;
};

inline Var make_result(Matrix value, std::vector<Var> inputs, BackwardFn backward) {
    bool track = detail::grad_enabled_flag() &&
                 std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (track) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

// ---- forward ops ----------------------------------------------------------

Var reduce_to(const Var& x, std::size_t rows, std::size_t cols);
Var broadcast_to(const Var& x, std::size_t rows, std::size_t cols);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var clamp_min(const Var& a, double floor);
Var gather(const Var& x, std::shared_ptr<const std::vector<long>> index, std::size_t rows, std::size_t cols);
Var scatter_add(const Var& x, std::shared_ptr<const std::vector<long>> index, std::size_t rows, std::size_t cols);

namespace detail {

inline std::size_t broadcast_dim(std::size_t a, std::size_t b) {
    if (a == b) return a;
    if (a == 1) return b;
    if (b == 1) return a;
    throw Error(ErrorKind::shape_mismatch, "incompatible broadcast dimensions " + std::to_string(a) + " vs " +
                                               std::to_string(b));
}

template <typename F>
Matrix broadcast_binary(const Matrix& a, const Matrix& b, F f) {
    std::size_t r = broadcast_dim(a.rows, b.rows);
    std::size_t c = broadcast_dim(a.cols, b.cols);
    Matrix out(r, c);
    const bool ar = a.rows == 1, ac = a.cols == 1, br = b.rows == 1, bc = b.cols == 1;
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double av = a(ar ? 0 : i, ac ? 0 : j);
            double bv = b(br ? 0 : i, bc ? 0 : j);
            out(i, j) = f(av, bv);
        }
    }
    return out;
}

template <typename F>
Matrix map(const Matrix& a, F f) {
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
    return out;
}

}  // namespace detail

inline Var reduce_to(const Var& x, std::size_t rows, std::size_t cols) {
    const Matrix& v = x.value();
    if (v.rows == rows && v.cols == cols) return x;
    if ((rows != 1 && rows != v.rows) || (cols != 1 && cols != v.cols))
        throw Error(ErrorKind::shape_mismatch, "reduce_to target is not a broadcast source");
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < v.rows; ++i)
        for (std::size_t j = 0; j < v.cols; ++j) out(rows == 1 ? 0 : i, cols == 1 ? 0 : j) += v(i, j);
    std::size_t in_rows = v.rows, in_cols = v.cols;
    return make_result(std::move(out), {x}, [in_rows, in_cols](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{broadcast_to(g, in_rows, in_cols)};
    });
}

inline Var broadcast_to(const Var& x, std::size_t rows, std::size_t cols) {
    const Matrix& v = x.value();
    if (v.rows == rows && v.cols == cols) return x;
    Matrix out = detail::broadcast_binary(v, Matrix(rows, cols), [](double a, double) { return a; });
    if (out.rows != rows || out.cols != cols) throw Error(ErrorKind::shape_mismatch, "broadcast_to shape");
    std::size_t in_rows = v.rows, in_cols = v.cols;
    return make_result(std::move(out), {x}, [in_rows, in_cols](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{reduce_to(g, in_rows, in_cols)};
    });
}

inline Var add(const Var& a, const Var& b) {
    Matrix out = detail::broadcast_binary(a.value(), b.value(), [](double x, double y) { return x + y; });
    auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    return make_result(std::move(out), {a, b}, [=](const Var& g, const std::vector<bool>& need) {
        return std::vector<Var>{need[0] ? reduce_to(g, ar, ac) : Var{}, need[1] ? reduce_to(g, br, bc) : Var{}};
    });
}

inline Var sub(const Var& a, const Var& b) {
    Matrix out = detail::broadcast_binary(a.value(), b.value(), [](double x, double y) { return x - y; });
    auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    return make_result(std::move(out), {a, b}, [=](const Var& g, const std::vector<bool>& need) {
        return std::vector<Var>{need[0] ? reduce_to(g, ar, ac) : Var{}, need[1] ? reduce_to(neg(g), br, bc) : Var{}};
    });
}

inline Var mul(const Var& a, const Var& b) {
    Matrix out = detail::broadcast_binary(a.value(), b.value(), [](double x, double y) { return x * y; });
    return make_result(std::move(out), {a, b}, [a, b](const Var& g, const std::vector<bool>& need) {
        return std::vector<Var>{need[0] ? reduce_to(mul(g, b), a.rows(), a.cols()) : Var{},
                                need[1] ? reduce_to(mul(g, a), b.rows(), b.cols()) : Var{}};
    });
}

inline Var div(const Var& a, const Var& b) {
    Matrix out = detail::broadcast_binary(a.value(), b.value(), [](double x, double y) { return x / y; });
    return make_result(std::move(out), {a, b}, [a, b](const Var& g, const std::vector<bool>& need) {
        Var ga, gb;
        if (need[0]) ga = reduce_to(div(g, b), a.rows(), a.cols());
        if (need[1]) gb = reduce_to(neg(div(mul(g, a), mul(b, b))), b.rows(), b.cols());
        return std::vector<Var>{ga, gb};
    });
}

inline Var neg(const Var& a) {
    return make_result(detail::map(a.value(), [](double x) { return -x; }), {a},
                       [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double c) {
    return make_result(detail::map(a.value(), [c](double x) { return x * c; }), {a},
                       [c](const Var& g, const std::vector<bool>&) { return std::vector<Var>{scale(g, c)}; });
}

inline Var matmul(const Var& a, const Var& b) {
    const Matrix& x = a.value();
    const Matrix& y = b.value();
    if (x.cols != y.rows)
        throw Error(ErrorKind::shape_mismatch,
                    "matmul inner dimensions " + std::to_string(x.cols) + " vs " + std::to_string(y.rows));
    Matrix out(x.rows, y.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double* orow = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < x.cols; ++k) {
            double xv = x(i, k);
            if (xv == 0.0) continue;
            const double* yrow = y.data.data() + k * y.cols;
            for (std::size_t j = 0; j < y.cols; ++j) orow[j] += xv * yrow[j];
        }
    }
    return make_result(std::move(out), {a, b}, [a, b](const Var& g, const std::vector<bool>& need) {
        return std::vector<Var>{need[0] ? matmul(g, transpose(b)) : Var{},
                                need[1] ? matmul(transpose(a), g) : Var{}};
    });
}

inline Var transpose(const Var& a) {
    const Matrix& x = a.value();
    Matrix out(x.cols, x.rows);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
    return make_result(std::move(out), {a},
                       [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{transpose(g)}; });
}

inline Var tanh(const Var& a) {
    return make_result(detail::map(a.value(), [](double x) { return std::tanh(x); }), {a},
                       [a](const Var& g, const std::vector<bool>&) {
                           Var t = tanh(a);
                           return std::vector<Var>{mul(g, sub(Var::scalar(1.0), mul(t, t)))};
                       });
}

inline Var exp(const Var& a) {
    return make_result(detail::map(a.value(), [](double x) { return std::exp(x); }), {a},
                       [a](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul(g, exp(a))}; });
}

inline Var log(const Var& a) {
    return make_result(detail::map(a.value(), [](double x) { return std::log(x); }), {a},
                       [a](const Var& g, const std::vector<bool>&) { return std::vector<Var>{div(g, a)}; });
}

inline Var sqrt(const Var& a) {
    return make_result(detail::map(a.value(), [](double x) { return std::sqrt(x); }), {a},
                       [a](const Var& g, const std::vector<bool>&) {
                           return std::vector<Var>{div(g, scale(sqrt(a), 2.0))};
                       });
}

/// max(a, floor) elementwise; the gradient is passed only where a > floor.
inline Var clamp_min(const Var& a, double floor) {
    const Matrix& x = a.value();
    Matrix out(x.rows, x.cols);
    Matrix mask(x.rows, x.cols);
    bool any_clamped = false;
    for (std::size_t i = 0; i < x.size(); ++i) {
        bool pass = x.data[i] > floor;
        out.data[i] = pass ? x.data[i] : floor;
        mask.data[i] = pass ? 1.0 : 0.0;
        any_clamped |= !pass;
    }
    if (!any_clamped) {
        return make_result(std::move(out), {a}, [](const Var& g, const std::vector<bool>&) {
            return std::vector<Var>{g};
        });
    }
    Var m = Var::constant(std::move(mask));
    return make_result(std::move(out), {a},
                       [m](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul(g, m)}; });
}

/// out.flat[i] = x.flat[index[i]], or 0 where index[i] < 0.
inline Var gather(const Var& x, std::shared_ptr<const std::vector<long>> index, std::size_t rows, std::size_t cols) {
    if (index->size() != rows * cols) throw Error(ErrorKind::shape_mismatch, "gather index size");
    const Matrix& v = x.value();
    Matrix out(rows, cols);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        long k = idx[i];
        if (k >= 0) out.data[i] = v.data[static_cast<std::size_t>(k)];
    }
    std::size_t in_rows = v.rows, in_cols = v.cols;
    return make_result(std::move(out), {x}, [index, in_rows, in_cols](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{scatter_add(g, index, in_rows, in_cols)};
    });
}

/// Adjoint of gather: out.flat[index[i]] += x.flat[i].
inline Var scatter_add(const Var& x, std::shared_ptr<const std::vector<long>> index, std::size_t rows,
                       std::size_t cols) {
    const Matrix& v = x.value();
    if (index->size() != v.size()) throw Error(ErrorKind::shape_mismatch, "scatter index size");
    Matrix out(rows, cols);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        long k = idx[i];
        if (k >= 0) out.data[static_cast<std::size_t>(k)] += v.data[i];
    }
    std::size_t in_rows = v.rows, in_cols = v.cols;
    return make_result(std::move(out), {x}, [index, in_rows, in_cols](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{gather(g, index, in_rows, in_cols)};
    });
}

// ---- composites -----------------------------------------------------------

inline Var detach(const Var& x) { return Var::constant(x.value()); }
inline Var sum_all(const Var& x) { return reduce_to(x, 1, 1); }
inline Var sum_rows(const Var& x) { return reduce_to(x, 1, x.cols()); }
inline Var sum_cols(const Var& x) { return reduce_to(x, x.rows(), 1); }

/// Selects whole rows (in the given order) into a new matrix.
inline Var select_rows(const Var& x, std::span<const std::size_t> rows) {
    auto idx = std::make_shared<std::vector<long>>();
    idx->reserve(rows.size() * x.cols());
    for (auto r : rows)
        for (std::size_t j = 0; j < x.cols(); ++j) idx->push_back(static_cast<long>(r * x.cols() + j));
    return gather(x, std::move(idx), rows.size(), x.cols());
}

inline Matrix row_max(const Matrix& x) {
    Matrix out(x.rows, 1);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto r = x.row(i);
        out(i, 0) = r.empty() ? 0.0 : *std::max_element(r.begin(), r.end());
    }
    return out;
}

/// Row-wise softmax with max subtraction. The subtracted max is a constant,
/// which leaves the gradient unchanged because softmax is shift invariant.
inline Var softmax_rows(const Var& x) {
    Var shifted = sub(x, Var::constant(row_max(x.value())));
    Var e = exp(shifted);
    return div(e, sum_cols(e));
}

/// Mean cross-entropy of row logits against integer labels.
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
    const std::size_t n = logits.rows(), c = logits.cols();
    if (labels.size() != n) throw Error(ErrorKind::shape_mismatch, "cross_entropy label count");
    Var shifted = sub(logits, Var::constant(row_max(logits.value())));
    Var lse = log(sum_cols(exp(shifted)));
    auto idx = std::make_shared<std::vector<long>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw Error(ErrorKind::label_out_of_range, "cross_entropy label");
        (*idx)[i] = static_cast<long>(i * c + static_cast<std::size_t>(labels[i]));
    }
    Var picked = gather(shifted, std::move(idx), n, 1);
    return scale(sum_all(sub(lse, picked)), 1.0 / static_cast<double>(n));
}

// ---- reverse sweep --------------------------------------------------------

/// Gradients of the scalar `y` with respect to each of `xs`. With
/// create_graph the returned gradients are themselves differentiable.
inline std::vector<Var> grad(const Var& y, std::span<const Var> xs, bool create_graph = false) {
    if (y.value().size() != 1) throw Error(ErrorKind::shape_mismatch, "grad requires a scalar output");

    std::vector<Var> result(xs.size());
    auto zeros_for = [&](std::size_t i) { return Var::constant(Matrix(xs[i].rows(), xs[i].cols())); };
    if (!y.requires_grad()) {
        for (std::size_t i = 0; i < xs.size(); ++i) result[i] = zeros_for(i);
        return result;
    }

    // Topological order, inputs before outputs.
    std::vector<Node*> order;
    std::unordered_map<Node*, bool> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{y.node(), 0}};
    visited[y.node()] = true;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].node();
            if (child && child->requires_grad && !visited[child]) {
                visited[child] = true;
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<Node*, bool> needed;
    for (const auto& x : xs)
        if (x.node()) needed[x.node()] = true;
    for (Node* n : order) {
        if (needed[n]) continue;
        for (const auto& in : n->inputs)
            if (in.node() && needed[in.node()]) {
                needed[n] = true;
                break;
            }
    }

    std::unordered_map<Node*, Var> grads;
    {
        std::unique_ptr<NoGradGuard> guard;
        if (!create_graph) guard = std::make_unique<NoGradGuard>();
        grads[y.node()] = Var::constant(Matrix(1, 1, 1.0));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            auto g = grads.find(n);
            if (g == grads.end() || !n->backward || !needed[n]) continue;
            std::vector<bool> mask(n->inputs.size());
            bool any = false;
            for (std::size_t i = 0; i < n->inputs.size(); ++i) {
                Node* in = n->inputs[i].node();
                mask[i] = in && in->requires_grad && needed[in];
                any |= mask[i];
            }
            if (!any) continue;
            std::vector<Var> input_grads = n->backward(g->second, mask);
            for (std::size_t i = 0; i < n->inputs.size(); ++i) {
                if (!mask[i] || !input_grads[i].defined()) continue;
                Node* in = n->inputs[i].node();
                auto existing = grads.find(in);
                if (existing == grads.end())
                    grads.emplace(in, input_grads[i]);
                else
                    existing->second = add(existing->second, input_grads[i]);
            }
        }
    }

    for (std::size_t i = 0; i < xs.size(); ++i) {
        auto g = grads.find(xs[i].node());
        result[i] = g == grads.end() ? zeros_for(i) : g->second;
    }
    return result;
}

inline Var grad(const Var& y, const Var& x, bool create_graph = false) {
    return grad(y, std::span<const Var>(&x, 1), create_graph).front();
}

}  // namespace cmidd::ad

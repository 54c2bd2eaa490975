// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with define-by-run reverse-mode differentiation.
//
// Every op that touches a tensor requiring gradients records a node holding
// its parents and a backward rule. Nodes carry a monotonically increasing
// sequence number, so sorting the reachable subgraph by sequence number gives
// the reverse topological order used by backward(). A recorded graph can be
// differentiated exactly once; the backward rules are released afterwards.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "compt/error.hpp"

namespace compt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool consumed = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            fail(ErrorCode::kShapeMismatch, "tensor data length " + std::to_string(data.size()) +
                                                " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        node->seq = detail::next_seq();
        if (requires_grad) node->ensure_grad();
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({}, {value}, requires_grad);
    }

    [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
    [[nodiscard]] const Shape& shape() const { return node_->shape; }
    [[nodiscard]] std::size_t dim() const { return node_->shape.size(); }
    [[nodiscard]] std::size_t numel() const { return node_->data.size(); }
    [[nodiscard]] std::size_t rows() const { return dim() == 2 ? shape()[0] : 1; }
    [[nodiscard]] std::size_t cols() const { return dim() == 0 ? 1 : shape().back(); }
    [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
    [[nodiscard]] const char* op() const { return node_->op; }

    [[nodiscard]] std::span<const double> data() const { return node_->data; }
    [[nodiscard]] std::span<double> mutable_data() { return node_->data; }
    [[nodiscard]] std::span<const double> grad() const { return node_->grad; }
    [[nodiscard]] std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    [[nodiscard]] double item() const {
        if (numel() != 1) {
            fail(ErrorCode::kShapeMismatch, "item() on tensor of shape " + shape_str(shape()));
        }
        return node_->data[0];
    }
    [[nodiscard]] double at(std::size_t i) const { return node_->data.at(i); }
    [[nodiscard]] double at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Marks a leaf as trainable (or not). Only valid on leaves.
    void set_requires_grad(bool value) {
        if (!node_->parents.empty()) {
            fail(ErrorCode::kInvalidArgument, "set_requires_grad on non-leaf tensor");
        }
        node_->requires_grad = value;
        if (value) node_->ensure_grad();
        else node_->grad.clear();
    }

    /// Copy of the values as a new constant leaf.
    [[nodiscard]] Tensor detach() const { return from(shape(), node_->data, false); }

    [[nodiscard]] const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        fail(ErrorCode::kShapeMismatch,
             std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline void require_matrix(const char* op, const Tensor& a) {
    if (a.dim() != 2) {
        fail(ErrorCode::kShapeMismatch, std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
    }
}

// Creates the output node; records parents and backward only when some input
// requires a gradient.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = next_seq();
    node->op = op;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        for (auto& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline bool wants_grad(const std::shared_ptr<Node>& n) { return n->requires_grad; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!detail::wants_grad(p)) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const double sign[2] = {1.0, -1.0};
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!detail::wants_grad(p)) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += sign[k] * self.grad[i];
        }
    });
}

/// Adds a length-n vector to every row of an m×n matrix.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
    detail::require_matrix("add_bias", a);
    if (bias.numel() != a.cols()) {
        fail(ErrorCode::kShapeMismatch,
             "add_bias: " + shape_str(a.shape()) + " vs " + shape_str(bias.shape()));
    }
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto b = bias.data();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += b[c];
    return detail::make_result("add_bias", a.shape(), std::move(out), {a, bias},
                               [m, n](detail::Node& self) {
                                   auto& pa = self.parents[0];
                                   auto& pb = self.parents[1];
                                   if (detail::wants_grad(pa)) {
                                       pa->ensure_grad();
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
                                   }
                                   if (detail::wants_grad(pb)) {
                                       pb->ensure_grad();
                                       for (std::size_t r = 0; r < m; ++r)
                                           for (std::size_t c = 0; c < n; ++c) pb->grad[c] += self.grad[r * n + c];
                                   }
                               });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (detail::wants_grad(pa)) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
        }
        if (detail::wants_grad(pb)) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
    return detail::make_result("scale", a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += factor * self.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& a, double value) {
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + value;
    return detail::make_result("add_scalar", a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    });
}

/// Multiplies every entry of `a` by the single value held in `s`.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) {
        fail(ErrorCode::kShapeMismatch, "mul_scalar: scalar operand has shape " + shape_str(s.shape()));
    }
    const double f = s.item();
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * x[i];
    return detail::make_result("mul_scalar", a.shape(), std::move(out), {a, s}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& ps = self.parents[1];
        if (detail::wants_grad(pa)) {
            pa->ensure_grad();
            const double f = ps->data[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += f * self.grad[i];
        }
        if (detail::wants_grad(ps)) {
            ps->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa->data[i];
            ps->grad[0] += acc;
        }
    });
}

/// Single entry of a tensor as a scalar tensor.
inline Tensor pick(const Tensor& a, std::size_t index) {
    if (index >= a.numel()) {
        fail(ErrorCode::kOutOfRange, "pick: index " + std::to_string(index) + " outside " + shape_str(a.shape()));
    }
    return detail::make_result("pick", {}, {a.data()[index]}, {a}, [index](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        p->grad[index] += self.grad[0];
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix("matmul", a);
    detail::require_matrix("matmul", b);
    if (a.cols() != b.rows()) {
        fail(ErrorCode::kShapeMismatch, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(a.rows());
    const auto k = static_cast<Eigen::Index>(a.cols());
    const auto n = static_cast<Eigen::Index>(b.cols());
    std::vector<double> out(static_cast<std::size_t>(m * n));
    detail::MapMat c(out.data(), m, n);
    c.noalias() = detail::ConstMapMat(a.data().data(), m, k) * detail::ConstMapMat(b.data().data(), k, n);
    return detail::make_result(
        "matmul", {a.rows(), b.cols()}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            detail::ConstMapMat dc(self.grad.data(), m, n);
            if (detail::wants_grad(pa)) {
                pa->ensure_grad();
                detail::MapMat(pa->grad.data(), m, k).noalias() +=
                    dc * detail::ConstMapMat(pb->data.data(), k, n).transpose();
            }
            if (detail::wants_grad(pb)) {
                pb->ensure_grad();
                detail::MapMat(pb->grad.data(), k, n).noalias() +=
                    detail::ConstMapMat(pa->data.data(), m, k).transpose() * dc;
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_matrix("transpose", a);
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    std::vector<double> out(m * n);
    const auto x = a.data();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c * m + r] = x[r * n + c];
    return detail::make_result("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) p->grad[r * n + c] += self.grad[c * m + r];
    });
}

/// Stacks matrices with equal column counts along the token (row) axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail(ErrorCode::kInvalidArgument, "concat_rows: no inputs");
    const std::size_t n = parts.front().cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_matrix("concat_rows", p);
        if (p.cols() != n) {
            fail(ErrorCode::kShapeMismatch,
                 "concat_rows: " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
        }
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(total * n);
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return detail::make_result("concat_rows", {total, n}, std::move(out), parts,
                               [offsets](detail::Node& self) {
                                   for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                       auto& p = self.parents[k];
                                       if (!detail::wants_grad(p)) continue;
                                       p->ensure_grad();
                                       for (std::size_t i = 0; i < p->data.size(); ++i)
                                           p->grad[i] += self.grad[offsets[k] + i];
                                   }
                               });
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require_matrix("slice_rows", a);
    if (begin > end || end > a.rows()) {
        fail(ErrorCode::kOutOfRange, "slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                                         ") of " + shape_str(a.shape()));
    }
    const std::size_t n = a.cols();
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>(end * n));
    return detail::make_result("slice_rows", {end - begin, n}, std::move(out), {a},
                               [begin, n](detail::Node& self) {
                                   auto& p = self.parents[0];
                                   p->ensure_grad();
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       p->grad[begin * n + i] += self.grad[i];
                               });
}

/// Same data, new shape with the same element count.
inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        fail(ErrorCode::kShapeMismatch, "reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad_scalar(double x) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
    return detail::make_result("sigmoid", a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double s = self.data[i];
            p->grad[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(x[i] > 0.0)) {
            fail(ErrorCode::kDomain, "log of non-positive value " + std::to_string(x[i]) + " at index " +
                                         std::to_string(i));
        }
        out[i] = std::log(x[i]);
    }
    return detail::make_result("log", a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] / p->data[i];
    });
}

/// Exact GELU, x * Phi(x).
inline Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(x[i]);
    return detail::make_result("gelu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * gelu_grad_scalar(p->data[i]);
    });
}

/// Softmax along `axis`. Vectors use axis 0; matrices accept 0 (columns) or 1 (rows).
inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (a.dim() == 0 || a.dim() > 2 || axis >= a.dim()) {
        fail(ErrorCode::kInvalidArgument,
             "softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
    }
    const std::size_t rows = a.dim() == 2 ? a.rows() : 1;
    const std::size_t cols = a.dim() == 2 ? a.cols() : a.numel();
    // Lines along the softmax axis: `count` lines of `len` entries, stride between entries.
    const bool along_rows = (a.dim() == 1) || axis == 1;
    const std::size_t count = along_rows ? rows : cols;
    const std::size_t len = along_rows ? cols : rows;
    const std::size_t stride = along_rows ? 1 : cols;
    const std::size_t step = along_rows ? cols : 1;
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t l = 0; l < count; ++l) {
        const std::size_t base = l * step;
        double mx = x[base];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * stride]);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            const double e = std::exp(x[base + j * stride] - mx);
            out[base + j * stride] = e;
            z += e;
        }
        for (std::size_t j = 0; j < len; ++j) out[base + j * stride] /= z;
    }
    return detail::make_result("softmax", a.shape(), std::move(out), {a},
                               [count, len, stride, step](detail::Node& self) {
                                   auto& p = self.parents[0];
                                   p->ensure_grad();
                                   for (std::size_t l = 0; l < count; ++l) {
                                       const std::size_t base = l * step;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < len; ++j) {
                                           const std::size_t i = base + j * stride;
                                           dot += self.grad[i] * self.data[i];
                                       }
                                       for (std::size_t j = 0; j < len; ++j) {
                                           const std::size_t i = base + j * stride;
                                           p->grad[i] += self.data[i] * (self.grad[i] - dot);
                                       }
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::make_result("sum", {}, {s}, {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (auto& g : p->grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) fail(ErrorCode::kInvalidArgument, "mean of empty tensor");
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return detail::make_result("mean", {}, {s * inv}, {a}, [inv](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (auto& g : p->grad) g += self.grad[0] * inv;
    });
}

/// Rows of `table` selected by `ids`.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    detail::require_matrix("embedding", table);
    const std::size_t n = table.cols();
    std::vector<double> out;
    out.reserve(ids.size() * n);
    for (auto id : ids) {
        if (id >= table.rows()) {
            fail(ErrorCode::kOutOfRange,
                 "embedding: id " + std::to_string(id) + " outside table " + shape_str(table.shape()));
        }
        const auto row = table.data().subspan(id * n, n);
        out.insert(out.end(), row.begin(), row.end());
    }
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    return detail::make_result("embedding", {ids.size(), n}, std::move(out), {table},
                               [idv, n](detail::Node& self) {
                                   auto& p = self.parents[0];
                                   p->ensure_grad();
                                   for (std::size_t r = 0; r < idv.size(); ++r)
                                       for (std::size_t c = 0; c < n; ++c)
                                           p->grad[idv[r] * n + c] += self.grad[r * n + c];
                               });
}

/// Mean softmax cross-entropy of B×C logits against class indices.
inline Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const std::size_t> targets) {
    detail::require_matrix("cross_entropy_with_logits", logits);
    const std::size_t b = logits.rows();
    const std::size_t c = logits.cols();
    if (targets.size() != b) {
        fail(ErrorCode::kShapeMismatch, "cross_entropy_with_logits: logits " + shape_str(logits.shape()) +
                                            " vs " + std::to_string(targets.size()) + " targets");
    }
    std::vector<double> probs(b * c);
    double loss = 0.0;
    const auto x = logits.data();
    for (std::size_t r = 0; r < b; ++r) {
        if (targets[r] >= c) {
            fail(ErrorCode::kOutOfRange, "cross_entropy_with_logits: target " + std::to_string(targets[r]) +
                                             " outside " + std::to_string(c) + " classes");
        }
        double mx = x[r * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[r * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[r * c + j] = std::exp(x[r * c + j] - mx);
            z += probs[r * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
        loss += (mx + std::log(z)) - x[r * c + targets[r]];
    }
    std::vector<std::size_t> tv(targets.begin(), targets.end());
    const double inv = 1.0 / static_cast<double>(b);
    return detail::make_result("cross_entropy_with_logits", {}, {loss * inv}, {logits},
                               [probs = std::move(probs), tv, c, inv](detail::Node& self) {
                                   auto& p = self.parents[0];
                                   p->ensure_grad();
                                   const double g = self.grad[0] * inv;
                                   for (std::size_t r = 0; r < tv.size(); ++r) {
                                       for (std::size_t j = 0; j < c; ++j) {
                                           const double onehot = j == tv[r] ? 1.0 : 0.0;
                                           p->grad[r * c + j] += g * (probs[r * c + j] - onehot);
                                       }
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Transformer building blocks
// ---------------------------------------------------------------------------

/// Row-wise layer normalization with learned gain and shift.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& shift, double eps = 1e-6) {
    detail::require_matrix("layer_norm", a);
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    if (gain.numel() != n || shift.numel() != n) {
        fail(ErrorCode::kShapeMismatch, "layer_norm: " + shape_str(a.shape()) + " vs gain " +
                                            shape_str(gain.shape()) + " shift " + shape_str(shift.shape()));
    }
    std::vector<double> out(m * n);
    std::vector<double> xhat(m * n);
    std::vector<double> inv_std(m);
    const auto x = a.data();
    const auto g = gain.data();
    const auto s = shift.data();
    for (std::size_t r = 0; r < m; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) mu += x[r * n + c];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            const double d = x[r * n + c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            xhat[r * n + c] = (x[r * n + c] - mu) * inv_std[r];
            out[r * n + c] = xhat[r * n + c] * g[c] + s[c];
        }
    }
    return detail::make_result(
        "layer_norm", a.shape(), std::move(out), {a, gain, shift},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](detail::Node& self) {
            auto& pa = self.parents[0];
            auto& pg = self.parents[1];
            auto& ps = self.parents[2];
            if (detail::wants_grad(pg)) pg->ensure_grad();
            if (detail::wants_grad(ps)) ps->ensure_grad();
            if (detail::wants_grad(pa)) pa->ensure_grad();
            for (std::size_t r = 0; r < m; ++r) {
                double mean_dx = 0.0;
                double mean_dx_xhat = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    const std::size_t i = r * n + c;
                    const double dy = self.grad[i];
                    if (detail::wants_grad(pg)) pg->grad[c] += dy * xhat[i];
                    if (detail::wants_grad(ps)) ps->grad[c] += dy;
                    const double dxh = dy * pg->data[c];
                    mean_dx += dxh;
                    mean_dx_xhat += dxh * xhat[i];
                }
                if (!detail::wants_grad(pa)) continue;
                mean_dx /= static_cast<double>(n);
                mean_dx_xhat /= static_cast<double>(n);
                for (std::size_t c = 0; c < n; ++c) {
                    const std::size_t i = r * n + c;
                    const double dxh = self.grad[i] * pg->data[c];
                    pa->grad[i] += inv_std[r] * (dxh - mean_dx - xhat[i] * mean_dx_xhat);
                }
            }
        });
}

/// Scaled dot-product multi-head attention over `batch` stacked sequences.
///
/// `q`, `k`, `v` are (batch*seq)×d. `key_mask` has batch*seq entries (1 keeps
/// a key position, 0 removes it); an empty mask keeps everything. Masked
/// positions receive exactly zero attention weight.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                   std::size_t seq, std::span<const std::uint8_t> key_mask = {}) {
    detail::require_same_shape("multi_head_attention", q, k);
    detail::require_same_shape("multi_head_attention", q, v);
    detail::require_matrix("multi_head_attention", q);
    const std::size_t d = q.cols();
    if (heads == 0 || d % heads != 0 || seq == 0 || q.rows() % seq != 0) {
        fail(ErrorCode::kShapeMismatch, "multi_head_attention: " + shape_str(q.shape()) + " with " +
                                            std::to_string(heads) + " heads, seq " + std::to_string(seq));
    }
    if (!key_mask.empty() && key_mask.size() != q.rows()) {
        fail(ErrorCode::kShapeMismatch, "multi_head_attention: mask of " + std::to_string(key_mask.size()) +
                                            " entries for " + std::to_string(q.rows()) + " positions");
    }
    const std::size_t batch = q.rows() / seq;
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
    if (mask.empty()) mask.assign(q.rows(), 1);

    std::vector<double> probs(batch * heads * seq * seq, 0.0);
    std::vector<double> out(q.numel(), 0.0);
    const auto Q = q.data();
    const auto K = k.data();
    const auto V = v.data();
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t row0 = b * seq;
        bool any = false;
        for (std::size_t j = 0; j < seq; ++j) any = any || mask[row0 + j] != 0;
        if (!any) fail(ErrorCode::kInvalidArgument, "multi_head_attention: every key masked in sequence " +
                                                        std::to_string(b));
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            double* A = probs.data() + ((b * heads + h) * seq * seq);
            for (std::size_t i = 0; i < seq; ++i) {
                const double* qi = Q.data() + (row0 + i) * d + off;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < seq; ++j) {
                    if (!mask[row0 + j]) continue;
                    const double* kj = K.data() + (row0 + j) * d + off;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt;
                    A[i * seq + j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < seq; ++j) {
                    if (!mask[row0 + j]) continue;
                    const double e = std::exp(A[i * seq + j] - mx);
                    A[i * seq + j] = e;
                    z += e;
                }
                double* oi = out.data() + (row0 + i) * d + off;
                for (std::size_t j = 0; j < seq; ++j) {
                    if (!mask[row0 + j]) continue;
                    A[i * seq + j] /= z;
                    const double a = A[i * seq + j];
                    const double* vj = V.data() + (row0 + j) * d + off;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += a * vj[c];
                }
            }
        }
    }
    return detail::make_result(
        "multi_head_attention", q.shape(), std::move(out), {q, k, v},
        [probs = std::move(probs), mask = std::move(mask), batch, heads, seq, d, dh,
         inv_sqrt](detail::Node& self) {
            auto& pq = self.parents[0];
            auto& pk = self.parents[1];
            auto& pv = self.parents[2];
            const bool gq = detail::wants_grad(pq);
            const bool gk = detail::wants_grad(pk);
            const bool gv = detail::wants_grad(pv);
            if (gq) pq->ensure_grad();
            if (gk) pk->ensure_grad();
            if (gv) pv->ensure_grad();
            std::vector<double> ds(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t row0 = b * seq;
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = h * dh;
                    const double* A = probs.data() + ((b * heads + h) * seq * seq);
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* dO = self.grad.data() + (row0 + i) * d + off;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            ds[j] = 0.0;
                            if (!mask[row0 + j]) continue;
                            const double a = A[i * seq + j];
                            const double* vj = pv->data.data() + (row0 + j) * d + off;
                            double da = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) da += dO[c] * vj[c];
                            ds[j] = da;
                            dot += a * da;
                            if (gv) {
                                double* gvj = pv->grad.data() + (row0 + j) * d + off;
                                for (std::size_t c = 0; c < dh; ++c) gvj[c] += a * dO[c];
                            }
                        }
                        if (!gq && !gk) continue;
                        const double* qi = pq->data.data() + (row0 + i) * d + off;
                        double* gqi = gq ? pq->grad.data() + (row0 + i) * d + off : nullptr;
                        for (std::size_t j = 0; j < seq; ++j) {
                            if (!mask[row0 + j]) continue;
                            const double dsc = A[i * seq + j] * (ds[j] - dot) * inv_sqrt;
                            if (dsc == 0.0) continue;
                            if (gq) {
                                const double* kj = pk->data.data() + (row0 + j) * d + off;
                                for (std::size_t c = 0; c < dh; ++c) gqi[c] += dsc * kj[c];
                            }
                            if (gk) {
                                double* gkj = pk->grad.data() + (row0 + j) * d + off;
                                for (std::size_t c = 0; c < dh; ++c) gkj[c] += dsc * qi[c];
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
/// gradient. The graph is released afterwards; a second call on the same
/// graph raises kGraphConsumed.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        fail(ErrorCode::kNonScalarLoss, "backward on tensor of shape " + shape_str(loss.shape()));
    }
    const auto& root = loss.node();
    if (root->consumed) fail(ErrorCode::kGraphConsumed, "backward called twice on the same graph");
    if (!root->requires_grad) return;

    std::vector<std::shared_ptr<detail::Node>> order;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::shared_ptr<detail::Node>> stack{root};
    while (!stack.empty()) {
        auto n = std::move(stack.back());
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        if (n->consumed) fail(ErrorCode::kGraphConsumed, std::string("graph node '") + n->op + "' already consumed");
        for (const auto& p : n->parents) {
            if (p->requires_grad) stack.push_back(p);
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

    for (auto& n : order) {
        if (!n->parents.empty()) n->grad.assign(n->data.size(), 0.0);
    }
    root->grad.assign(1, 1.0);
    for (auto& n : order) {
        if (n->parents.empty()) continue;
        n->backward(*n);
        n->backward = nullptr;
        n->consumed = true;
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Max over coordinates of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8), using
/// central differences on every coordinate of every input in `points`.
inline double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& points, double epsilon) {
    if (!(epsilon > 1e-8 && epsilon < 1e-3)) {
        fail(ErrorCode::kInvalidArgument, "finite_diff_check: epsilon outside (1e-8, 1e-3)");
    }
    auto constants = [&](const std::vector<Tensor>& src) {
        std::vector<Tensor> out;
        out.reserve(src.size());
        for (const auto& p : src) out.push_back(Tensor::from(p.shape(), {p.data().begin(), p.data().end()}));
        return out;
    };
    const auto base = constants(points);
    const double f0 = f(base).item();
    const double f1 = f(constants(points)).item();
    if (f0 != f1 && !(std::isnan(f0) && std::isnan(f1))) {
        fail(ErrorCode::kNonDeterministic, "finite_diff_check: function differs across calls at the same point");
    }

    std::vector<Tensor> leaves;
    for (const auto& p : points) leaves.push_back(Tensor::from(p.shape(), {p.data().begin(), p.data().end()}, true));
    backward(f(leaves));

    double worst = 0.0;
    for (std::size_t t = 0; t < points.size(); ++t) {
        auto probe = constants(points);
        auto values = probe[t].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + epsilon;
            const double fp = f(probe).item();
            values[i] = orig - epsilon;
            const double fm = f(probe).item();
            values[i] = orig;
            const double g_fd = (fp - fm) / (2.0 * epsilon);
            const double g_ad = leaves[t].grad()[i];
            const double denom = std::max({std::abs(g_ad), std::abs(g_fd), 1e-8});
            worst = std::max(worst, std::abs(g_ad - g_fd) / denom);
        }
    }
    return worst;
}

inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                                double epsilon) {
    return finite_diff_check([&](const std::vector<Tensor>& xs) { return f(xs[0]); },
                             std::vector<Tensor>{point}, epsilon);
}

}  // namespace compt

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "trafficmae/errors.hpp"

namespace tmae {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/**
 * Node of the reverse-mode tape. Holds the value, the (lazily allocated)
 * gradient, and a closure pushing gradients into the parents.
 */
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    void zero_grad() { grad.assign(value.size(), 0.0); }
};

/// Shared handle to a tape node. Copies alias the same node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value.assign(shape_size(n->shape), 0.0);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(std::vector<double> values, Shape shape,
                       bool requires_grad = false) {
        if (values.size() != shape_size(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({v}, {1}, requires_grad);
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& value() const { return node_->value; }
    std::vector<double>& mutable_value() { return node_->value; }
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->zero_grad(); }

    double item() const {
        if (size() != 1) throw ArgumentError("item() on non-scalar tensor");
        return node_->value[0];
    }

    std::shared_ptr<TensorNode> node() const { return node_; }
    TensorNode* raw() const { return node_.get(); }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline std::shared_ptr<TensorNode> make_node(Shape shape,
                                             std::vector<std::shared_ptr<TensorNode>> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(shape_size(n->shape), 0.0);
    n->parents = std::move(parents);
    for (auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

// C[m x n] += op(A) * op(B); A is logically m x k after optional transpose.
inline void mm_accum(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n, bool ta, bool tb) {
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ai[p];
                if (av == 0.0) continue;
                const double* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!ta && tb) {
        // B stored n x k; C[i,j] = dot(A row i, B row j)
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                ci[j] += acc;
            }
        }
    } else if (ta && !tb) {
        // A stored k x m; C[i,j] = sum_p A[p,i] B[p,j]
        for (std::size_t p = 0; p < k; ++p) {
            const double* ap = a + p * m;
            const double* bp = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = ap[i];
                if (av == 0.0) continue;
                double* ci = c + i * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {
        // A stored k x m, B stored n x k
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * bj[p];
                ci[j] += acc;
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core ops
// ---------------------------------------------------------------------------

/// C = op(A) * op(B) with optional transposes; A, B rank-2.
inline Tensor matmul(const Tensor& A, const Tensor& B, bool transA = false,
                     bool transB = false) {
    if (A.rank() != 2 || B.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " +
                         shape_str(A.shape()) + " and " + shape_str(B.shape()));
    const std::size_t m = transA ? A.dim(1) : A.dim(0);
    const std::size_t k = transA ? A.dim(0) : A.dim(1);
    const std::size_t kb = transB ? B.dim(1) : B.dim(0);
    const std::size_t n = transB ? B.dim(0) : B.dim(1);
    if (k != kb)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(A.shape()) +
                         (transA ? "^T" : "") + " * " + shape_str(B.shape()) +
                         (transB ? "^T" : ""));

    auto node = detail::make_node({m, n}, {A.node(), B.node()});
    detail::mm_accum(A.value().data(), B.value().data(), node->value.data(), m, k, n,
                     transA, transB);

    TensorNode* out = node.get();
    auto an = A.node();
    auto bn = B.node();
    node->backward_fn = [out, an, bn, m, k, n, transA, transB]() {
        const double* g = out->grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            // dA = G * op(B)^T (arranged to match A's storage layout)
            if (!transA) {
                // stored m x k: dA = G * B^T (or G * B if B was transposed)
                detail::mm_accum(g, bn->value.data(), an->grad.data(), m, n, k, false,
                                 !transB);
            } else {
                // stored k x m: dA^T = op(B) * G^T  ->  dA_stored = op(B) * G^T
                if (!transB) {
                    // B stored k x n: dA_stored[k x m] = B * G^T
                    detail::mm_accum(bn->value.data(), g, an->grad.data(), k, n, m,
                                     false, true);
                } else {
                    // B stored n x k: dA_stored = B^T * G^T
                    detail::mm_accum(bn->value.data(), g, an->grad.data(), k, n, m,
                                     true, true);
                }
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (!transB) {
                // stored k x n: dB = op(A)^T * G
                detail::mm_accum(an->value.data(), g, bn->grad.data(), k, m, n, !transA,
                                 false);
            } else {
                // stored n x k: dB_stored = G^T * op(A)
                if (!transA) {
                    detail::mm_accum(g, an->value.data(), bn->grad.data(), n, m, k, true,
                                     false);
                } else {
                    detail::mm_accum(g, an->value.data(), bn->grad.data(), n, m, k, true,
                                     true);
                }
            }
        }
    };
    return Tensor(node);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto node = detail::make_node(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < node->value.size(); ++i)
        node->value[i] = a.value()[i] + b.value()[i];
    TensorNode* out = node.get();
    auto an = a.node(); auto bn = b.node();
    node->backward_fn = [out, an, bn]() {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) an->grad[i] += out->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) bn->grad[i] += out->grad[i];
        }
    };
    return Tensor(node);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto node = detail::make_node(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < node->value.size(); ++i)
        node->value[i] = a.value()[i] - b.value()[i];
    TensorNode* out = node.get();
    auto an = a.node(); auto bn = b.node();
    node->backward_fn = [out, an, bn]() {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) an->grad[i] += out->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) bn->grad[i] -= out->grad[i];
        }
    };
    return Tensor(node);
}

/// Element-wise product.
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    auto node = detail::make_node(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < node->value.size(); ++i)
        node->value[i] = a.value()[i] * b.value()[i];
    TensorNode* out = node.get();
    auto an = a.node(); auto bn = b.node();
    node->backward_fn = [out, an, bn]() {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                an->grad[i] += out->grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                bn->grad[i] += out->grad[i] * an->value[i];
        }
    };
    return Tensor(node);
}

/// y = a*x + b element-wise with scalar a, b.
inline Tensor affine(const Tensor& x, double a, double b) {
    auto node = detail::make_node(x.shape(), {x.node()});
    for (std::size_t i = 0; i < node->value.size(); ++i)
        node->value[i] = a * x.value()[i] + b;
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, a]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) xn->grad[i] += a * out->grad[i];
    };
    return Tensor(node);
}

inline Tensor scale(const Tensor& x, double a) { return affine(x, a, 0.0); }

/// Broadcast-add a length-n vector to every row of an [m x n] matrix.
inline Tensor add_rowvec(const Tensor& X, const Tensor& b) {
    if (X.rank() != 2 || b.rank() != 1 || b.dim(0) != X.dim(1))
        throw ShapeError("add_rowvec: " + shape_str(X.shape()) + " + " +
                         shape_str(b.shape()));
    const std::size_t m = X.dim(0), n = X.dim(1);
    auto node = detail::make_node({m, n}, {X.node(), b.node()});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            node->value[i * n + j] = X.value()[i * n + j] + b.value()[j];
    TensorNode* out = node.get();
    auto xn = X.node(); auto bn = b.node();
    node->backward_fn = [out, xn, bn, m, n]() {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += out->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) bn->grad[j] += out->grad[i * n + j];
        }
    };
    return Tensor(node);
}

/// Scale row i of X by c[i]. c is a length-m vector.
inline Tensor mul_colvec(const Tensor& X, const Tensor& c) {
    if (X.rank() != 2 || c.rank() != 1 || c.dim(0) != X.dim(0))
        throw ShapeError("mul_colvec: " + shape_str(X.shape()) + " * " +
                         shape_str(c.shape()));
    const std::size_t m = X.dim(0), n = X.dim(1);
    auto node = detail::make_node({m, n}, {X.node(), c.node()});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            node->value[i * n + j] = X.value()[i * n + j] * c.value()[i];
    TensorNode* out = node.get();
    auto xn = X.node(); auto cn = c.node();
    node->backward_fn = [out, xn, cn, m, n]() {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[i * n + j] += out->grad[i * n + j] * cn->value[i];
        }
        if (cn->requires_grad) {
            cn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    acc += out->grad[i * n + j] * xn->value[i * n + j];
                cn->grad[i] += acc;
            }
        }
    };
    return Tensor(node);
}

// --- activations -----------------------------------------------------------

enum class Activation { Linear, ReLU, Sigmoid, Tanh, Softmax };

inline Tensor relu(const Tensor& x) {
    auto node = detail::make_node(x.shape(), {x.node()});
    for (std::size_t i = 0; i < node->value.size(); ++i)
        node->value[i] = x.value()[i] > 0.0 ? x.value()[i] : 0.0;
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i)
            if (xn->value[i] > 0.0) xn->grad[i] += out->grad[i];
    };
    return Tensor(node);
}

inline Tensor sigmoid(const Tensor& x) {
    auto node = detail::make_node(x.shape(), {x.node()});
    for (std::size_t i = 0; i < node->value.size(); ++i)
        node->value[i] = 1.0 / (1.0 + std::exp(-x.value()[i]));
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            const double y = out->value[i];
            xn->grad[i] += out->grad[i] * y * (1.0 - y);
        }
    };
    return Tensor(node);
}

inline Tensor tanh_act(const Tensor& x) {
    auto node = detail::make_node(x.shape(), {x.node()});
    for (std::size_t i = 0; i < node->value.size(); ++i)
        node->value[i] = std::tanh(x.value()[i]);
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            const double y = out->value[i];
            xn->grad[i] += out->grad[i] * (1.0 - y * y);
        }
    };
    return Tensor(node);
}

/// Row-wise softmax over the last dimension of an [m x n] matrix (or vector).
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t m = x.size() / n;
    auto node = detail::make_node(x.shape(), {x.node()});
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.value().data() + i * n;
        double* orow = node->value.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, m, n]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = out->value.data() + i * n;
            const double* g = out->grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < n; ++j)
                xn->grad[i * n + j] += y[j] * (g[j] - dot);
        }
    };
    return Tensor(node);
}

inline Tensor apply_activation(const Tensor& x, Activation a) {
    switch (a) {
        case Activation::Linear: return x;
        case Activation::ReLU: return relu(x);
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::Tanh: return tanh_act(x);
        case Activation::Softmax: return softmax_rows(x);
    }
    throw ArgumentError("unknown activation");
}

// --- structural ops --------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_size(new_shape) != x.size())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape) + ": element count differs");
    auto node = detail::make_node(std::move(new_shape), {x.node()});
    node->value = x.value();
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) xn->grad[i] += out->grad[i];
    };
    return Tensor(node);
}

/// Concatenate rank-2 tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ArgumentError("concat_cols: empty part list");
    const std::size_t m = parts[0].dim(0);
    std::size_t total = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m)
            throw ShapeError("concat_cols: incompatible part " + shape_str(p.shape()));
        total += p.dim(1);
        parents.push_back(p.node());
    }
    auto node = detail::make_node({m, total}, parents);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t n = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(p.value().data() + i * n, n,
                        node->value.data() + i * total + off);
        off += n;
    }
    TensorNode* out = node.get();
    auto ps = parents;
    node->backward_fn = [out, ps, m, total]() {
        std::size_t off = 0;
        for (auto& p : ps) {
            const std::size_t n = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        p->grad[i * n + j] += out->grad[i * total + off + j];
            }
            off += n;
        }
    };
    return Tensor(node);
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
    if (x.rank() != 2 || start + len > x.dim(1))
        throw ShapeError("slice_cols out of range on " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    auto node = detail::make_node({m, len}, {x.node()});
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(x.value().data() + i * n + start, len,
                    node->value.data() + i * len);
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, start, len, m, n]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < len; ++j)
                xn->grad[i * n + start + j] += out->grad[i * len + j];
    };
    return Tensor(node);
}

/// Extract time step t of a [B x T x F] tensor as [B x F].
inline Tensor time_slice(const Tensor& x, std::size_t t) {
    if (x.rank() != 3) throw ShapeError("time_slice expects rank-3 input");
    const std::size_t B = x.dim(0), T = x.dim(1), F = x.dim(2);
    if (t >= T) throw ArgumentError("time_slice: step out of range");
    auto node = detail::make_node({B, F}, {x.node()});
    for (std::size_t b = 0; b < B; ++b)
        std::copy_n(x.value().data() + (b * T + t) * F, F,
                    node->value.data() + b * F);
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, t, B, T, F]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f)
                xn->grad[(b * T + t) * F + f] += out->grad[b * F + f];
    };
    return Tensor(node);
}

/// Stack T tensors of shape [B x F] into [B x T x F].
inline Tensor stack_time(const std::vector<Tensor>& steps) {
    if (steps.empty()) throw ArgumentError("stack_time: empty step list");
    const std::size_t B = steps[0].dim(0), F = steps[0].dim(1), T = steps.size();
    std::vector<std::shared_ptr<TensorNode>> parents;
    for (const auto& s : steps) {
        if (s.rank() != 2 || s.dim(0) != B || s.dim(1) != F)
            throw ShapeError("stack_time: inconsistent step shape");
        parents.push_back(s.node());
    }
    auto node = detail::make_node({B, T, F}, parents);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(steps[t].value().data() + b * F, F,
                        node->value.data() + (b * T + t) * F);
    TensorNode* out = node.get();
    auto ps = parents;
    node->backward_fn = [out, ps, B, T, F]() {
        for (std::size_t t = 0; t < T; ++t) {
            auto& p = ps[t];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t f = 0; f < F; ++f)
                    p->grad[b * F + f] += out->grad[(b * T + t) * F + f];
        }
    };
    return Tensor(node);
}

/// Tile a [B x D] tensor into [B x times x D].
inline Tensor repeat_vector(const Tensor& x, std::size_t times) {
    if (x.rank() != 2) throw ShapeError("repeat_vector expects rank-2 input");
    if (times < 1) throw ArgumentError("repeat_vector: times must be >= 1");
    const std::size_t B = x.dim(0), D = x.dim(1);
    auto node = detail::make_node({B, times, D}, {x.node()});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < times; ++t)
            std::copy_n(x.value().data() + b * D, D,
                        node->value.data() + (b * times + t) * D);
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, times, B, D]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < times; ++t)
                for (std::size_t d = 0; d < D; ++d)
                    xn->grad[b * D + d] += out->grad[(b * times + t) * D + d];
    };
    return Tensor(node);
}

// --- sequence ops ----------------------------------------------------------

/**
 * Valid (no padding) 1-D cross-correlation, or same-length zero padding.
 * x: [B x T x Cin], kernels: [Cout x n x Cin], bias: [Cout].
 */
inline Tensor conv1d_raw(const Tensor& x, const Tensor& kernels, const Tensor& bias,
                         bool same_padding = false) {
    if (x.rank() != 3 || kernels.rank() != 3 || bias.rank() != 1)
        throw ShapeError("conv1d: expected x[BxTxC], kernels[CoutxnxCin], bias[Cout]");
    const std::size_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const std::size_t Cout = kernels.dim(0), n = kernels.dim(1);
    if (kernels.dim(2) != Cin)
        throw ShapeError("conv1d: kernel channel count " + std::to_string(kernels.dim(2)) +
                         " != input channels " + std::to_string(Cin));
    if (bias.dim(0) != Cout) throw ShapeError("conv1d: bias size != filter count");
    if (!same_padding && n > T)
        throw ShapeError("conv1d: kernel length " + std::to_string(n) +
                         " exceeds input length " + std::to_string(T));
    const std::size_t pad_left = same_padding ? (n - 1) / 2 : 0;
    const std::size_t To = same_padding ? T : T - n + 1;

    auto node = detail::make_node({B, To, Cout}, {x.node(), kernels.node(), bias.node()});
    const double* xv = x.value().data();
    const double* kv = kernels.value().data();
    const double* bv = bias.value().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < To; ++t)
            for (std::size_t co = 0; co < Cout; ++co) {
                double acc = bv[co];
                for (std::size_t u = 0; u < n; ++u) {
                    const std::ptrdiff_t ti =
                        static_cast<std::ptrdiff_t>(t + u) -
                        static_cast<std::ptrdiff_t>(pad_left);
                    if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                    const double* xr = xv + (b * T + ti) * Cin;
                    const double* kr = kv + (co * n + u) * Cin;
                    for (std::size_t ci = 0; ci < Cin; ++ci) acc += xr[ci] * kr[ci];
                }
                node->value[(b * To + t) * Cout + co] = acc;
            }

    TensorNode* out = node.get();
    auto xn = x.node(); auto kn = kernels.node(); auto bn = bias.node();
    node->backward_fn = [out, xn, kn, bn, B, T, To, Cin, Cout, n, pad_left]() {
        const double* g = out->grad.data();
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < To; ++t)
                    for (std::size_t co = 0; co < Cout; ++co)
                        bn->grad[co] += g[(b * To + t) * Cout + co];
        }
        const bool wx = xn->requires_grad, wk = kn->requires_grad;
        if (wx) xn->ensure_grad();
        if (wk) kn->ensure_grad();
        if (!wx && !wk) return;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < To; ++t)
                for (std::size_t co = 0; co < Cout; ++co) {
                    const double gv = g[(b * To + t) * Cout + co];
                    if (gv == 0.0) continue;
                    for (std::size_t u = 0; u < n; ++u) {
                        const std::ptrdiff_t ti =
                            static_cast<std::ptrdiff_t>(t + u) -
                            static_cast<std::ptrdiff_t>(pad_left);
                        if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                        for (std::size_t ci = 0; ci < Cin; ++ci) {
                            if (wk)
                                kn->grad[(co * n + u) * Cin + ci] +=
                                    gv * xn->value[(b * T + ti) * Cin + ci];
                            if (wx)
                                xn->grad[(b * T + ti) * Cin + ci] +=
                                    gv * kn->value[(co * n + u) * Cin + ci];
                        }
                    }
                }
    };
    return Tensor(node);
}

inline Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
                     Activation act, bool same_padding = false) {
    return apply_activation(conv1d_raw(x, kernels, bias, same_padding), act);
}

/// Per-channel window maxima; gradient routed to the first maximal index.
inline Tensor maxpool1d(const Tensor& x, std::size_t p, std::size_t s) {
    if (x.rank() != 3) throw ShapeError("maxpool1d expects [B x T x C]");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (s < 1) throw ArgumentError("maxpool1d: stride must be >= 1");
    if (p > T)
        throw ShapeError("maxpool1d: window " + std::to_string(p) +
                         " exceeds input length " + std::to_string(T));
    const std::size_t To = (T - p) / s + 1;
    auto node = detail::make_node({B, To, C}, {x.node()});
    auto argmax = std::make_shared<std::vector<std::size_t>>(B * To * C);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < To; ++t)
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t best = t * s;
                double bv = x.value()[(b * T + best) * C + c];
                for (std::size_t u = 1; u < p; ++u) {
                    const double v = x.value()[(b * T + t * s + u) * C + c];
                    if (v > bv) { bv = v; best = t * s + u; }
                }
                node->value[(b * To + t) * C + c] = bv;
                (*argmax)[(b * To + t) * C + c] = best;
            }
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, argmax, B, T, To, C]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < To; ++t)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t src = (b * To + t) * C + c;
                    xn->grad[(b * T + (*argmax)[src]) * C + c] += out->grad[src];
                }
    };
    return Tensor(node);
}

/// Repeat every time step `size` times: [B x T x C] -> [B x T*size x C].
inline Tensor upsample1d(const Tensor& x, std::size_t size) {
    if (x.rank() != 3) throw ShapeError("upsample1d expects [B x T x C]");
    if (size < 1) throw ArgumentError("upsample1d: size must be >= 1");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    auto node = detail::make_node({B, T * size, C}, {x.node()});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t u = 0; u < size; ++u)
                std::copy_n(x.value().data() + (b * T + t) * C, C,
                            node->value.data() + (b * T * size + t * size + u) * C);
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, size, B, T, C]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t u = 0; u < size; ++u)
                    for (std::size_t c = 0; c < C; ++c)
                        xn->grad[(b * T + t) * C + c] +=
                            out->grad[(b * T * size + t * size + u) * C + c];
    };
    return Tensor(node);
}

// --- embedding -------------------------------------------------------------

struct EmbeddingLookup {
    Tensor output;                 // [B x T x D]
    std::vector<double> mask;      // B*T, 1.0 where token != mask_value
};

/**
 * Row lookup per token. Tokens equal to mask_value yield mask 0; downstream
 * recurrent layers use the mask to skip the state update at those steps.
 */
inline EmbeddingLookup embedding_lookup(const std::vector<std::vector<int>>& tokens,
                                        const Tensor& W, int mask_value) {
    if (W.rank() != 2) throw ShapeError("embedding_lookup: weight matrix must be rank 2");
    const std::size_t B = tokens.size();
    if (B == 0) throw ArgumentError("embedding_lookup: empty batch");
    const std::size_t T = tokens[0].size();
    const std::size_t V = W.dim(0), D = W.dim(1);
    for (const auto& row : tokens) {
        if (row.size() != T) throw ShapeError("embedding_lookup: ragged token batch");
        for (int t : row)
            if (t < 0 || static_cast<std::size_t>(t) >= V)
                throw VocabularyError("token id " + std::to_string(t) +
                                      " outside vocabulary of size " + std::to_string(V));
    }
    auto node = detail::make_node({B, T, D}, {W.node()});
    std::vector<double> mask(B * T, 1.0);
    auto idx = std::make_shared<std::vector<int>>(B * T);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
            const int tok = tokens[b][t];
            (*idx)[b * T + t] = tok;
            if (tok == mask_value) mask[b * T + t] = 0.0;
            std::copy_n(W.value().data() + static_cast<std::size_t>(tok) * D, D,
                        node->value.data() + (b * T + t) * D);
        }
    TensorNode* out = node.get();
    auto wn = W.node();
    node->backward_fn = [out, wn, idx, B, T, D]() {
        if (!wn->requires_grad) return;
        wn->ensure_grad();
        for (std::size_t i = 0; i < B * T; ++i) {
            const std::size_t row = static_cast<std::size_t>((*idx)[i]);
            for (std::size_t d = 0; d < D; ++d)
                wn->grad[row * D + d] += out->grad[i * D + d];
        }
    };
    return {Tensor(node), std::move(mask)};
}

// --- reductions and losses -------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    auto node = detail::make_node({1}, {x.node()});
    node->value[0] = std::accumulate(x.value().begin(), x.value().end(), 0.0);
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += out->grad[0];
    };
    return Tensor(node);
}

inline Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

/// Mean squared error over all elements.
inline Tensor loss_mse(const Tensor& y, const Tensor& y_hat) {
    check_same_shape(y, y_hat, "loss_mse");
    auto node = detail::make_node({1}, {y.node(), y_hat.node()});
    const std::size_t N = y.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double d = y.value()[i] - y_hat.value()[i];
        acc += d * d;
    }
    node->value[0] = acc / static_cast<double>(N);
    TensorNode* out = node.get();
    auto an = y.node(); auto bn = y_hat.node();
    node->backward_fn = [out, an, bn, N]() {
        const double g = 2.0 * out->grad[0] / static_cast<double>(N);
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                an->grad[i] += g * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                bn->grad[i] -= g * (an->value[i] - bn->value[i]);
        }
    };
    return Tensor(node);
}

/**
 * Element-weighted squared error: sum_i w_i (y_i - y_hat_i)^2 / sum_i w_i.
 * Used for masked payload reconstruction; an all-zero weight vector yields 0.
 */
inline Tensor loss_mse_masked(const Tensor& y, const Tensor& y_hat,
                              std::shared_ptr<std::vector<double>> w) {
    check_same_shape(y, y_hat, "loss_mse_masked");
    if (w->size() != y.size())
        throw ShapeError("loss_mse_masked: weight length mismatch");
    auto node = detail::make_node({1}, {y.node(), y_hat.node()});
    const std::size_t N = y.size();
    double acc = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double d = y.value()[i] - y_hat.value()[i];
        acc += (*w)[i] * d * d;
        wsum += (*w)[i];
    }
    node->value[0] = wsum > 0.0 ? acc / wsum : 0.0;
    TensorNode* out = node.get();
    auto an = y.node(); auto bn = y_hat.node();
    node->backward_fn = [out, an, bn, w, N, wsum]() {
        if (wsum <= 0.0) return;
        const double g = 2.0 * out->grad[0] / wsum;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                an->grad[i] += g * (*w)[i] * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                bn->grad[i] -= g * (*w)[i] * (an->value[i] - bn->value[i]);
        }
    };
    return Tensor(node);
}

/// Sum of per-part MSEs scaled by non-negative weights that sum to 1.
inline Tensor loss_weighted_mse(
    const std::vector<std::tuple<Tensor, Tensor, double>>& parts) {
    if (parts.empty()) throw ArgumentError("loss_weighted_mse: no parts");
    double wsum = 0.0;
    for (const auto& [y, yh, w] : parts) {
        if (w < 0.0) throw ArgumentError("loss_weighted_mse: negative weight");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9)
        throw ArgumentError("loss_weighted_mse: weights sum to " + std::to_string(wsum) +
                            ", expected 1");
    Tensor total;
    for (const auto& [y, yh, w] : parts) {
        Tensor part = scale(loss_mse(y, yh), w);
        total = total.valid() ? add(total, part) : part;
    }
    return total;
}

inline constexpr double kCeProbEpsilon = 1e-12;

/**
 * Class-weighted categorical cross-entropy from probabilities.
 * probs: [B x C] (or [C] treated as B=1); labels: class id per row.
 * Probabilities are clamped at 1e-12 before the log.
 */
inline Tensor loss_categorical_ce(const Tensor& probs, const std::vector<int>& labels,
                                  const std::vector<double>& class_weights) {
    const std::size_t C = probs.dim(probs.rank() - 1);
    const std::size_t B = probs.size() / C;
    if (labels.size() != B)
        throw ShapeError("loss_categorical_ce: label count != batch size");
    if (class_weights.size() != C)
        throw ShapeError("loss_categorical_ce: class weight count != class count");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw ArgumentError("loss_categorical_ce: label out of range");

    auto node = detail::make_node({1}, {probs.node()});
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double p = std::max(probs.value()[b * C + labels[b]], kCeProbEpsilon);
        acc -= class_weights[labels[b]] * std::log(p);
    }
    node->value[0] = acc / static_cast<double>(B);
    TensorNode* out = node.get();
    auto pn = probs.node();
    auto lab = std::make_shared<std::vector<int>>(labels);
    auto cw = std::make_shared<std::vector<double>>(class_weights);
    node->backward_fn = [out, pn, lab, cw, B, C]() {
        if (!pn->requires_grad) return;
        pn->ensure_grad();
        const double g = out->grad[0] / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
            const int y = (*lab)[b];
            const double p = pn->value[b * C + y];
            if (p <= kCeProbEpsilon) continue;  // clamped region, flat
            pn->grad[b * C + y] -= g * (*cw)[y] / p;
        }
    };
    return Tensor(node);
}

// --- backward pass ---------------------------------------------------------

/**
 * Reverse-topological gradient accumulation from a scalar loss. Gradients of
 * every node reachable from the loss are reset before accumulation; leaves
 * outside the graph keep whatever gradient they had (zero them explicitly
 * between steps).
 */
inline void backprop(const Tensor& loss) {
    if (loss.size() != 1) throw ArgumentError("backprop: loss must be a scalar");
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.raw(), 0);
    visited.insert(loss.raw());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            TensorNode* p = n->parents[i++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (TensorNode* n : order) n->zero_grad();
    loss.raw()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

// --- convenience layers on the op level ------------------------------------

/// y = activation(W x + b). x may be a vector [F] or a batch [B x F].
inline Tensor dense(const Tensor& x, const Tensor& W, const Tensor& b, Activation act) {
    if (W.rank() != 2 || b.rank() != 1 || b.dim(0) != W.dim(0))
        throw ShapeError("dense: W must be [U x F] with bias [U]");
    const bool batched = x.rank() == 2;
    Tensor xin = batched ? x : reshape(x, {1, x.dim(0)});
    if (xin.dim(1) != W.dim(1))
        throw ShapeError("dense: input width " + std::to_string(xin.dim(1)) +
                         " != W columns " + std::to_string(W.dim(1)));
    Tensor y = apply_activation(add_rowvec(matmul(xin, W, false, true), b), act);
    return batched ? y : reshape(y, {W.dim(0)});
}

/// Learnable matrices of one GRU cell, E x F inputs and E x E recurrences.
struct GruParams {
    Tensor W_c, W_r, W;  // E x F
    Tensor U_c, U_r, U;  // E x E

    std::size_t hidden() const { return W.dim(0); }
    std::size_t input() const { return W.dim(1); }

    void check() const {
        const std::size_t E = W.dim(0), F = W.dim(1);
        for (const Tensor* m : {&W_c, &W_r, &W})
            if (m->rank() != 2 || m->dim(0) != E || m->dim(1) != F)
                throw ShapeError("gru: input matrices must all be E x F");
        for (const Tensor* m : {&U_c, &U_r, &U})
            if (m->rank() != 2 || m->dim(0) != E || m->dim(1) != E)
                throw ShapeError("gru: recurrent matrices must all be E x E");
    }
};

/**
 * One GRU update:
 *   c = sigma(W_c x + U_c h), r = sigma(W_r x + U_r h),
 *   h' = tanh(W x + U (r . h)), h_new = c . h + (1 - c) . h'.
 * x_t: [B x F] (or [F]), h_prev: [B x E] (or [E]).
 */
inline Tensor gru_step(const Tensor& x_t, const Tensor& h_prev, const GruParams& p) {
    p.check();
    const bool batched = x_t.rank() == 2;
    Tensor x = batched ? x_t : reshape(x_t, {1, x_t.dim(0)});
    Tensor h = h_prev.rank() == 2 ? h_prev : reshape(h_prev, {1, h_prev.dim(0)});
    if (x.dim(1) != p.input())
        throw ShapeError("gru_step: input width != F");
    if (h.dim(1) != p.hidden() || h.dim(0) != x.dim(0))
        throw ShapeError("gru_step: hidden state shape mismatch");

    Tensor c = sigmoid(add(matmul(x, p.W_c, false, true), matmul(h, p.U_c, false, true)));
    Tensor r = sigmoid(add(matmul(x, p.W_r, false, true), matmul(h, p.U_r, false, true)));
    Tensor hh = tanh_act(add(matmul(x, p.W, false, true),
                             matmul(hadamard(r, h), p.U, false, true)));
    Tensor h_new = add(hadamard(c, h), hadamard(affine(c, -1.0, 1.0), hh));
    return batched ? h_new : reshape(h_new, {p.hidden()});
}

// --- initialization and optimizer ------------------------------------------

inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                             Rng& rng, bool requires_grad = true) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from(std::move(v), std::move(shape), requires_grad);
}

/// Adam with bias correction. Moments are kept per parameter, in registration order.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t t = 0;
    std::vector<std::vector<double>> m, v;
};

inline void adam_step(const std::vector<Tensor>& params, AdamState& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), 0.0);
            state.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: parameter count changed");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (state.m[i].size() != p.size())
            throw ShapeError("adam_step: parameter shape changed");
        const auto& g = p.grad();
        auto& val = const_cast<std::vector<double>&>(p.value());
        for (std::size_t j = 0; j < g.size(); ++j) {
            state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g[j];
            state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = state.m[i][j] / bc1;
            const double vhat = state.v[i][j] / bc2;
            val[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

inline void zero_grads(const std::vector<Tensor>& params) {
    for (auto& p : params) const_cast<Tensor&>(p).zero_grad();
}

}  // namespace tmae

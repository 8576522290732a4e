#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "demondnc/errors.hpp"

namespace demondnc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
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

namespace detail {
inline thread_local bool grad_mode = true;
inline thread_local bool finite_checks = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

// Disables graph recording for the enclosing scope (forward-only evaluation).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
class GradTable;

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // accumulator; allocated only for requires_grad leaves
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>& self, const std::vector<T>& self_grad, GradTable<T>& table)> backward;
};

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

// Per-backward-pass gradient buffers for interior nodes; leaves use their
// persistent accumulator so repeated backward calls add up.
template <class T>
class GradTable {
public:
    std::vector<T>& of(TensorNode<T>& n) {
        if (n.leaf) return n.grad;
        auto& buf = interior_[&n];
        if (buf.size() != n.value.size()) buf.assign(n.value.size(), T(0));
        return buf;
    }

private:
    std::unordered_map<const TensorNode<T>*, std::vector<T>> interior_;
};

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
    for (const T x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

// Dense tensor handle with reverse-mode gradients. Value semantics: copies
// share the underlying node; values are never mutated after construction
// except through ParameterStore's optimizer step.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr<T> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(shape_numel(shape), T(0));
        n->shape = std::move(shape);
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, T fill) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(shape_numel(shape), fill);
        n->shape = std::move(shape);
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("from: " + shape_str(shape) + " does not hold " + std::to_string(data.size()) + " elements");
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::initializer_list<T> data) {
        return from(std::move(shape), std::vector<T>(data));
    }

    // Leaf with gradient accumulator; used for trainable parameters.
    static Tensor param(Shape shape, std::vector<T> data) {
        Tensor t = from(std::move(shape), std::move(data));
        t.node_->requires_grad = true;
        t.node_->grad.assign(t.node_->value.size(), T(0));
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t extent(std::size_t d) const { return node_->shape[d]; }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<T>& value() const { return node_->value; }
    const std::vector<T>& grad() const { return node_->grad; }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
        return node_->value[0];
    }
    T at(std::size_t i) const { return node_->value[i]; }
    T at(std::size_t i, std::size_t j) const { return node_->value[i * node_->shape[1] + j]; }

    // Constant copy cut off from the graph.
    Tensor detach() const {
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(std::move(n));
    }

    const NodePtr<T>& node() const { return node_; }
    NodePtr<T>& node() { return node_; }

private:
    NodePtr<T> node_;
};

namespace detail {

template <class T>
using BackFn = std::function<void(TensorNode<T>&, const std::vector<T>&, GradTable<T>&)>;

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> parents, BackFn<T> back,
                  const char* name) {
    if (finite_checks) check_finite(value, name);
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = grad_mode;
    if (rg) {
        rg = false;
        for (const auto& p : parents)
            if (p->requires_grad) {
                rg = true;
                break;
            }
    }
    if (rg) {
        n->requires_grad = true;
        n->leaf = false;
        n->parents = std::move(parents);
        n->backward = std::move(back);
    }
    return Tensor<T>(std::move(n));
}

// Broadcast index map for binary ops: shapes must match, or one operand is a
// single element (scalar broadcast).
inline void binary_extents(std::size_t an, std::size_t bn, const Shape& as, const Shape& bs, std::size_t& out,
                           const char* op) {
    if (an == bn) {
        out = an;
    } else if (an == 1) {
        out = bn;
    } else if (bn == 1) {
        out = an;
    } else {
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary operations (equal shapes or scalar broadcast)
// ---------------------------------------------------------------------------

template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db, const char* name) {
    const std::size_t an = a.numel(), bn = b.numel();
    std::size_t n = 0;
    detail::binary_extents(an, bn, a.shape(), b.shape(), n, name);
    const Shape& out_shape = (an >= bn) ? a.shape() : b.shape();
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[an == 1 ? 0 : i], bv[bn == 1 ? 0 : i]);

    auto pa = a.node();
    auto pb = b.node();
    detail::BackFn<T> back = [pa, pb, da, db, an, bn, n](TensorNode<T>&, const std::vector<T>& g,
                                                         GradTable<T>& table) {
        const auto& av = pa->value;
        const auto& bv = pb->value;
        if (pa->requires_grad) {
            auto& ga = table.of(*pa);
            for (std::size_t i = 0; i < n; ++i)
                ga[an == 1 ? 0 : i] += g[i] * da(av[an == 1 ? 0 : i], bv[bn == 1 ? 0 : i]);
        }
        if (pb->requires_grad) {
            auto& gb = table.of(*pb);
            for (std::size_t i = 0; i < n; ++i)
                gb[bn == 1 ? 0 : i] += g[i] * db(av[an == 1 ? 0 : i], bv[bn == 1 ? 0 : i]);
        }
    };
    return detail::make_op<T>(out_shape, std::move(out), {pa, pb}, std::move(back), name);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; }, "mul");
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); }, "div");
}

template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x < y ? x : y; }, [](T x, T y) { return x <= y ? T(1) : T(0); },
        [](T x, T y) { return x <= y ? T(0) : T(1); }, "minimum");
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
    return mul(a, b);
}

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

template <class T, class F, class D>
Tensor<T> unary_op(const Tensor<T>& x, F f, D dfdx, const char* name) {
    const auto& xv = x.value();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    auto px = x.node();
    detail::BackFn<T> back = [px, dfdx](TensorNode<T>& self, const std::vector<T>& g, GradTable<T>& table) {
        if (!px->requires_grad) return;
        auto& gx = table.of(*px);
        const auto& xv = px->value;
        const auto& yv = self.value;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
    };
    return detail::make_op<T>(x.shape(), std::move(out), {px}, std::move(back), name);
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return -v; }, [](T, T) { return T(-1); }, "neg");
}

template <class T>
Tensor<T> operator-(const Tensor<T>& x) {
    return neg(x);
}

template <class T>
T sigmoid_value(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
    for (const T v : x.value()) {
        if (!(v > T(0))) throw DomainError("log: operand must be strictly positive");
    }
    return unary_op(
        x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); }, "relu");
}

template <class T>
T softplus_value(T v) {
    if (v > T(0)) return v + std::log1p(std::exp(-v));
    return std::log1p(std::exp(v));
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return softplus_value(v); }, [](T v, T) { return sigmoid_value(v); }, "softplus");
}

// 1 + log(1 + e^x); strictly greater than 1, used for addressing strengths.
template <class T>
Tensor<T> oneplus(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return T(1) + softplus_value(v); }, [](T v, T) { return sigmoid_value(v); }, "oneplus");
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return unary_op(
        x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); }, "clamp");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return unary_op(
        x, [c](T v) { return c * v; }, [c](T, T) { return c; }, "scale");
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return unary_op(
        x, [c](T v) { return v + c; }, [](T, T) { return T(1); }, "add_scalar");
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul: operands must be rank-2");
    const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = av.data() + i * k;
        T* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = arow[p];
            const T* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    auto pa = a.node();
    auto pb = b.node();
    detail::BackFn<T> back = [pa, pb, m, k, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        const auto& av = pa->value;
        const auto& bv = pb->value;
        if (pa->requires_grad) {
            auto& ga = table.of(*pa);  // dA = G B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    T acc = T(0);
                    const T* grow = g.data() + i * n;
                    const T* brow = bv.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + p] += acc;
                }
        }
        if (pb->requires_grad) {
            auto& gb = table.of(*pb);  // dB = A^T G
            for (std::size_t i = 0; i < m; ++i) {
                const T* arow = av.data() + i * k;
                const T* grow = g.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T aip = arow[p];
                    T* gbrow = gb.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
            }
        }
    };
    return detail::make_op<T>({m, n}, std::move(out), {pa, pb}, std::move(back), "matmul");
}

// y = A x for rank-2 A and rank-1 x.
template <class T>
Tensor<T> mv(const Tensor<T>& a, const Tensor<T>& x) {
    if (a.shape().size() != 2 || x.shape().size() != 1 || a.extent(1) != x.extent(0))
        throw ShapeError("mv: need [m x n] and [n], got " + shape_str(a.shape()) + " and " + shape_str(x.shape()));
    const std::size_t m = a.extent(0), n = a.extent(1);
    const auto& av = a.value();
    const auto& xv = x.value();
    std::vector<T> out(m, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T acc = T(0);
        const T* arow = av.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) acc += arow[j] * xv[j];
        out[i] = acc;
    }
    auto pa = a.node();
    auto px = x.node();
    detail::BackFn<T> back = [pa, px, m, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        const auto& av = pa->value;
        const auto& xv = px->value;
        if (pa->requires_grad) {
            auto& ga = table.of(*pa);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i] * xv[j];
        }
        if (px->requires_grad) {
            auto& gx = table.of(*px);
            for (std::size_t i = 0; i < m; ++i) {
                const T* arow = av.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += g[i] * arow[j];
            }
        }
    };
    return detail::make_op<T>({m}, std::move(out), {pa, px}, std::move(back), "mv");
}

// y = A^T x for rank-2 A [m x n] and rank-1 x [m].
template <class T>
Tensor<T> tmv(const Tensor<T>& a, const Tensor<T>& x) {
    if (a.shape().size() != 2 || x.shape().size() != 1 || a.extent(0) != x.extent(0))
        throw ShapeError("tmv: need [m x n] and [m], got " + shape_str(a.shape()) + " and " + shape_str(x.shape()));
    const std::size_t m = a.extent(0), n = a.extent(1);
    const auto& av = a.value();
    const auto& xv = x.value();
    std::vector<T> out(n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = av.data() + i * n;
        const T xi = xv[i];
        for (std::size_t j = 0; j < n; ++j) out[j] += arow[j] * xi;
    }
    auto pa = a.node();
    auto px = x.node();
    detail::BackFn<T> back = [pa, px, m, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        const auto& av = pa->value;
        const auto& xv = px->value;
        if (pa->requires_grad) {
            auto& ga = table.of(*pa);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += xv[i] * g[j];
        }
        if (px->requires_grad) {
            auto& gx = table.of(*px);
            for (std::size_t i = 0; i < m; ++i) {
                T acc = T(0);
                const T* arow = av.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) acc += arow[j] * g[j];
                gx[i] += acc;
            }
        }
    };
    return detail::make_op<T>({n}, std::move(out), {pa, px}, std::move(back), "tmv");
}

template <class T>
Tensor<T> outer(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 1 || b.shape().size() != 1)
        throw ShapeError("outer: operands must be rank-1");
    const std::size_t m = a.extent(0), n = b.extent(0);
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i] * bv[j];
    auto pa = a.node();
    auto pb = b.node();
    detail::BackFn<T> back = [pa, pb, m, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        const auto& av = pa->value;
        const auto& bv = pb->value;
        if (pa->requires_grad) {
            auto& ga = table.of(*pa);
            for (std::size_t i = 0; i < m; ++i) {
                T acc = T(0);
                for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[j];
                ga[i] += acc;
            }
        }
        if (pb->requires_grad) {
            auto& gb = table.of(*pb);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j] * av[i];
        }
    };
    return detail::make_op<T>({m, n}, std::move(out), {pa, pb}, std::move(back), "outer");
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (const T v : x.value()) acc += v;
    auto px = x.node();
    detail::BackFn<T> back = [px](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!px->requires_grad) return;
        auto& gx = table.of(*px);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    };
    return detail::make_op<T>({1}, {acc}, {px}, std::move(back), "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> row_sum(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw ShapeError("row_sum: operand must be rank-2");
    const std::size_t m = a.extent(0), n = a.extent(1);
    const auto& av = a.value();
    std::vector<T> out(m, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < n; ++j) acc += av[i * n + j];
        out[i] = acc;
    }
    auto pa = a.node();
    detail::BackFn<T> back = [pa, m, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!pa->requires_grad) return;
        auto& ga = table.of(*pa);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
    };
    return detail::make_op<T>({m}, std::move(out), {pa}, std::move(back), "row_sum");
}

// log sum exp over a rank-1 tensor, max-subtracted for stability.
template <class T>
Tensor<T> lse(const Tensor<T>& x) {
    if (x.shape().size() != 1) throw ShapeError("lse: operand must be rank-1");
    const auto& xv = x.value();
    if (xv.empty()) throw ArgumentError("lse: empty operand");
    const T mx = *std::max_element(xv.begin(), xv.end());
    T s = T(0);
    for (const T v : xv) s += std::exp(v - mx);
    const T y = mx + std::log(s);
    auto px = x.node();
    detail::BackFn<T> back = [px, mx, s](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!px->requires_grad) return;
        auto& gx = table.of(*px);
        const auto& xv = px->value;
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[0] * std::exp(xv[i] - mx) / s;
    };
    return detail::make_op<T>({1}, {y}, {px}, std::move(back), "lse");
}

// Row-wise softmax with max subtraction. Rank-1 input is treated as one row.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    const std::size_t rank = x.shape().size();
    if (rank != 1 && rank != 2) throw ShapeError("softmax_rows: operand must be rank-1 or rank-2");
    const std::size_t m = rank == 2 ? x.extent(0) : 1;
    const std::size_t n = rank == 2 ? x.extent(1) : x.extent(0);
    const auto& xv = x.value();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = xv.data() + i * n;
        T* orow = out.data() + i * n;
        const T mx = *std::max_element(row, row + n);
        T s = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= s;
    }
    auto px = x.node();
    detail::BackFn<T> back = [px, m, n](TensorNode<T>& self, const std::vector<T>& g, GradTable<T>& table) {
        if (!px->requires_grad) return;
        auto& gx = table.of(*px);
        const auto& sv = self.value;
        for (std::size_t i = 0; i < m; ++i) {
            const T* srow = sv.data() + i * n;
            const T* grow = g.data() + i * n;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += grow[j] * srow[j];
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += srow[j] * (grow[j] - dot);
        }
    };
    return detail::make_op<T>(x.shape(), std::move(out), {px}, std::move(back), "softmax_rows");
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ArgumentError("concat: no operands");
    std::size_t total = 0;
    for (const auto& x : xs) {
        if (x.shape().size() != 1) throw ShapeError("concat: operands must be rank-1");
        total += x.numel();
    }
    std::vector<T> out;
    out.reserve(total);
    std::vector<NodePtr<T>> parents;
    parents.reserve(xs.size());
    for (const auto& x : xs) {
        out.insert(out.end(), x.value().begin(), x.value().end());
        parents.push_back(x.node());
    }
    detail::BackFn<T> back = [](TensorNode<T>& self, const std::vector<T>& g, GradTable<T>& table) {
        std::size_t off = 0;
        for (const auto& p : self.parents) {
            if (p->requires_grad) {
                auto& gp = table.of(*p);
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
            }
            off += p->value.size();
        }
    };
    return detail::make_op<T>({total}, std::move(out), std::move(parents), std::move(back), "concat");
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t offset, std::size_t len) {
    if (x.shape().size() != 1) throw ShapeError("slice: operand must be rank-1");
    if (offset + len > x.numel())
        throw ShapeError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                         ") exceeds extent " + std::to_string(x.numel()));
    std::vector<T> out(x.value().begin() + offset, x.value().begin() + offset + len);
    auto px = x.node();
    detail::BackFn<T> back = [px, offset](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!px->requires_grad) return;
        auto& gx = table.of(*px);
        for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
    };
    return detail::make_op<T>({len}, std::move(out), {px}, std::move(back), "slice");
}

template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
    std::vector<T> out = x.value();
    auto px = x.node();
    detail::BackFn<T> back = [px](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!px->requires_grad) return;
        auto& gx = table.of(*px);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
    return detail::make_op<T>({x.numel()}, std::move(out), {px}, std::move(back), "flatten");
}

// Tile a rank-1 tensor of length n into m identical rows.
template <class T>
Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t m) {
    if (v.shape().size() != 1) throw ShapeError("broadcast_rows: operand must be rank-1");
    const std::size_t n = v.extent(0);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        std::copy(v.value().begin(), v.value().end(), out.begin() + i * n);
    auto pv = v.node();
    detail::BackFn<T> back = [pv, m, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!pv->requires_grad) return;
        auto& gv = table.of(*pv);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
    };
    return detail::make_op<T>({m, n}, std::move(out), {pv}, std::move(back), "broadcast_rows");
}

// Tile a rank-1 tensor of length m into n identical columns.
template <class T>
Tensor<T> broadcast_cols(const Tensor<T>& v, std::size_t n) {
    if (v.shape().size() != 1) throw ShapeError("broadcast_cols: operand must be rank-1");
    const std::size_t m = v.extent(0);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v.value()[i];
    auto pv = v.node();
    detail::BackFn<T> back = [pv, m, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!pv->requires_grad) return;
        auto& gv = table.of(*pv);
        for (std::size_t i = 0; i < m; ++i) {
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j];
            gv[i] += acc;
        }
    };
    return detail::make_op<T>({m, n}, std::move(out), {pv}, std::move(back), "broadcast_cols");
}

template <class T>
Tensor<T> zero_diag(const Tensor<T>& a) {
    if (a.shape().size() != 2 || a.extent(0) != a.extent(1))
        throw ShapeError("zero_diag: operand must be square");
    const std::size_t n = a.extent(0);
    std::vector<T> out = a.value();
    for (std::size_t i = 0; i < n; ++i) out[i * n + i] = T(0);
    auto pa = a.node();
    detail::BackFn<T> back = [pa, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!pa->requires_grad) return;
        auto& ga = table.of(*pa);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) ga[i * n + j] += g[i * n + j];
    };
    return detail::make_op<T>(a.shape(), std::move(out), {pa}, std::move(back), "zero_diag");
}

// Per-row cosine similarity between the rows of M [N x W] and a key [W]:
//   s_i = (M_i . k) / (|M_i| |k| + eps),  eps = 1e-8.
// All-zero rows or keys give similarity ~0 through the eps guard.
template <class T>
Tensor<T> cosine_rows(const Tensor<T>& m, const Tensor<T>& k) {
    if (m.shape().size() != 2 || k.shape().size() != 1 || m.extent(1) != k.extent(0))
        throw ShapeError("cosine_rows: need [N x W] and [W], got " + shape_str(m.shape()) + " and " +
                         shape_str(k.shape()));
    constexpr double kEps = 1e-8;
    const std::size_t rows = m.extent(0), w = m.extent(1);
    const auto& mvv = m.value();
    const auto& kv = k.value();
    T knorm2 = T(0);
    for (const T v : kv) knorm2 += v * v;
    const T knorm = std::sqrt(knorm2);
    std::vector<T> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const T* row = mvv.data() + i * w;
        T dotv = T(0), nrm2 = T(0);
        for (std::size_t j = 0; j < w; ++j) {
            dotv += row[j] * kv[j];
            nrm2 += row[j] * row[j];
        }
        out[i] = dotv / (std::sqrt(nrm2) * knorm + T(kEps));
    }
    auto pm = m.node();
    auto pk = k.node();
    detail::BackFn<T> back = [pm, pk, rows, w, knorm](TensorNode<T>&, const std::vector<T>& g,
                                                      GradTable<T>& table) {
        const auto& mvv = pm->value;
        const auto& kv = pk->value;
        std::vector<T>* gm = pm->requires_grad ? &table.of(*pm) : nullptr;
        std::vector<T>* gk = pk->requires_grad ? &table.of(*pk) : nullptr;
        for (std::size_t i = 0; i < rows; ++i) {
            const T* row = mvv.data() + i * w;
            T dotv = T(0), nrm2 = T(0);
            for (std::size_t j = 0; j < w; ++j) {
                dotv += row[j] * kv[j];
                nrm2 += row[j] * row[j];
            }
            const T nrm = std::sqrt(nrm2);
            const T q = nrm * knorm + T(kEps);
            const T q2 = q * q;
            const T gi = g[i];
            if (gm) {
                const T coef = (nrm > T(0)) ? dotv * knorm / (nrm * q2) : T(0);
                for (std::size_t j = 0; j < w; ++j)
                    (*gm)[i * w + j] += gi * (kv[j] / q - coef * row[j]);
            }
            if (gk) {
                const T coef = (knorm > T(0)) ? dotv * nrm / (knorm * q2) : T(0);
                for (std::size_t j = 0; j < w; ++j)
                    (*gk)[j] += gi * (row[j] / q - coef * kv[j]);
            }
        }
    };
    return detail::make_op<T>({rows}, std::move(out), {pm, pk}, std::move(back), "cosine_rows");
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Accumulates d loss / d p additively into every reachable requires_grad leaf.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    TensorNode<T>* root = loss.node().get();
    if (!root->requires_grad) return;
    if (root->leaf) {
        root->grad[0] += T(1);
        return;
    }
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    struct Frame {
        TensorNode<T>* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode<T>* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    GradTable<T> table;
    table.of(*root).assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backward) n->backward(*n, table.of(*n), table);
    }
}

}  // namespace demondnc

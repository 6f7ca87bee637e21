#pragma once

// Dense float tensors with reverse-mode automatic differentiation.
//
// Tensors are immutable values once created. Tracked operations record their
// parents and a backward closure on an implicit DAG; backward() materializes
// the reverse topological order and runs one sweep, visiting each node exactly
// once. stop_gradient() re-wraps a value with no parents, so nothing behind it
// receives adjoints. Any op that produces a non-finite value throws.
//
// The whole engine is templated on the scalar type: training runs float32,
// the gradient-check oracles rebuild the same graphs in float64.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

namespace flowguide {

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : TensorError {
    explicit ShapeError(const std::string& msg) : TensorError(msg) {}
};
struct NumericsError : TensorError {
    explicit NumericsError(const std::string& msg) : TensorError(msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

constexpr int kMaxRank = 4;

template <typename S>
class Tensor {
    static_assert(std::is_floating_point_v<S>, "Tensor scalar must be float or double");

    struct Node {
        Shape shape;
        std::shared_ptr<std::vector<S>> values;
        bool requires_grad = false;
        std::vector<S> grad;  // allocated on first accumulation
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;
        const char* op = "leaf";

        std::vector<S>& grad_buf() {
            if (grad.empty()) grad.assign(values->size(), S(0));
            return grad;
        }
    };

    std::shared_ptr<Node> node_;

    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data size " +
                             std::to_string(data.size()));
        auto n           = std::make_shared<Node>();
        n->shape         = std::move(shape);
        n->values        = std::make_shared<std::vector<S>>(std::move(data));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    // Leaf sharing an external buffer (model parameters). The graph reads the
    // buffer; the owner must not mutate it while a graph referencing it lives.
    static Tensor leaf_shared(Shape shape, std::shared_ptr<std::vector<S>> storage, bool requires_grad) {
        if (!storage || shape_numel(shape) != static_cast<int64_t>(storage->size()))
            throw ShapeError("leaf_shared: shape/storage mismatch");
        auto n           = std::make_shared<Node>();
        n->shape         = std::move(shape);
        n->values        = std::move(storage);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<S>(static_cast<size_t>(n), S(0)), requires_grad);
    }

    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<S>(static_cast<size_t>(n), v), requires_grad);
    }

    static Tensor scalar(S v, bool requires_grad = false) { return from_data({}, {v}, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->values->size()); }
    bool requires_grad() const { return node_->requires_grad; }

    // accessors return copies when called on temporaries (e.g. x.grad().values()
    // in a range-for) so no reference can outlive the owning tensor
    const Shape& shape() const& { return node_->shape; }
    Shape shape() const&& { return node_->shape; }
    const std::vector<S>& values() const& { return *node_->values; }
    std::vector<S> values() const&& { return *node_->values; }
    const char* op_name() const { return node_->op; }

    S item() const {
        if (numel() != 1) throw ShapeError("item(): tensor is not scalar, shape " + shape_str(shape()));
        return (*node_->values)[0];
    }

    // Gradient accumulated by the last backward(). A leaf that the loss never
    // reached has a zero gradient; asking a non-tracked tensor is an error.
    Tensor grad() const {
        if (!node_->requires_grad) throw TensorError("grad(): tensor does not require grad");
        if (node_->grad.empty()) return zeros(node_->shape);
        return from_data(node_->shape, node_->grad);
    }

    void zero_grad() { node_->grad.clear(); }

    template <typename T>
    friend Tensor<T> stop_gradient(const Tensor<T>& x);
    template <typename T>
    friend void backward(const Tensor<T>& loss);
    template <typename T>
    friend class TensorOps;
};

// ---------------------------------------------------------------------------
// op construction helpers
// ---------------------------------------------------------------------------

template <typename S>
class TensorOps {
    using T    = Tensor<S>;
    using Node = typename Tensor<S>::Node;

public:
    static void check_finite(const std::vector<S>& v, const char* op) {
        for (S x : v)
            if (!std::isfinite(x)) throw NumericsError(std::string(op) + ": produced non-finite value");
    }

    static T make(Shape shape, std::vector<S> vals, const char* op, std::vector<T> parents,
                  std::function<void(Node&)> backward_fn) {
        check_finite(vals, op);
        auto n    = std::make_shared<Node>();
        n->shape  = std::move(shape);
        n->values = std::make_shared<std::vector<S>>(std::move(vals));
        n->op     = op;
        bool rg   = false;
        for (const auto& p : parents) rg = rg || p.node_->requires_grad;
        if (rg) {
            n->requires_grad = true;
            for (auto& p : parents) n->parents.push_back(p.node_);
            n->backward_fn = std::move(backward_fn);
        }
        return T(std::move(n));
    }

    static std::shared_ptr<Node> node(const T& t) { return t.node_; }
};

// row-major strides
inline std::array<int64_t, kMaxRank> strides_of(const Shape& s) {
    std::array<int64_t, kMaxRank> st{};
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

inline void check_rank(const Shape& s, const char* op) {
    if (s.size() > kMaxRank) throw ShapeError(std::string(op) + ": rank > 4 unsupported");
}

// numpy-style broadcast shape (trailing alignment, size-1 expansion)
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    check_rank(a, op);
    check_rank(b, op);
    size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// ---------------------------------------------------------------------------
// primitive ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> stop_gradient(const Tensor<S>& x) {
    using Node = typename Tensor<S>::Node;
    auto n     = std::make_shared<Node>();
    n->shape   = x.node_->shape;
    n->values  = x.node_->values;  // value-identical, shared payload
    n->op      = "stop_gradient";
    return Tensor<S>(std::move(n));
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& x, Shape target) {
    using Ops = TensorOps<S>;
    check_rank(target, "broadcast_to");
    const Shape& src = x.shape();
    if (src == target) return x;
    size_t r = target.size();
    if (src.size() > r) throw ShapeError("broadcast_to: cannot reduce rank");
    // right-align source dims; every source dim must equal target or be 1
    std::array<int64_t, kMaxRank> sdim{};
    sdim.fill(1);
    for (size_t i = 0; i < src.size(); ++i) sdim[r - src.size() + i] = src[i];
    for (size_t i = 0; i < r; ++i)
        if (sdim[i] != target[i] && sdim[i] != 1)
            throw ShapeError("broadcast_to: " + shape_str(src) + " -> " + shape_str(target));

    Shape padded(target.size());
    for (size_t i = 0; i < r; ++i) padded[i] = sdim[i];
    auto sst = strides_of(padded);
    for (size_t i = 0; i < r; ++i)
        if (sdim[i] == 1 && target[i] != 1) sst[i] = 0;  // broadcast axis

    int64_t n = shape_numel(target);
    std::vector<S> out(static_cast<size_t>(n));
    const auto& sv = x.values();
    std::array<int64_t, kMaxRank> idx{};
    int64_t soff = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        out[static_cast<size_t>(lin)] = sv[static_cast<size_t>(soff)];
        for (int ax = static_cast<int>(r) - 1; ax >= 0; --ax) {
            auto a = static_cast<size_t>(ax);
            soff += sst[a];
            if (++idx[a] < target[a]) break;
            soff -= sst[a] * target[a];
            idx[a] = 0;
        }
    }
    Shape tcopy = target;
    return Ops::make(std::move(target), std::move(out), "broadcast_to", {x},
                     [src, tcopy, sst, r](auto& node) {
                         auto& pg       = node.parents[0]->grad_buf();
                         const auto& g  = node.grad;
                         std::array<int64_t, kMaxRank> idx{};
                         int64_t soff = 0;
                         int64_t n    = static_cast<int64_t>(g.size());
                         for (int64_t lin = 0; lin < n; ++lin) {
                             pg[static_cast<size_t>(soff)] += g[static_cast<size_t>(lin)];
                             for (int ax = static_cast<int>(r) - 1; ax >= 0; --ax) {
                                 auto a = static_cast<size_t>(ax);
                                 soff += sst[a];
                                 if (++idx[a] < tcopy[a]) break;
                                 soff -= sst[a] * tcopy[a];
                                 idx[a] = 0;
                             }
                         }
                     });
}

namespace detail {

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> binary_ew(const Tensor<S>& a, const Tensor<S>& b, const char* op, FwdFn fwd, BwdFn bwd) {
    using Ops = TensorOps<S>;
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    Tensor<S> ab = broadcast_to(a, out_shape);
    Tensor<S> bb = broadcast_to(b, out_shape);
    const auto& av = ab.values();
    const auto& bv = bb.values();
    std::vector<S> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return Ops::make(std::move(out_shape), std::move(out), op, {ab, bb},
                     [bwd](auto& node) {
                         const auto& g  = node.grad;
                         const auto& av = *node.parents[0]->values;
                         const auto& bv = *node.parents[1]->values;
                         const auto& cv = *node.values;
                         auto& ga       = node.parents[0]->grad_buf();
                         auto& gb       = node.parents[1]->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i) bwd(g[i], av[i], bv[i], cv[i], ga[i], gb[i]);
                     });
}

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> unary_ew(const Tensor<S>& x, const char* op, FwdFn fwd, BwdFn bwd) {
    using Ops      = TensorOps<S>;
    const auto& xv = x.values();
    std::vector<S> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    Shape shape = x.shape();
    return Ops::make(std::move(shape), std::move(out), op, {x},
                     [bwd](auto& node) {
                         const auto& g  = node.grad;
                         const auto& xv = *node.parents[0]->values;
                         const auto& yv = *node.values;
                         auto& gx       = node.parents[0]->grad_buf();
                         for (size_t i = 0; i < g.size(); ++i) gx[i] += bwd(g[i], xv[i], yv[i]);
                     });
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_ew<S>(a, b, "add", [](S x, S y) { return x + y; },
                                [](S g, S, S, S, S& ga, S& gb) { ga += g; gb += g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_ew<S>(a, b, "sub", [](S x, S y) { return x - y; },
                                [](S g, S, S, S, S& ga, S& gb) { ga += g; gb -= g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_ew<S>(a, b, "mul", [](S x, S y) { return x * y; },
                                [](S g, S x, S y, S, S& ga, S& gb) { ga += g * y; gb += g * x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_ew<S>(a, b, "div", [](S x, S y) { return x / y; },
                                [](S g, S, S y, S c, S& ga, S& gb) { ga += g / y; gb -= g * c / y; });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
    return detail::unary_ew<S>(x, "neg", [](S v) { return -v; }, [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, std::type_identity_t<S> c) {
    return detail::unary_ew<S>(a, "add_scalar", [c](S v) { return v + c; }, [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, std::type_identity_t<S> c) {
    return detail::unary_ew<S>(a, "mul_scalar", [c](S v) { return v * c; }, [c](S g, S, S) { return g * c; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, std::type_identity_t<S> c) { return add(a, S(-c)); }

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, std::type_identity_t<S> c) { return mul(a, c); }
template <typename S>
Tensor<S> operator*(std::type_identity_t<S> c, const Tensor<S>& a) { return mul(a, c); }

// ---------------------------------------------------------------------------
// matmul — 2-D only, optional operand transposes (covers attention Q·K^T).
// The dense kernels are delegated to Eigen; the graph semantics stay here.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
using EMat  = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapC  = Eigen::Map<const EMat<S>>;
template <typename S>
using MapM  = Eigen::Map<EMat<S>>;

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false) {
    using Ops = TensorOps<S>;
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank-2");
    int64_t M = trans_a ? a.dim(1) : a.dim(0);
    int64_t K = trans_a ? a.dim(0) : a.dim(1);
    int64_t K2 = trans_b ? b.dim(1) : b.dim(0);
    int64_t N  = trans_b ? b.dim(0) : b.dim(1);
    if (K != K2)
        throw ShapeError("matmul: inner dims disagree, " + shape_str(a.shape()) + (trans_a ? "^T" : "") +
                         " x " + shape_str(b.shape()) + (trans_b ? "^T" : ""));

    std::vector<S> out(static_cast<size_t>(M * N));
    {
        detail::MapC<S> A(a.values().data(), a.dim(0), a.dim(1));
        detail::MapC<S> B(b.values().data(), b.dim(0), b.dim(1));
        detail::MapM<S> C(out.data(), M, N);
        if (!trans_a && !trans_b)      C.noalias() = A * B;
        else if (trans_a && !trans_b)  C.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b)  C.noalias() = A * B.transpose();
        else                           C.noalias() = A.transpose() * B.transpose();
    }
    Shape as = a.shape(), bs = b.shape();
    return Ops::make({M, N}, std::move(out), "matmul", {a, b},
                     [as, bs, trans_a, trans_b, M, N](auto& node) {
                         detail::MapC<S> G(node.grad.data(), M, N);
                         detail::MapC<S> A(node.parents[0]->values->data(), as[0], as[1]);
                         detail::MapC<S> B(node.parents[1]->values->data(), bs[0], bs[1]);
                         detail::MapM<S> GA(node.parents[0]->grad_buf().data(), as[0], as[1]);
                         detail::MapM<S> GB(node.parents[1]->grad_buf().data(), bs[0], bs[1]);
                         if (!trans_a && !trans_b) {
                             GA.noalias() += G * B.transpose();
                             GB.noalias() += A.transpose() * G;
                         } else if (trans_a && !trans_b) {
                             GA.noalias() += B * G.transpose();
                             GB.noalias() += A * G;
                         } else if (!trans_a && trans_b) {
                             GA.noalias() += G * B;
                             GB.noalias() += G.transpose() * A;
                         } else {
                             GA.noalias() += B.transpose() * G.transpose();
                             GB.noalias() += G.transpose() * A.transpose();
                         }
                     });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> reduce_full(const Tensor<S>& x, const char* op, bool mean_reduce) {
    using Ops = TensorOps<S>;
    const auto& xv = x.values();
    // pairwise-free simple accumulation; deterministic order
    S acc = 0;
    for (S v : xv) acc += v;
    S scale = mean_reduce ? S(1) / static_cast<S>(xv.size()) : S(1);
    return Ops::make({}, {acc * scale}, op, {x},
                     [scale](auto& node) {
                         S g      = node.grad[0] * scale;
                         auto& gx = node.parents[0]->grad_buf();
                         for (auto& v : gx) v += g;
                     });
}

template <typename S>
Tensor<S> reduce_axis(const Tensor<S>& x, int axis, bool keepdims, const char* op, bool mean_reduce) {
    using Ops = TensorOps<S>;
    check_rank(x.shape(), op);
    int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": axis out of range");
    const Shape& xs = x.shape();
    Shape out_shape;
    for (int i = 0; i < r; ++i) {
        if (i == axis) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(xs[static_cast<size_t>(i)]);
        }
    }
    int64_t axis_len = xs[static_cast<size_t>(axis)];
    int64_t inner    = 1;
    for (int i = axis + 1; i < r; ++i) inner *= xs[static_cast<size_t>(i)];
    int64_t outer = x.numel() / (axis_len * inner);
    std::vector<S> out(static_cast<size_t>(outer * inner), S(0));
    const auto& xv = x.values();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < axis_len; ++a) {
            const S* src = xv.data() + (o * axis_len + a) * inner;
            S* dst       = out.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    S scale = mean_reduce ? S(1) / static_cast<S>(axis_len) : S(1);
    if (mean_reduce)
        for (auto& v : out) v *= scale;
    return Ops::make(std::move(out_shape), std::move(out), op, {x},
                     [outer, axis_len, inner, scale](auto& node) {
                         auto& gx      = node.parents[0]->grad_buf();
                         const auto& g = node.grad;
                         for (int64_t o = 0; o < outer; ++o)
                             for (int64_t a = 0; a < axis_len; ++a) {
                                 S* dst       = gx.data() + (o * axis_len + a) * inner;
                                 const S* src = g.data() + o * inner;
                                 for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * scale;
                             }
                     });
}

}  // namespace detail

template <typename S>
Tensor<S> sum(const Tensor<S>& x) { return detail::reduce_full(x, "sum", false); }
template <typename S>
Tensor<S> mean(const Tensor<S>& x) { return detail::reduce_full(x, "mean", true); }
template <typename S>
Tensor<S> sum(const Tensor<S>& x, int axis, bool keepdims = false) {
    return detail::reduce_axis(x, axis, keepdims, "sum_axis", false);
}
template <typename S>
Tensor<S> mean(const Tensor<S>& x, int axis, bool keepdims = false) {
    return detail::reduce_axis(x, axis, keepdims, "mean_axis", true);
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> pow_elem(const Tensor<S>& x, std::type_identity_t<S> pin) {
    const S p = pin;
    return detail::unary_ew<S>(
        x, "pow", [p](S v) { return std::pow(v, p); },
        [p](S g, S v, S) { return g * p * std::pow(v, p - S(1)); });
}

template <typename S>
Tensor<S> exp_elem(const Tensor<S>& x) {
    return detail::unary_ew<S>(x, "exp", [](S v) { return std::exp(v); },
                               [](S g, S, S y) { return g * y; });
}

template <typename S>
Tensor<S> tanh_elem(const Tensor<S>& x) {
    return detail::unary_ew<S>(x, "tanh", [](S v) { return std::tanh(v); },
                               [](S g, S, S y) { return g * (S(1) - y * y); });
}

// tanh-form GELU approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename S>
Tensor<S> gelu_tanh(const Tensor<S>& x) {
    constexpr S c0 = S(0.7978845608028653558798921198687637);  // sqrt(2/pi)
    constexpr S c1 = S(0.044715);
    return detail::unary_ew<S>(
        x, "gelu",
        [](S v) {
            S u = c0 * (v + c1 * v * v * v);
            return S(0.5) * v * (S(1) + std::tanh(u));
        },
        [](S g, S v, S) {
            S u  = c0 * (v + c1 * v * v * v);
            S th = std::tanh(u);
            S d  = S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * c0 * (S(1) + S(3) * c1 * v * v);
            return g * d;
        });
}

// ---------------------------------------------------------------------------
// layer normalization over the last axis, optional affine
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     std::type_identity_t<S> eps = S(1e-5)) {
    using Ops = TensorOps<S>;
    if (x.rank() < 1) throw ShapeError("layer_norm: needs rank >= 1");
    int64_t W = x.dim(x.rank() - 1);
    bool affine = gamma.defined();
    if (affine) {
        if (gamma.numel() != W || beta.numel() != W)
            throw ShapeError("layer_norm: affine params must have last-axis length");
    }
    int64_t rows   = x.numel() / W;
    const auto& xv = x.values();
    std::vector<S> out(xv.size());
    auto y0  = std::make_shared<std::vector<S>>(xv.size());  // normalized pre-affine
    auto inv = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    const S* gv = affine ? gamma.values().data() : nullptr;
    const S* bv = affine ? beta.values().data() : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * W;
        S mu = 0;
        for (int64_t i = 0; i < W; ++i) mu += row[i];
        mu /= static_cast<S>(W);
        S var = 0;
        for (int64_t i = 0; i < W; ++i) {
            S d = row[i] - mu;
            var += d * d;
        }
        var /= static_cast<S>(W);
        S is                            = S(1) / std::sqrt(var + eps);
        (*inv)[static_cast<size_t>(r)] = is;
        for (int64_t i = 0; i < W; ++i) {
            S n                                       = (row[i] - mu) * is;
            (*y0)[static_cast<size_t>(r * W + i)]     = n;
            out[static_cast<size_t>(r * W + i)]       = affine ? n * gv[i] + bv[i] : n;
        }
    }
    std::vector<Tensor<S>> parents = {x};
    if (affine) {
        parents.push_back(gamma);
        parents.push_back(beta);
    }
    Shape shape = x.shape();
    return Ops::make(std::move(shape), std::move(out), "layer_norm", std::move(parents),
                     [rows, W, affine, y0, inv](auto& node) {
                         const auto& g = node.grad;
                         auto& gx      = node.parents[0]->grad_buf();
                         const S* gv   = affine ? node.parents[1]->values->data() : nullptr;
                         S* ggamma     = affine ? node.parents[1]->grad_buf().data() : nullptr;
                         S* gbeta      = affine ? node.parents[2]->grad_buf().data() : nullptr;
                         for (int64_t r = 0; r < rows; ++r) {
                             const S* grow = g.data() + r * W;
                             const S* yrow = y0->data() + r * W;
                             S is          = (*inv)[static_cast<size_t>(r)];
                             S m1 = 0, m2 = 0;
                             for (int64_t i = 0; i < W; ++i) {
                                 S gi = affine ? grow[i] * gv[i] : grow[i];
                                 m1 += gi;
                                 m2 += gi * yrow[i];
                                 if (affine) {
                                     ggamma[i] += grow[i] * yrow[i];
                                     gbeta[i] += grow[i];
                                 }
                             }
                             m1 /= static_cast<S>(W);
                             m2 /= static_cast<S>(W);
                             S* gxr = gx.data() + r * W;
                             for (int64_t i = 0; i < W; ++i) {
                                 S gi = affine ? grow[i] * gv[i] : grow[i];
                                 gxr[i] += is * (gi - m1 - yrow[i] * m2);
                             }
                         }
                     });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, std::type_identity_t<S> eps = S(1e-5)) {
    return layer_norm(x, Tensor<S>(), Tensor<S>(), eps);
}

// softmax over the last axis (shift-by-max)
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
    using Ops = TensorOps<S>;
    if (x.rank() < 1) throw ShapeError("softmax: needs rank >= 1");
    int64_t W      = x.dim(x.rank() - 1);
    int64_t rows   = x.numel() / W;
    const auto& xv = x.values();
    std::vector<S> out(xv.size());
    for (int64_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * W;
        S* orow      = out.data() + r * W;
        S mx         = row[0];
        for (int64_t i = 1; i < W; ++i) mx = std::max(mx, row[i]);
        S z = 0;
        for (int64_t i = 0; i < W; ++i) {
            orow[i] = std::exp(row[i] - mx);
            z += orow[i];
        }
        for (int64_t i = 0; i < W; ++i) orow[i] /= z;
    }
    Shape shape = x.shape();
    return Ops::make(std::move(shape), std::move(out), "softmax", {x},
                     [rows, W](auto& node) {
                         const auto& g = node.grad;
                         const auto& y = *node.values;
                         auto& gx      = node.parents[0]->grad_buf();
                         for (int64_t r = 0; r < rows; ++r) {
                             const S* grow = g.data() + r * W;
                             const S* yrow = y.data() + r * W;
                             S dot         = 0;
                             for (int64_t i = 0; i < W; ++i) dot += grow[i] * yrow[i];
                             S* gxr = gx.data() + r * W;
                             for (int64_t i = 0; i < W; ++i) gxr[i] += yrow[i] * (grow[i] - dot);
                         }
                     });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape target) {
    using Ops = TensorOps<S>;
    check_rank(target, "reshape");
    if (shape_numel(target) != x.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(target));
    std::vector<S> out = x.values();
    return Ops::make(std::move(target), std::move(out), "reshape", {x},
                     [](auto& node) {
                         auto& gx      = node.parents[0]->grad_buf();
                         const auto& g = node.grad;
                         for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, int64_t start, int64_t len) {
    using Ops = TensorOps<S>;
    check_rank(x.shape(), "slice");
    int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
    int64_t alen = x.dim(axis);
    if (start < 0 || len < 1 || start + len > alen) throw ShapeError("slice: window out of bounds");
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    int64_t outer = x.numel() / (alen * inner);
    std::vector<S> out(static_cast<size_t>(shape_numel(out_shape)));
    const auto& xv = x.values();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, xv.data() + (o * alen + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(S));
    return Ops::make(std::move(out_shape), std::move(out), "slice", {x},
                     [outer, alen, inner, start, len](auto& node) {
                         auto& gx      = node.parents[0]->grad_buf();
                         const auto& g = node.grad;
                         for (int64_t o = 0; o < outer; ++o) {
                             S* dst       = gx.data() + (o * alen + start) * inner;
                             const S* src = g.data() + o * len * inner;
                             for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                         }
                     });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
    using Ops = TensorOps<S>;
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int r = parts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int64_t total   = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != out_shape[static_cast<size_t>(i)])
                throw ShapeError("concat: off-axis dims disagree");
        total += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= parts[0].dim(i);
    int64_t outer = shape_numel(out_shape) / (total * inner);
    std::vector<S> out(static_cast<size_t>(shape_numel(out_shape)));
    std::vector<int64_t> lens;
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t len    = p.dim(axis);
        const auto& pv = p.values();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, pv.data() + o * len * inner,
                        static_cast<size_t>(len * inner) * sizeof(S));
        lens.push_back(len);
        off += len;
    }
    return Ops::make(std::move(out_shape), std::move(out), "concat", parts,
                     [outer, total, inner, lens](auto& node) {
                         const auto& g = node.grad;
                         int64_t off   = 0;
                         for (size_t pi = 0; pi < lens.size(); ++pi) {
                             int64_t len = lens[pi];
                             auto& gp    = node.parents[pi]->grad_buf();
                             for (int64_t o = 0; o < outer; ++o) {
                                 const S* src = g.data() + (o * total + off) * inner;
                                 S* dst       = gp.data() + o * len * inner;
                                 for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                             }
                             off += len;
                         }
                     });
}

// ---------------------------------------------------------------------------
// reverse sweep
// ---------------------------------------------------------------------------

template <typename S>
void backward(const Tensor<S>& loss) {
    using Node = typename Tensor<S>::Node;
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node_->requires_grad) return;  // nothing tracked

    // iterative post-order DFS -> reverse topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node_.get(), 0);
    visited.insert(loss.node_.get());
    while (!stack.empty()) {
        auto& [n, ci] = stack.back();
        if (ci < n->parents.size()) {
            Node* p = n->parents[ci++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    loss.node_->grad_buf()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// central finite differences — the independent gradient oracle. Uses only
// forward evaluations of loss_fn, never the reverse sweep it is checking.
// ---------------------------------------------------------------------------

template <typename S>
std::vector<std::vector<S>> finite_diff_gradient(
    const std::function<S(const std::vector<Tensor<S>>&)>& loss_fn, const std::vector<Tensor<S>>& params,
    double h) {
    if (!(h > 0)) throw TensorError("finite_diff_gradient: h must be positive");
    std::vector<std::vector<S>> grads;
    grads.reserve(params.size());
    for (size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<S> g(params[pi].values().size());
        for (size_t i = 0; i < g.size(); ++i) {
            auto make_shifted = [&](double delta) {
                std::vector<Tensor<S>> shifted = params;
                std::vector<S> vals            = params[pi].values();
                vals[i]                        = static_cast<S>(vals[i] + delta);
                shifted[pi]                    = Tensor<S>::from_data(params[pi].shape(), std::move(vals),
                                                                      params[pi].requires_grad());
                return shifted;
            };
            S fp = loss_fn(make_shifted(h));
            S fm = loss_fn(make_shifted(-h));
            g[i] = static_cast<S>((static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * h));
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// mean squared error over all elements
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mse: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto d = sub(a, b);
    return mean(mul(d, d));
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace flowguide

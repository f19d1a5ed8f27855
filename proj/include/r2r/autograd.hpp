#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "r2r/tensor.hpp"

namespace r2r {

// Reverse-mode autodiff over TensorT. A forward call builds a value graph
// eagerly; backward() runs the tape in reverse topological order. With grad
// mode off the same numeric kernels run but no graph is recorded, which is the
// inference path.

inline bool& grad_mode_flag() {
    thread_local bool on = true;
    return on;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <typename T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;  // empty until backward touches it
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void(NodeT<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = TensorT<T>(value.shape, T(0));
    }
    void zero_grad() {
        if (grad.numel() > 0) grad.fill(T(0));
    }
};

template <typename T>
using VarT = std::shared_ptr<NodeT<T>>;

using Var = VarT<float>;

template <typename T>
VarT<T> make_leaf(TensorT<T> v, bool requires_grad) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
VarT<T> make_const(TensorT<T> v) {
    return make_leaf(std::move(v), false);
}

namespace detail {

template <typename T>
bool track(const std::vector<VarT<T>>& parents) {
    if (!grad_mode_flag()) return false;
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

template <typename T>
VarT<T> make_op(TensorT<T> value, std::vector<VarT<T>> parents,
                std::function<void(NodeT<T>&)> backward_fn) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(value);
    if (track(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

}  // namespace detail

// runs the tape; loss must be a scalar
template <typename T>
void backward(const VarT<T>& loss) {
    if (loss->value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss->requires_grad) throw std::invalid_argument("backward: loss does not require grad");

    // iterative post-order topological sort
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> seen;
    std::vector<std::pair<NodeT<T>*, size_t>> stack;
    stack.push_back({loss.get(), 0});
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx == 0 && seen.count(node)) {
            stack.pop_back();
            continue;
        }
        if (idx < node->parents.size()) {
            auto* parent = node->parents[idx].get();
            ++idx;
            if (!seen.count(parent) && parent->requires_grad) stack.push_back({parent, 0});
        } else {
            seen.insert(node);
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad.fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<T>* n = *it;
        if (!n->backward_fn) continue;
        for (auto& p : n->parents)
            if (p->requires_grad) p->ensure_grad();
        n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    check_same_shape(a->value, b->value, "add");
    TensorT<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return detail::make_op<T>(std::move(out), {a, b}, [a, b](NodeT<T>& n) {
        if (a->requires_grad)
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        if (b->requires_grad)
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
    });
}

template <typename T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    check_same_shape(a->value, b->value, "sub");
    TensorT<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return detail::make_op<T>(std::move(out), {a, b}, [a, b](NodeT<T>& n) {
        if (a->requires_grad)
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        if (b->requires_grad)
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
    });
}

template <typename T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    check_same_shape(a->value, b->value, "mul");
    TensorT<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return detail::make_op<T>(std::move(out), {a, b}, [a, b](NodeT<T>& n) {
        if (a->requires_grad)
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->value[i];
        if (b->requires_grad)
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->value[i];
    });
}

template <typename T>
VarT<T> scale(const VarT<T>& a, double s) {
    TensorT<T> out = a->value;
    for (auto& v : out.data) v = static_cast<T>(v * s);
    return detail::make_op<T>(std::move(out), {a}, [a, s](NodeT<T>& n) {
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            a->grad[i] += static_cast<T>(n.grad[i] * s);
    });
}

template <typename T>
VarT<T> silu(const VarT<T>& a) {
    TensorT<T> out = a->value;
    for (auto& v : out.data) {
        double x = static_cast<double>(v);
        v = static_cast<T>(x / (1.0 + std::exp(-x)));
    }
    return detail::make_op<T>(std::move(out), {a}, [a](NodeT<T>& n) {
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            double x = static_cast<double>(a->value[i]);
            double s = 1.0 / (1.0 + std::exp(-x));
            a->grad[i] += static_cast<T>(static_cast<double>(n.grad[i]) * s * (1.0 + x * (1.0 - s)));
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
template <typename T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + a->value.shape_str() + " x " +
                                    b->value.shape_str());
    int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    TensorT<T> out({m, n});
    out.mat(m, n).noalias() = a->value.mat(m, k) * b->value.mat(k, n);
    return detail::make_op<T>(std::move(out), {a, b}, [a, b, m, k, n](NodeT<T>& node) {
        auto g = node.grad.mat(m, n);
        if (a->requires_grad) a->grad.mat(m, k).noalias() += g * b->value.mat(k, n).transpose();
        if (b->requires_grad) b->grad.mat(k, n).noalias() += a->value.mat(m, k).transpose() * g;
    });
}

// x[r,k] * w[k,m] + bias[m]
template <typename T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias) {
    if (x->value.ndim() != 2 || w->value.ndim() != 2 || x->value.dim(1) != w->value.dim(0) ||
        bias->value.numel() != w->value.dim(1))
        throw std::invalid_argument("linear: incompatible shapes");
    int64_t r = x->value.dim(0), k = x->value.dim(1), m = w->value.dim(1);
    TensorT<T> out({r, m});
    out.mat(r, m).noalias() = x->value.mat(r, k) * w->value.mat(k, m);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < m; ++j) out.at2(i, j) += bias->value[j];
    return detail::make_op<T>(std::move(out), {x, w, bias}, [x, w, bias, r, k, m](NodeT<T>& node) {
        auto g = node.grad.mat(r, m);
        if (x->requires_grad) x->grad.mat(r, k).noalias() += g * w->value.mat(k, m).transpose();
        if (w->requires_grad) w->grad.mat(k, m).noalias() += x->value.mat(r, k).transpose() * g;
        if (bias->requires_grad)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < m; ++j) bias->grad[j] += node.grad.at2(i, j);
    });
}

// batched matmul [B,m,k] x [B,k,n] -> [B,m,n]
template <typename T>
VarT<T> bmm(const VarT<T>& a, const VarT<T>& b) {
    if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(1))
        throw std::invalid_argument("bmm: incompatible shapes");
    int64_t B = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2), n = b->value.dim(2);
    TensorT<T> out({B, m, n});
    for (int64_t i = 0; i < B; ++i) {
        ConstMatMap<T> am(a->value.data.data() + i * m * k, m, k);
        ConstMatMap<T> bm(b->value.data.data() + i * k * n, k, n);
        MatMap<T> om(out.data.data() + i * m * n, m, n);
        om.noalias() = am * bm;
    }
    return detail::make_op<T>(std::move(out), {a, b}, [a, b, B, m, k, n](NodeT<T>& node) {
        for (int64_t i = 0; i < B; ++i) {
            ConstMatMap<T> g(node.grad.data.data() + i * m * n, m, n);
            ConstMatMap<T> am(a->value.data.data() + i * m * k, m, k);
            ConstMatMap<T> bm(b->value.data.data() + i * k * n, k, n);
            if (a->requires_grad) {
                MatMap<T> ga(a->grad.data.data() + i * m * k, m, k);
                ga.noalias() += g * bm.transpose();
            }
            if (b->requires_grad) {
                MatMap<T> gb(b->grad.data.data() + i * k * n, k, n);
                gb.noalias() += am.transpose() * g;
            }
        }
    });
}

// batched matmul with transposed rhs: [B,m,k] x [B,n,k] -> [B,m,n]
template <typename T>
VarT<T> bmm_nt(const VarT<T>& a, const VarT<T>& b) {
    if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(2))
        throw std::invalid_argument("bmm_nt: incompatible shapes");
    int64_t B = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2), n = b->value.dim(1);
    TensorT<T> out({B, m, n});
    for (int64_t i = 0; i < B; ++i) {
        ConstMatMap<T> am(a->value.data.data() + i * m * k, m, k);
        ConstMatMap<T> bm(b->value.data.data() + i * n * k, n, k);
        MatMap<T> om(out.data.data() + i * m * n, m, n);
        om.noalias() = am * bm.transpose();
    }
    return detail::make_op<T>(std::move(out), {a, b}, [a, b, B, m, k, n](NodeT<T>& node) {
        for (int64_t i = 0; i < B; ++i) {
            ConstMatMap<T> g(node.grad.data.data() + i * m * n, m, n);
            ConstMatMap<T> am(a->value.data.data() + i * m * k, m, k);
            ConstMatMap<T> bm(b->value.data.data() + i * n * k, n, k);
            if (a->requires_grad) {
                MatMap<T> ga(a->grad.data.data() + i * m * k, m, k);
                ga.noalias() += g * bm;
            }
            if (b->requires_grad) {
                MatMap<T> gb(b->grad.data.data() + i * n * k, n, k);
                gb.noalias() += g.transpose() * am;
            }
        }
    });
}

// softmax over the last dimension
template <typename T>
VarT<T> softmax_lastdim(const VarT<T>& a) {
    int64_t n = a->value.dim(a->value.ndim() - 1);
    int64_t rows = a->value.numel() / n;
    TensorT<T> out = a->value;
    for (int64_t r = 0; r < rows; ++r) {
        T* p = out.data.data() + r * n;
        double mx = -1e300;
        for (int64_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(p[i]));
        double sum = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double e = std::exp(static_cast<double>(p[i]) - mx);
            p[i] = static_cast<T>(e);
            sum += e;
        }
        for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(static_cast<double>(p[i]) / sum);
    }
    return detail::make_op<T>(std::move(out), {a}, [a, rows, n](NodeT<T>& node) {
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = node.value.data.data() + r * n;
            const T* g = node.grad.data.data() + r * n;
            double dot = 0.0;
            for (int64_t i = 0; i < n; ++i) dot += static_cast<double>(g[i]) * static_cast<double>(y[i]);
            T* ga = a->grad.data.data() + r * n;
            for (int64_t i = 0; i < n; ++i)
                ga[i] += static_cast<T>(static_cast<double>(y[i]) * (static_cast<double>(g[i]) - dot));
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> reshape(const VarT<T>& a, std::vector<int64_t> shape) {
    TensorT<T> out = a->value.reshaped(std::move(shape));
    return detail::make_op<T>(std::move(out), {a}, [a](NodeT<T>& n) {
        for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

// [N,C,H,W] -> [N, H*W, C]
template <typename T>
VarT<T> nchw_to_tokens(const VarT<T>& a) {
    int64_t N = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2), W = a->value.dim(3);
    TensorT<T> out({N, H * W, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t s = 0; s < H * W; ++s)
                out.data[static_cast<size_t>((n * H * W + s) * C + c)] =
                    a->value.data[static_cast<size_t>((n * C + c) * H * W + s)];
    return detail::make_op<T>(std::move(out), {a}, [a, N, C, H, W](NodeT<T>& node) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t s = 0; s < H * W; ++s)
                    a->grad.data[static_cast<size_t>((n * C + c) * H * W + s)] +=
                        node.grad.data[static_cast<size_t>((n * H * W + s) * C + c)];
    });
}

// [N, H*W, C] -> [N,C,H,W]
template <typename T>
VarT<T> tokens_to_nchw(const VarT<T>& a, int64_t H, int64_t W) {
    int64_t N = a->value.dim(0), S = a->value.dim(1), C = a->value.dim(2);
    if (S != H * W) throw std::invalid_argument("tokens_to_nchw: token count mismatch");
    TensorT<T> out({N, C, H, W});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t s = 0; s < S; ++s)
            for (int64_t c = 0; c < C; ++c)
                out.data[static_cast<size_t>((n * C + c) * S + s)] =
                    a->value.data[static_cast<size_t>((n * S + s) * C + c)];
    return detail::make_op<T>(std::move(out), {a}, [a, N, S, C](NodeT<T>& node) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t s = 0; s < S; ++s)
                for (int64_t c = 0; c < C; ++c)
                    a->grad.data[static_cast<size_t>((n * S + s) * C + c)] +=
                        node.grad.data[static_cast<size_t>((n * C + c) * S + s)];
    });
}

// [N,S,C] -> [N*h, S, C/h]
template <typename T>
VarT<T> split_heads(const VarT<T>& a, int64_t heads) {
    int64_t N = a->value.dim(0), S = a->value.dim(1), C = a->value.dim(2);
    if (C % heads != 0) throw std::invalid_argument("split_heads: C not divisible by heads");
    int64_t d = C / heads;
    TensorT<T> out({N * heads, S, d});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t s = 0; s < S; ++s)
                for (int64_t k = 0; k < d; ++k)
                    out.data[static_cast<size_t>((((n * heads + h) * S) + s) * d + k)] =
                        a->value.data[static_cast<size_t>((n * S + s) * C + h * d + k)];
    return detail::make_op<T>(std::move(out), {a}, [a, N, S, C, heads, d](NodeT<T>& node) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t s = 0; s < S; ++s)
                    for (int64_t k = 0; k < d; ++k)
                        a->grad.data[static_cast<size_t>((n * S + s) * C + h * d + k)] +=
                            node.grad.data[static_cast<size_t>((((n * heads + h) * S) + s) * d + k)];
    });
}

// [N*h, S, d] -> [N, S, h*d]
template <typename T>
VarT<T> merge_heads(const VarT<T>& a, int64_t heads) {
    int64_t Nh = a->value.dim(0), S = a->value.dim(1), d = a->value.dim(2);
    if (Nh % heads != 0) throw std::invalid_argument("merge_heads: batch not divisible by heads");
    int64_t N = Nh / heads, C = heads * d;
    TensorT<T> out({N, S, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t s = 0; s < S; ++s)
                for (int64_t k = 0; k < d; ++k)
                    out.data[static_cast<size_t>((n * S + s) * C + h * d + k)] =
                        a->value.data[static_cast<size_t>((((n * heads + h) * S) + s) * d + k)];
    return detail::make_op<T>(std::move(out), {a}, [a, N, S, C, heads, d](NodeT<T>& node) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t s = 0; s < S; ++s)
                    for (int64_t k = 0; k < d; ++k)
                        a->grad.data[static_cast<size_t>((((n * heads + h) * S) + s) * d + k)] +=
                            node.grad.data[static_cast<size_t>((n * S + s) * C + h * d + k)];
    });
}

// [L,d] -> [N,L,d], shared across the batch; grads sum over N
template <typename T>
VarT<T> broadcast_batch(const VarT<T>& a, int64_t N) {
    int64_t L = a->value.dim(0), d = a->value.dim(1);
    TensorT<T> out({N, L, d});
    for (int64_t n = 0; n < N; ++n)
        std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin() + n * L * d);
    return detail::make_op<T>(std::move(out), {a}, [a, N, L, d](NodeT<T>& node) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < L * d; ++i) a->grad[i] += node.grad[n * L * d + i];
    });
}

template <typename T>
VarT<T> concat_channels(const VarT<T>& a, const VarT<T>& b) {
    if (a->value.ndim() != 4 || b->value.ndim() != 4) throw std::invalid_argument("concat_channels: need 4d");
    int64_t N = a->value.dim(0), Ca = a->value.dim(1), Cb = b->value.dim(1);
    int64_t H = a->value.dim(2), W = a->value.dim(3);
    if (b->value.dim(0) != N || b->value.dim(2) != H || b->value.dim(3) != W)
        throw std::invalid_argument("concat_channels: spatial/batch mismatch");
    TensorT<T> out({N, Ca + Cb, H, W});
    int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n) {
        std::copy(a->value.data.begin() + n * Ca * hw, a->value.data.begin() + (n + 1) * Ca * hw,
                  out.data.begin() + n * (Ca + Cb) * hw);
        std::copy(b->value.data.begin() + n * Cb * hw, b->value.data.begin() + (n + 1) * Cb * hw,
                  out.data.begin() + (n * (Ca + Cb) + Ca) * hw);
    }
    return detail::make_op<T>(std::move(out), {a, b}, [a, b, N, Ca, Cb, hw](NodeT<T>& node) {
        for (int64_t n = 0; n < N; ++n) {
            if (a->requires_grad)
                for (int64_t i = 0; i < Ca * hw; ++i)
                    a->grad[n * Ca * hw + i] += node.grad[n * (Ca + Cb) * hw + i];
            if (b->requires_grad)
                for (int64_t i = 0; i < Cb * hw; ++i)
                    b->grad[n * Cb * hw + i] += node.grad[(n * (Ca + Cb) + Ca) * hw + i];
        }
    });
}

// y[n,c,h,w] = x[n,c,h,w] + v[n,c]
template <typename T>
VarT<T> add_channel_vec(const VarT<T>& x, const VarT<T>& v) {
    int64_t N = x->value.dim(0), C = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
    if (v->value.ndim() != 2 || v->value.dim(0) != N || v->value.dim(1) != C)
        throw std::invalid_argument("add_channel_vec: shape mismatch");
    TensorT<T> out = x->value;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            T b = v->value.at2(n, c);
            T* p = out.data.data() + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) p[i] += b;
        }
    return detail::make_op<T>(std::move(out), {x, v}, [x, v, N, C, hw](NodeT<T>& node) {
        if (x->requires_grad)
            for (int64_t i = 0; i < node.grad.numel(); ++i) x->grad[i] += node.grad[i];
        if (v->requires_grad)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    double s = 0.0;
                    const T* g = node.grad.data.data() + (n * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) s += static_cast<double>(g[i]);
                    v->grad.at2(n, c) += static_cast<T>(s);
                }
    });
}

// ---------------------------------------------------------------------------
// conv / spatial ops
// ---------------------------------------------------------------------------

namespace detail {

// cols buffer layout: [C*kh*kw, OH*OW]
template <typename T>
void im2col(const TensorT<T>& x, int64_t n, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t oh, int64_t ow, std::vector<T>& cols) {
    int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
    cols.assign(static_cast<size_t>(C * kh * kw * oh * ow), T(0));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                int64_t row = (c * kh + ki) * kw + kj;
                T* dst = cols.data() + row * oh * ow;
                const T* src = x.data.data() + (n * C + c) * H * W;
                for (int64_t i = 0; i < oh; ++i) {
                    int64_t yi = i * stride + ki - pad;
                    if (yi < 0 || yi >= H) continue;
                    for (int64_t j = 0; j < ow; ++j) {
                        int64_t xj = j * stride + kj - pad;
                        if (xj < 0 || xj >= W) continue;
                        dst[i * ow + j] = src[yi * W + xj];
                    }
                }
            }
}

template <typename T>
void col2im_accum(const std::vector<T>& cols, int64_t n, int64_t kh, int64_t kw, int64_t stride,
                  int64_t pad, int64_t oh, int64_t ow, TensorT<T>& dx) {
    int64_t C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                int64_t row = (c * kh + ki) * kw + kj;
                const T* src = cols.data() + row * oh * ow;
                T* dst = dx.data.data() + (n * C + c) * H * W;
                for (int64_t i = 0; i < oh; ++i) {
                    int64_t yi = i * stride + ki - pad;
                    if (yi < 0 || yi >= H) continue;
                    for (int64_t j = 0; j < ow; ++j) {
                        int64_t xj = j * stride + kj - pad;
                        if (xj < 0 || xj >= W) continue;
                        dst[yi * W + xj] += src[i * ow + j];
                    }
                }
            }
}

}  // namespace detail

// x[N,C,H,W] * w[O,C,kh,kw] + bias[O], zero padding
template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias, int64_t stride, int64_t pad) {
    if (x->value.ndim() != 4 || w->value.ndim() != 4 || x->value.dim(1) != w->value.dim(1))
        throw std::invalid_argument("conv2d: incompatible shapes");
    int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    int64_t O = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (bias->value.numel() != O) throw std::invalid_argument("conv2d: bias size mismatch");
    int64_t oh = (H + 2 * pad - kh) / stride + 1;
    int64_t ow = (W + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: output would be empty");

    TensorT<T> out({N, O, oh, ow});
    std::vector<T> cols;
    for (int64_t n = 0; n < N; ++n) {
        detail::im2col(x->value, n, kh, kw, stride, pad, oh, ow, cols);
        ConstMatMap<T> wm(w->value.data.data(), O, C * kh * kw);
        ConstMatMap<T> cm(cols.data(), C * kh * kw, oh * ow);
        MatMap<T> om(out.data.data() + n * O * oh * ow, O, oh * ow);
        om.noalias() = wm * cm;
        for (int64_t o = 0; o < O; ++o) {
            T b = bias->value[o];
            T* p = out.data.data() + (n * O + o) * oh * ow;
            for (int64_t i = 0; i < oh * ow; ++i) p[i] += b;
        }
    }
    return detail::make_op<T>(
        std::move(out), {x, w, bias}, [x, w, bias, N, C, H, W, O, kh, kw, stride, pad, oh, ow](NodeT<T>& node) {
            std::vector<T> cols, dcols(static_cast<size_t>(C * kh * kw * oh * ow));
            for (int64_t n = 0; n < N; ++n) {
                ConstMatMap<T> g(node.grad.data.data() + n * O * oh * ow, O, oh * ow);
                if (w->requires_grad || x->requires_grad)
                    detail::im2col(x->value, n, kh, kw, stride, pad, oh, ow, cols);
                if (w->requires_grad) {
                    MatMap<T> gw(w->grad.data.data(), O, C * kh * kw);
                    ConstMatMap<T> cm(cols.data(), C * kh * kw, oh * ow);
                    gw.noalias() += g * cm.transpose();
                }
                if (x->requires_grad) {
                    ConstMatMap<T> wm(w->value.data.data(), O, C * kh * kw);
                    MatMap<T> dcm(dcols.data(), C * kh * kw, oh * ow);
                    dcm.noalias() = wm.transpose() * g;
                    detail::col2im_accum(dcols, n, kh, kw, stride, pad, oh, ow, x->grad);
                }
                if (bias->requires_grad)
                    for (int64_t o = 0; o < O; ++o) {
                        double s = 0.0;
                        const T* p = node.grad.data.data() + (n * O + o) * oh * ow;
                        for (int64_t i = 0; i < oh * ow; ++i) s += static_cast<double>(p[i]);
                        bias->grad[o] += static_cast<T>(s);
                    }
            }
        });
}

template <typename T>
VarT<T> upsample_nearest2x(const VarT<T>& x) {
    int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    TensorT<T> out({N, C, H * 2, W * 2});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = x->value.data.data() + nc * H * W;
        T* dst = out.data.data() + nc * 4 * H * W;
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                T v = src[i * W + j];
                dst[(2 * i) * 2 * W + 2 * j] = v;
                dst[(2 * i) * 2 * W + 2 * j + 1] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
            }
    }
    return detail::make_op<T>(std::move(out), {x}, [x, N, C, H, W](NodeT<T>& node) {
        for (int64_t nc = 0; nc < N * C; ++nc) {
            T* gdst = x->grad.data.data() + nc * H * W;
            const T* gsrc = node.grad.data.data() + nc * 4 * H * W;
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j)
                    gdst[i * W + j] += gsrc[(2 * i) * 2 * W + 2 * j] + gsrc[(2 * i) * 2 * W + 2 * j + 1] +
                                       gsrc[(2 * i + 1) * 2 * W + 2 * j] +
                                       gsrc[(2 * i + 1) * 2 * W + 2 * j + 1];
        }
    });
}

// group normalization over [N,C,H,W] with affine parameters gamma[C], beta[C]
template <typename T>
VarT<T> group_norm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta, int64_t groups,
                   double eps = 1e-5) {
    int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    if (C % groups != 0) throw std::invalid_argument("group_norm: C not divisible by groups");
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw std::invalid_argument("group_norm: affine size mismatch");
    int64_t cg = C / groups, m = cg * H * W;

    TensorT<T> out(x->value.shape);
    // stats saved for backward
    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(N * groups));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(N * groups));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
            const T* p = x->value.data.data() + (n * C + g * cg) * H * W;
            double mu = 0.0;
            for (int64_t i = 0; i < m; ++i) mu += static_cast<double>(p[i]);
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                double d = static_cast<double>(p[i]) - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            double is = 1.0 / std::sqrt(var + eps);
            (*mean)[static_cast<size_t>(n * groups + g)] = mu;
            (*inv_std)[static_cast<size_t>(n * groups + g)] = is;
            for (int64_t c = 0; c < cg; ++c) {
                int64_t ch = g * cg + c;
                double ga = static_cast<double>(gamma->value[ch]);
                double be = static_cast<double>(beta->value[ch]);
                const T* src = x->value.data.data() + (n * C + ch) * H * W;
                T* dst = out.data.data() + (n * C + ch) * H * W;
                for (int64_t i = 0; i < H * W; ++i)
                    dst[i] = static_cast<T>((static_cast<double>(src[i]) - mu) * is * ga + be);
            }
        }
    return detail::make_op<T>(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, mean, inv_std, N, C, groups, cg, H, W, m](NodeT<T>& node) {
            int64_t hw = H * W;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t g = 0; g < groups; ++g) {
                    double mu = (*mean)[static_cast<size_t>(n * groups + g)];
                    double is = (*inv_std)[static_cast<size_t>(n * groups + g)];
                    // s1 = sum(dxhat), s2 = sum(dxhat * xhat) over the group
                    double s1 = 0.0, s2 = 0.0;
                    for (int64_t c = 0; c < cg; ++c) {
                        int64_t ch = g * cg + c;
                        double ga = static_cast<double>(gamma->value[ch]);
                        const T* gp = node.grad.data.data() + (n * C + ch) * hw;
                        const T* xp = x->value.data.data() + (n * C + ch) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            double xhat = (static_cast<double>(xp[i]) - mu) * is;
                            double dxh = static_cast<double>(gp[i]) * ga;
                            s1 += dxh;
                            s2 += dxh * xhat;
                        }
                    }
                    for (int64_t c = 0; c < cg; ++c) {
                        int64_t ch = g * cg + c;
                        double ga = static_cast<double>(gamma->value[ch]);
                        const T* gp = node.grad.data.data() + (n * C + ch) * hw;
                        const T* xp = x->value.data.data() + (n * C + ch) * hw;
                        if (x->requires_grad) {
                            T* dxp = x->grad.data.data() + (n * C + ch) * hw;
                            for (int64_t i = 0; i < hw; ++i) {
                                double xhat = (static_cast<double>(xp[i]) - mu) * is;
                                double dxh = static_cast<double>(gp[i]) * ga;
                                dxp[i] += static_cast<T>(
                                    is * (dxh - (s1 + xhat * s2) / static_cast<double>(m)));
                            }
                        }
                        if (gamma->requires_grad || beta->requires_grad) {
                            double dga = 0.0, dbe = 0.0;
                            for (int64_t i = 0; i < hw; ++i) {
                                double xhat = (static_cast<double>(xp[i]) - mu) * is;
                                dga += static_cast<double>(gp[i]) * xhat;
                                dbe += static_cast<double>(gp[i]);
                            }
                            if (gamma->requires_grad) gamma->grad[ch] += static_cast<T>(dga);
                            if (beta->requires_grad) beta->grad[ch] += static_cast<T>(dbe);
                        }
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

// mean of (a - target)^2 over all elements; target carries no grad path unless
// it is itself a tracked var
template <typename T>
VarT<T> mse_loss(const VarT<T>& a, const VarT<T>& target) {
    check_same_shape(a->value, target->value, "mse_loss");
    int64_t n = a->value.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a->value[i]) - static_cast<double>(target->value[i]);
        acc += d * d;
    }
    TensorT<T> out({1});
    out[0] = static_cast<T>(acc / static_cast<double>(n));
    return detail::make_op<T>(std::move(out), {a, target}, [a, target, n](NodeT<T>& node) {
        double g = static_cast<double>(node.grad[0]) * 2.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            double d = static_cast<double>(a->value[i]) - static_cast<double>(target->value[i]);
            if (a->requires_grad) a->grad[i] += static_cast<T>(g * d);
            if (target->requires_grad) target->grad[i] -= static_cast<T>(g * d);
        }
    });
}

template <typename T>
VarT<T> mean_all(const VarT<T>& a) {
    int64_t n = a->value.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(a->value[i]);
    TensorT<T> out({1});
    out[0] = static_cast<T>(acc / static_cast<double>(n));
    return detail::make_op<T>(std::move(out), {a}, [a, n](NodeT<T>& node) {
        T g = static_cast<T>(static_cast<double>(node.grad[0]) / static_cast<double>(n));
        for (int64_t i = 0; i < n; ++i) a->grad[i] += g;
    });
}

}  // namespace r2r

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ajepa/common.hpp"
#include "ajepa/rng.hpp"

namespace ajepa {

template <typename T>
class Graph;

/// Lightweight handle into a Graph's tape. Copying a Tensor copies the handle,
/// not the buffer.
template <typename T>
class Tensor {
  public:
    Tensor() = default;
    Tensor(Graph<T>* graph, std::size_t id) : g_(graph), id_(id) {}

    Graph<T>* graph() const { return g_; }
    std::size_t id() const { return id_; }
    bool valid() const { return g_ != nullptr; }

    const std::vector<std::size_t>& shape() const;
    std::size_t numel() const;
    std::size_t rows() const { return shape().at(0); }
    std::size_t cols() const { return shape().at(1); }

    std::vector<T>& value();
    const std::vector<T>& value() const;
    /// Gradient after backward(); empty for nodes that do not require grad.
    const std::vector<T>& grad() const;
    bool requires_grad() const;

    T item() const {
        if (numel() != 1)
            throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) +
                                        " is not a scalar");
        return value()[0];
    }

  private:
    Graph<T>* g_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in topological order, so the backward
/// sweep is a single reverse pass. Backward closures capture node ids, never
/// pointers, because the node vector may reallocate as the tape grows.
template <typename T>
class Graph {
  public:
    using BackwardFn = std::function<void(Graph<T>&)>;

    struct Node {
        std::vector<std::size_t> shape;
        std::vector<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Tensor<T> leaf(std::vector<std::size_t> shape, std::vector<T> data, bool requires_grad) {
        const std::size_t n = numel_of(shape);
        if (data.size() != n)
            throw std::invalid_argument("leaf: got " + std::to_string(data.size()) +
                                        " values for shape " + shape_str(shape));
        Node node;
        node.shape = std::move(shape);
        node.value = std::move(data);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return Tensor<T>(this, nodes_.size() - 1);
    }

    Tensor<T> constant(std::vector<std::size_t> shape, std::vector<T> data) {
        return leaf(std::move(shape), std::move(data), false);
    }

    Tensor<T> zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        std::vector<T> data(numel_of(shape), T(0));
        return leaf(std::move(shape), std::move(data), requires_grad);
    }

    /// Escape hatch for fused operations: the caller supplies the forward
    /// value and a backward closure over node ids.
    Tensor<T> custom(std::vector<std::size_t> shape, std::vector<T> value, bool requires_grad,
                     BackwardFn backward) {
        Node node;
        node.shape = std::move(shape);
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        if (requires_grad) node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return Tensor<T>(this, nodes_.size() - 1);
    }

    Node& node(std::size_t id) { return nodes_.at(id); }
    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }

    /// Grad buffer of a node if it participates in backprop, else nullptr.
    /// Allocates lazily, zero filled.
    T* grad_ptr(std::size_t id) {
        Node& n = nodes_.at(id);
        if (!n.requires_grad) return nullptr;
        if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
        return n.grad.data();
    }

    /// Backpropagate from a scalar root. Clears all existing grads first.
    void backward(const Tensor<T>& root) {
        if (root.graph() != this) throw std::invalid_argument("backward: root from another graph");
        const Node& r = nodes_.at(root.id());
        if (r.value.size() != 1)
            throw std::invalid_argument("backward: root has shape " + shape_str(r.shape) +
                                        ", expected a scalar");
        if (!r.requires_grad)
            throw std::invalid_argument("backward: root does not require grad");
        for (Node& n : nodes_) n.grad.clear();
        *grad_ptr(root.id()) = T(1);
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this);
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (const std::size_t d : shape) n *= d;
        return n;
    }

  private:
    std::vector<Node> nodes_;
};

template <typename T>
const std::vector<std::size_t>& Tensor<T>::shape() const {
    return g_->node(id_).shape;
}
template <typename T>
std::size_t Tensor<T>::numel() const {
    return g_->node(id_).value.size();
}
template <typename T>
std::vector<T>& Tensor<T>::value() {
    return g_->node(id_).value;
}
template <typename T>
const std::vector<T>& Tensor<T>::value() const {
    return g_->node(id_).value;
}
template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
    return g_->node(id_).grad;
}
template <typename T>
bool Tensor<T>::requires_grad() const {
    return g_->node(id_).requires_grad;
}

namespace detail {

template <typename T>
Graph<T>& same_graph(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.valid() || !b.valid() || a.graph() != b.graph())
        throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
    return *a.graph();
}

/// C[m,n] (+)= A[m,k] @ B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            const T* brow = b + p * n;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
}

/// C[m,n] (+)= A[m,k] @ B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const T* arow = a + i * k;
            const T* brow = b + j * k;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
        }
}

/// C[m,n] (+)= A[k,m]^T @ B[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T api = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

inline bool is_suffix(const std::vector<std::size_t>& suffix, const std::vector<std::size_t>& of) {
    if (suffix.size() > of.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), of.rbegin());
}

}  // namespace detail

namespace detail {

// Ops need their own node id inside the backward closure, which custom()
// cannot know ahead of time, so every op is built through this helper.
template <typename T, typename MakeBackward>
Tensor<T> make_op(Graph<T>& g, std::vector<std::size_t> shape, std::vector<T> value, bool req,
                  MakeBackward&& make_backward) {
    Tensor<T> out = g.custom(std::move(shape), std::move(value), req, nullptr);
    if (req) g.node(out.id()).backward = make_backward(out.id());
    return out;
}

}  // namespace detail

/// 2D matrix product.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>& g = detail::same_graph("matmul", a, b);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " +
                                    shape_str(sb));
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    std::vector<T> out(m * n);
    detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n, false);
    const bool req = a.requires_grad() || b.requires_grad();
    const std::size_t aid = a.id(), bid = b.id();
    return detail::make_op(g, {m, n}, std::move(out), req, [=](std::size_t cid) {
        return [aid, bid, cid, m, k, n](Graph<T>& gr) {
            const T* dc = gr.node(cid).grad.data();
            if (T* da = gr.grad_ptr(aid))
                detail::gemm_nt(dc, gr.node(bid).value.data(), da, m, n, k, true);
            if (T* db = gr.grad_ptr(bid))
                detail::gemm_tn(gr.node(aid).value.data(), dc, db, k, m, n, true);
        };
    });
}

/// Elementwise sum; b may have any shape that is a trailing suffix of a's
/// (bias-style broadcast over the leading dims).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>& g = detail::same_graph("add", a, b);
    if (!detail::is_suffix(b.shape(), a.shape()))
        throw std::invalid_argument("add: shape " + shape_str(b.shape()) +
                                    " is not a suffix of " + shape_str(a.shape()));
    const std::size_t bn = b.numel(), an = a.numel();
    std::vector<T> out(an);
    const T* av = a.value().data();
    const T* bv = b.value().data();
    for (std::size_t i = 0; i < an; ++i) out[i] = av[i] + bv[i % bn];
    const bool req = a.requires_grad() || b.requires_grad();
    const std::size_t aid = a.id(), bid = b.id();
    return detail::make_op(g, a.shape(), std::move(out), req, [=](std::size_t cid) {
        return [aid, bid, cid, an, bn](Graph<T>& gr) {
            const T* dc = gr.node(cid).grad.data();
            if (T* da = gr.grad_ptr(aid))
                for (std::size_t i = 0; i < an; ++i) da[i] += dc[i];
            if (T* db = gr.grad_ptr(bid))
                for (std::size_t i = 0; i < an; ++i) db[i % bn] += dc[i];
        };
    });
}

/// Elementwise difference of same-shape tensors.
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>& g = detail::same_graph("sub", a, b);
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
    const bool req = a.requires_grad() || b.requires_grad();
    const std::size_t aid = a.id(), bid = b.id();
    return detail::make_op(g, a.shape(), std::move(out), req, [=](std::size_t cid) {
        return [aid, bid, cid, n](Graph<T>& gr) {
            const T* dc = gr.node(cid).grad.data();
            if (T* da = gr.grad_ptr(aid))
                for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
            if (T* db = gr.grad_ptr(bid))
                for (std::size_t i = 0; i < n; ++i) db[i] -= dc[i];
        };
    });
}

/// Hadamard product of same-shape tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>& g = detail::same_graph("mul", a, b);
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
    const bool req = a.requires_grad() || b.requires_grad();
    const std::size_t aid = a.id(), bid = b.id();
    return detail::make_op(g, a.shape(), std::move(out), req, [=](std::size_t cid) {
        return [aid, bid, cid, n](Graph<T>& gr) {
            const T* dc = gr.node(cid).grad.data();
            if (T* da = gr.grad_ptr(aid)) {
                const T* bv = gr.node(bid).value.data();
                for (std::size_t i = 0; i < n; ++i) da[i] += dc[i] * bv[i];
            }
            if (T* db = gr.grad_ptr(bid)) {
                const T* av = gr.node(aid).value.data();
                for (std::size_t i = 0; i < n; ++i) db[i] += dc[i] * av[i];
            }
        };
    });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
    Graph<T>& g = *a.graph();
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * s;
    const std::size_t aid = a.id();
    return detail::make_op(g, a.shape(), std::move(out), a.requires_grad(), [=](std::size_t cid) {
        return [aid, cid, s, n](Graph<T>& gr) {
            const T* dc = gr.node(cid).grad.data();
            if (T* da = gr.grad_ptr(aid))
                for (std::size_t i = 0; i < n; ++i) da[i] += dc[i] * s;
        };
    });
}

/// Swap the two dims of a matrix.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    Graph<T>& g = *a.graph();
    const auto& sa = a.shape();
    if (sa.size() != 2)
        throw std::invalid_argument("transpose: expected a matrix, got " + shape_str(sa));
    const std::size_t m = sa[0], n = sa[1];
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
    const std::size_t aid = a.id();
    return detail::make_op(g, {n, m}, std::move(out), a.requires_grad(), [=](std::size_t cid) {
        return [aid, cid, m, n](Graph<T>& gr) {
            const T* dc = gr.node(cid).grad.data();
            if (T* da = gr.grad_ptr(aid))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dc[j * m + i];
        };
    });
}

/// Row-wise softmax over the last dim, stabilized by the row max.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    Graph<T>& g = *a.graph();
    const auto& sa = a.shape();
    if (sa.empty()) throw std::invalid_argument("softmax: scalar input");
    const std::size_t d = sa.back();
    const std::size_t rows = a.numel() / d;
    std::vector<T> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.value().data() + r * d;
        T* y = out.data() + r * d;
        T mx = x[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        T z = T(0);
        for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < d; ++j) y[j] /= z;
    }
    const std::size_t aid = a.id();
    return detail::make_op(g, sa, std::move(out), a.requires_grad(), [=](std::size_t cid) {
        return [aid, cid, rows, d](Graph<T>& gr) {
            T* da = gr.grad_ptr(aid);
            if (!da) return;
            const T* dc = gr.node(cid).grad.data();
            const T* y = gr.node(cid).value.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yr = y + r * d;
                const T* dr = dc + r * d;
                T dot = T(0);
                for (std::size_t j = 0; j < d; ++j) dot += dr[j] * yr[j];
                for (std::size_t j = 0; j < d; ++j) da[r * d + j] += yr[j] * (dr[j] - dot);
            }
        };
    });
}

/// Layer normalization over the last dim with affine parameters gamma, beta
/// of shape [d]. Uses the biased variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
    Graph<T>& g = detail::same_graph("layer_norm", a, gamma);
    detail::same_graph("layer_norm", a, beta);
    const auto& sa = a.shape();
    if (sa.empty()) throw std::invalid_argument("layer_norm: scalar input");
    const std::size_t d = sa.back();
    if (gamma.shape() != std::vector<std::size_t>{d} || beta.shape() != std::vector<std::size_t>{d})
        throw std::invalid_argument("layer_norm: input " + shape_str(sa) + " needs affine shape [" +
                                    std::to_string(d) + "], got gamma " + shape_str(gamma.shape()) +
                                    " beta " + shape_str(beta.shape()));
    const std::size_t rows = a.numel() / d;
    std::vector<T> out(a.numel());
    std::vector<T> inv_std(rows), mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.value().data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = gamma.value()[j] * (x[j] - mu) * is + beta.value()[j];
    }
    const bool req = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    const std::size_t aid = a.id(), gid = gamma.id(), bid = beta.id();
    return detail::make_op(
        g, sa, std::move(out), req,
        [=, mean = std::move(mean), inv_std = std::move(inv_std)](std::size_t cid) {
            return [aid, gid, bid, cid, rows, d, mean, inv_std](Graph<T>& gr) {
                const T* dc = gr.node(cid).grad.data();
                const T* x = gr.node(aid).value.data();
                const T* gm = gr.node(gid).value.data();
                T* da = gr.grad_ptr(aid);
                T* dg = gr.grad_ptr(gid);
                T* db = gr.grad_ptr(bid);
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* xr = x + r * d;
                    const T* dr = dc + r * d;
                    const T is = inv_std[r], mu = mean[r];
                    if (dg || db)
                        for (std::size_t j = 0; j < d; ++j) {
                            const T xhat = (xr[j] - mu) * is;
                            if (dg) dg[j] += dr[j] * xhat;
                            if (db) db[j] += dr[j];
                        }
                    if (!da) continue;
                    // dx = is/d * (d*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                    T sum_dx = T(0), sum_dxx = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxhat = dr[j] * gm[j];
                        const T xhat = (xr[j] - mu) * is;
                        sum_dx += dxhat;
                        sum_dxx += dxhat * xhat;
                    }
                    const T dn = static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxhat = dr[j] * gm[j];
                        const T xhat = (xr[j] - mu) * is;
                        da[r * d + j] += is / dn * (dn * dxhat - sum_dx - xhat * sum_dxx);
                    }
                }
            };
        });
}

/// Tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    Graph<T>& g = *a.graph();
    const std::size_t n = a.numel();
    constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kBeta = T(0.044715);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T x = a.value()[i];
        out[i] = T(0.5) * x * (T(1) + std::tanh(kAlpha * (x + kBeta * x * x * x)));
    }
    const std::size_t aid = a.id();
    return detail::make_op(g, a.shape(), std::move(out), a.requires_grad(), [=](std::size_t cid) {
        return [aid, cid, n](Graph<T>& gr) {
            T* da = gr.grad_ptr(aid);
            if (!da) return;
            const T* dc = gr.node(cid).grad.data();
            const T* x = gr.node(aid).value.data();
            for (std::size_t i = 0; i < n; ++i) {
                const T t = std::tanh(kAlpha * (x[i] + kBeta * x[i] * x[i] * x[i]));
                const T dinner = kAlpha * (T(1) + T(3) * kBeta * x[i] * x[i]);
                da[i] += dc[i] * (T(0.5) * (T(1) + t) +
                                  T(0.5) * x[i] * (T(1) - t * t) * dinner);
            }
        };
    });
}

/// Gather rows along axis 0; backward scatter-adds, so repeated indices are
/// fine.
template <typename T>
Tensor<T> index_select(const Tensor<T>& a, std::vector<std::size_t> indices) {
    Graph<T>& g = *a.graph();
    const auto& sa = a.shape();
    if (sa.empty()) throw std::invalid_argument("index_select: scalar input");
    const std::size_t stride = a.numel() / sa[0];
    for (const std::size_t j : indices)
        if (j >= sa[0])
            throw std::invalid_argument("index_select: index " + std::to_string(j) +
                                        " out of range for shape " + shape_str(sa));
    std::vector<std::size_t> shape = sa;
    shape[0] = indices.size();
    std::vector<T> out(indices.size() * stride);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(a.value().data() + indices[i] * stride, stride, out.data() + i * stride);
    const std::size_t aid = a.id();
    return detail::make_op(
        g, std::move(shape), std::move(out), a.requires_grad(),
        [aid, stride, indices = std::move(indices)](std::size_t cid) {
            return [aid, cid, stride, indices](Graph<T>& gr) {
                T* da = gr.grad_ptr(aid);
                if (!da) return;
                const T* dc = gr.node(cid).grad.data();
                for (std::size_t i = 0; i < indices.size(); ++i) {
                    T* dst = da + indices[i] * stride;
                    const T* src = dc + i * stride;
                    for (std::size_t k = 0; k < stride; ++k) dst[k] += src[k];
                }
            };
        });
}

/// Concatenate along axis 0 (any rank) or axis 1 (matrices).
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis = 0) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Graph<T>& g = *parts[0].graph();
    for (const auto& p : parts) detail::same_graph("concat", parts[0], p);
    if (axis > 1) throw std::invalid_argument("concat: axis must be 0 or 1");

    const auto& s0 = parts[0].shape();
    std::vector<std::size_t> shape = s0;
    bool req = false;
    if (axis == 0) {
        std::size_t total = 0;
        for (const auto& p : parts) {
            const auto& sp = p.shape();
            if (sp.size() != s0.size() ||
                !std::equal(sp.begin() + 1, sp.end(), s0.begin() + 1))
                throw std::invalid_argument("concat: shape " + shape_str(sp) +
                                            " incompatible with " + shape_str(s0) + " on axis 0");
            total += sp[0];
            req = req || p.requires_grad();
        }
        shape[0] = total;
        std::vector<T> out;
        out.reserve(Graph<T>::numel_of(shape));
        for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
        std::vector<std::size_t> ids, sizes;
        for (const auto& p : parts) {
            ids.push_back(p.id());
            sizes.push_back(p.numel());
        }
        return detail::make_op(g, std::move(shape), std::move(out), req,
                               [ids = std::move(ids), sizes = std::move(sizes)](std::size_t cid) {
                                   return [ids, sizes, cid](Graph<T>& gr) {
                                       const T* dc = gr.node(cid).grad.data();
                                       std::size_t off = 0;
                                       for (std::size_t p = 0; p < ids.size(); ++p) {
                                           if (T* dp = gr.grad_ptr(ids[p]))
                                               for (std::size_t i = 0; i < sizes[p]; ++i)
                                                   dp[i] += dc[off + i];
                                           off += sizes[p];
                                       }
                                   };
                               });
    }

    // axis == 1
    if (s0.size() != 2)
        throw std::invalid_argument("concat: axis 1 needs matrices, got " + shape_str(s0));
    const std::size_t rows = s0[0];
    std::size_t total_cols = 0;
    for (const auto& p : parts) {
        const auto& sp = p.shape();
        if (sp.size() != 2 || sp[0] != rows)
            throw std::invalid_argument("concat: shape " + shape_str(sp) + " incompatible with " +
                                        shape_str(s0) + " on axis 1");
        total_cols += sp[1];
        req = req || p.requires_grad();
    }
    std::vector<T> out(rows * total_cols);
    std::vector<std::size_t> ids, widths;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(p.value().data() + r * w, w, out.data() + r * total_cols + off);
        ids.push_back(p.id());
        widths.push_back(w);
        off += w;
    }
    return detail::make_op(
        g, {rows, total_cols}, std::move(out), req,
        [ids = std::move(ids), widths = std::move(widths), rows, total_cols](std::size_t cid) {
            return [ids, widths, rows, total_cols, cid](Graph<T>& gr) {
                const T* dc = gr.node(cid).grad.data();
                std::size_t off = 0;
                for (std::size_t p = 0; p < ids.size(); ++p) {
                    const std::size_t w = widths[p];
                    if (T* dp = gr.grad_ptr(ids[p]))
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < w; ++j)
                                dp[r * w + j] += dc[r * total_cols + off + j];
                    off += w;
                }
            };
        });
}

/// Contiguous slice: axis 0 for any rank, axis 1 for matrices.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    Graph<T>& g = *a.graph();
    const auto& sa = a.shape();
    if (axis >= sa.size() || axis > 1)
        throw std::invalid_argument("slice: axis " + std::to_string(axis) + " invalid for shape " +
                                    shape_str(sa));
    if (start + len > sa[axis] || len == 0)
        throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of bounds for shape " +
                                    shape_str(sa) + " axis " + std::to_string(axis));
    std::vector<std::size_t> shape = sa;
    shape[axis] = len;
    const std::size_t aid = a.id();

    if (axis == 0) {
        const std::size_t stride = a.numel() / sa[0];
        std::vector<T> out(len * stride);
        std::copy_n(a.value().data() + start * stride, len * stride, out.data());
        return detail::make_op(g, std::move(shape), std::move(out), a.requires_grad(),
                               [=](std::size_t cid) {
                                   return [aid, cid, start, len, stride](Graph<T>& gr) {
                                       if (T* da = gr.grad_ptr(aid)) {
                                           const T* dc = gr.node(cid).grad.data();
                                           for (std::size_t i = 0; i < len * stride; ++i)
                                               da[start * stride + i] += dc[i];
                                       }
                                   };
                               });
    }

    if (sa.size() != 2)
        throw std::invalid_argument("slice: axis 1 needs a matrix, got " + shape_str(sa));
    const std::size_t rows = sa[0], cols = sa[1];
    std::vector<T> out(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(a.value().data() + r * cols + start, len, out.data() + r * len);
    return detail::make_op(g, std::move(shape), std::move(out), a.requires_grad(),
                           [=](std::size_t cid) {
                               return [aid, cid, start, len, rows, cols](Graph<T>& gr) {
                                   if (T* da = gr.grad_ptr(aid)) {
                                       const T* dc = gr.node(cid).grad.data();
                                       for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t j = 0; j < len; ++j)
                                               da[r * cols + start + j] += dc[r * len + j];
                                   }
                               };
                           });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<std::size_t> shape) {
    Graph<T>& g = *a.graph();
    if (Graph<T>::numel_of(shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    std::vector<T> out = a.value();
    const std::size_t aid = a.id(), n = a.numel();
    return detail::make_op(g, std::move(shape), std::move(out), a.requires_grad(),
                           [=](std::size_t cid) {
                               return [aid, cid, n](Graph<T>& gr) {
                                   if (T* da = gr.grad_ptr(aid)) {
                                       const T* dc = gr.node(cid).grad.data();
                                       for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
                                   }
                               };
                           });
}

/// Full reduction to a [1] scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    Graph<T>& g = *a.graph();
    T acc = T(0);
    for (const T v : a.value()) acc += v;
    const std::size_t aid = a.id(), n = a.numel();
    return detail::make_op(g, {1}, std::vector<T>{acc}, a.requires_grad(), [=](std::size_t cid) {
        return [aid, cid, n](Graph<T>& gr) {
            if (T* da = gr.grad_ptr(aid)) {
                const T dc = gr.node(cid).grad[0];
                for (std::size_t i = 0; i < n; ++i) da[i] += dc;
            }
        };
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    Graph<T>& g = *a.graph();
    T acc = T(0);
    for (const T v : a.value()) acc += v;
    const std::size_t aid = a.id(), n = a.numel();
    acc /= static_cast<T>(n);
    return detail::make_op(g, {1}, std::vector<T>{acc}, a.requires_grad(), [=](std::size_t cid) {
        return [aid, cid, n](Graph<T>& gr) {
            if (T* da = gr.grad_ptr(aid)) {
                const T dc = gr.node(cid).grad[0] / static_cast<T>(n);
                for (std::size_t i = 0; i < n; ++i) da[i] += dc;
            }
        };
    });
}

/// Row-wise smoothed L1 between same-shape matrices, averaged over rows.
/// Per row u = a_r - b_r the distance is 0.5 * ||u||_2^2 when ||u||_1 < 1 and
/// ||u||_1 - 0.5 otherwise. With elementwise=true the regime switch happens
/// per coordinate instead and the row distance is the sum over coordinates.
template <typename T>
Tensor<T> smoothed_l1_rows(const Tensor<T>& a, const Tensor<T>& b, bool elementwise = false) {
    Graph<T>& g = detail::same_graph("smoothed_l1_rows", a, b);
    const auto& sa = a.shape();
    if (sa.size() != 2 || a.shape() != b.shape())
        throw std::invalid_argument("smoothed_l1_rows: need equal matrices, got " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t rows = sa[0], d = sa[1];
    T total = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* ar = a.value().data() + r * d;
        const T* br = b.value().data() + r * d;
        if (elementwise) {
            for (std::size_t j = 0; j < d; ++j) {
                const T u = ar[j] - br[j];
                total += std::abs(u) < T(1) ? T(0.5) * u * u : std::abs(u) - T(0.5);
            }
        } else {
            T l1 = T(0), sq = T(0);
            for (std::size_t j = 0; j < d; ++j) {
                const T u = ar[j] - br[j];
                l1 += std::abs(u);
                sq += u * u;
            }
            total += l1 < T(1) ? T(0.5) * sq : l1 - T(0.5);
        }
    }
    total /= static_cast<T>(rows);
    const bool req = a.requires_grad() || b.requires_grad();
    const std::size_t aid = a.id(), bid = b.id();
    return detail::make_op(g, {1}, std::vector<T>{total}, req, [=](std::size_t cid) {
        return [aid, bid, cid, rows, d, elementwise](Graph<T>& gr) {
            const T dc = gr.node(cid).grad[0] / static_cast<T>(rows);
            T* da = gr.grad_ptr(aid);
            T* db = gr.grad_ptr(bid);
            if (!da && !db) return;
            const T* av = gr.node(aid).value.data();
            const T* bv = gr.node(bid).value.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* ar = av + r * d;
                const T* br = bv + r * d;
                bool quadratic_row = false;
                if (!elementwise) {
                    T l1 = T(0);
                    for (std::size_t j = 0; j < d; ++j) l1 += std::abs(ar[j] - br[j]);
                    quadratic_row = l1 < T(1);
                }
                for (std::size_t j = 0; j < d; ++j) {
                    const T u = ar[j] - br[j];
                    const bool quad = elementwise ? std::abs(u) < T(1) : quadratic_row;
                    const T du = quad ? u : (u > T(0) ? T(1) : (u < T(0) ? T(-1) : T(0)));
                    if (da) da[r * d + j] += dc * du;
                    if (db) db[r * d + j] -= dc * du;
                }
            }
        };
    });
}

/// Central-difference gradient verification.
struct GradCheckReport {
    double max_abs = 0.0;
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::string worst;

    bool pass(double tol) const { return checked > 0 && max_rel <= tol; }
};

/// build(graph, leaves) must construct a scalar output from the given leaves.
/// Compares analytic gradients against central differences for every input
/// coordinate, or for max_coords randomly chosen ones per input when
/// max_coords > 0 (rng required in that case). Relative error uses
/// |a - n| / max(1, |a| + |n|).
template <typename T, typename Build>
GradCheckReport grad_check(Build&& build,
                           std::vector<std::pair<std::vector<std::size_t>, std::vector<T>>> inputs,
                           T eps, std::size_t max_coords = 0, Rng* rng = nullptr) {
    const auto eval = [&](const auto& data, std::vector<std::vector<T>>* grads) {
        Graph<T> g;
        std::vector<Tensor<T>> leaves;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            leaves.push_back(g.leaf(inputs[i].first, data[i], true));
        Tensor<T> out = build(g, leaves);
        const T y = out.item();
        if (grads) {
            g.backward(out);
            grads->clear();
            for (const auto& leaf : leaves) grads->push_back(leaf.grad());
        }
        return y;
    };

    std::vector<std::vector<T>> data;
    for (const auto& [shape, values] : inputs) data.push_back(values);
    std::vector<std::vector<T>> analytic;
    eval(data, &analytic);

    GradCheckReport report;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::vector<std::size_t> coords;
        const std::size_t n = data[i].size();
        if (max_coords == 0 || max_coords >= n) {
            coords.resize(n);
            std::iota(coords.begin(), coords.end(), std::size_t{0});
        } else {
            if (!rng) throw std::invalid_argument("grad_check: sampling coords needs an rng");
            for (std::size_t k = 0; k < max_coords; ++k)
                coords.push_back(static_cast<std::size_t>(rng->uniform_below(n)));
        }
        for (const std::size_t c : coords) {
            const T saved = data[i][c];
            data[i][c] = saved + eps;
            const T fp = eval(data, nullptr);
            data[i][c] = saved - eps;
            const T fm = eval(data, nullptr);
            data[i][c] = saved;
            const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                                   (2.0 * static_cast<double>(eps));
            const double exact = static_cast<double>(analytic[i][c]);
            const double abs_err = std::abs(exact - numeric);
            const double rel =
                abs_err / std::max(1.0, std::abs(exact) + std::abs(numeric));
            report.checked += 1;
            if (abs_err > report.max_abs) report.max_abs = abs_err;
            if (rel > report.max_rel) {
                report.max_rel = rel;
                report.worst = "input " + std::to_string(i) + " coord " + std::to_string(c) +
                               ": analytic " + std::to_string(exact) + " numeric " +
                               std::to_string(numeric);
            }
        }
    }
    return report;
}

}  // namespace ajepa

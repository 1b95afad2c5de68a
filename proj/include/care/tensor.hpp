#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "care/common.hpp"

// Dense row-major tensor engine with a reverse-mode tape. Templated on the
// scalar type: float is the training dtype, double is the verification dtype
// used by the finite-difference gradient checker. All reductions run in a
// fixed sequential order so that two identical seeded runs are bitwise equal.

namespace care {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
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

template <typename S>
struct NodeT {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated iff requires_grad
    std::vector<S> adj;   // transient adjoint, live only inside backward()
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<S>>> parents;
    // Reads this->adj, accumulates into parents' adj (skipping parents whose
    // adj buffer is empty, i.e. parents outside the differentiable subgraph).
    std::function<void(NodeT<S>&)> backward_fn;
};

template <typename S>
class TensorT {
public:
    using Node = NodeT<S>;

    TensorT() = default;

    static TensorT zeros(Shape shape) {
        return from_data(shape, std::vector<S>(shape_numel(shape), S(0)));
    }

    static TensorT full(Shape shape, S value) {
        return from_data(shape, std::vector<S>(shape_numel(shape), value));
    }

    static TensorT scalar(S value) { return from_data({1}, {value}); }

    static TensorT from_data(Shape shape, std::vector<S> values) {
        if (shape_numel(shape) != values.size())
            throw DimError("tensor: shape " + shape_str(shape) + " wants " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
        TensorT t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }

    std::vector<S>& data() { return node_->data; }
    const std::vector<S>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }

    TensorT& set_requires_grad(bool on) {
        node_->requires_grad = on;
        if (on)
            node_->grad.assign(node_->data.size(), S(0));
        else
            node_->grad.clear();
        return *this;
    }

    std::vector<S>& grad() {
        if (!node_->requires_grad) throw ContractError("tensor: grad() on a tensor without requires_grad");
        return node_->grad;
    }
    const std::vector<S>& grad() const {
        if (!node_->requires_grad) throw ContractError("tensor: grad() on a tensor without requires_grad");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    S item() const {
        if (numel() != 1) throw ContractError("tensor: item() on shape " + shape_str(shape()));
        return node_->data[0];
    }

    // Drops tape history; keeps the same storage as a fresh constant leaf.
    TensorT detach() const {
        TensorT t = from_data(node_->shape, node_->data);
        return t;
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <typename S>
TensorT<S> make_op(Shape shape, std::vector<S> values,
                   std::vector<TensorT<S>> parents,
                   std::function<void(NodeT<S>&)> backward_fn) {
    TensorT<S> out = TensorT<S>::from_data(std::move(shape), std::move(values));
    auto node = out.node();
    bool rg = false;
    node->parents.reserve(parents.size());
    for (auto& p : parents) {
        rg = rg || p.requires_grad();
        node->parents.push_back(p.node());
    }
    if (rg) {
        node->requires_grad = true;
        node->grad.assign(node->data.size(), S(0));
        node->backward_fn = std::move(backward_fn);
    }
    return out;
}

// Raw matmul kernels, all accumulate into C. Fixed ikj/ijk orders.
template <typename S>
void mm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is [n,k]
template <typename S>
void mm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = S(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m,n] += A^T * B where A is [k,m], B is [k,n]
template <typename S>
void mm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const S* arow = a + p * m;
        const S* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const S av = arow[i];
            S* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename S>
inline S* adj_of(NodeT<S>& p) {
    return p.adj.empty() ? nullptr : p.adj.data();
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Elementwise and broadcast ops
// ----------------------------------------------------------------------------

template <typename S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape(a, b, "add");
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](NodeT<S>& n) {
        for (int p = 0; p < 2; ++p)
            if (S* pa = detail::adj_of(*n.parents[p]))
                for (std::size_t i = 0; i < n.adj.size(); ++i) pa[i] += n.adj[i];
    });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape(a, b, "sub");
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](NodeT<S>& n) {
        if (S* pa = detail::adj_of(*n.parents[0]))
            for (std::size_t i = 0; i < n.adj.size(); ++i) pa[i] += n.adj[i];
        if (S* pb = detail::adj_of(*n.parents[1]))
            for (std::size_t i = 0; i < n.adj.size(); ++i) pb[i] -= n.adj[i];
    });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape(a, b, "mul");
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](NodeT<S>& n) {
        const auto& av = n.parents[0]->data;
        const auto& bv = n.parents[1]->data;
        if (S* pa = detail::adj_of(*n.parents[0]))
            for (std::size_t i = 0; i < n.adj.size(); ++i) pa[i] += n.adj[i] * bv[i];
        if (S* pb = detail::adj_of(*n.parents[1]))
            for (std::size_t i = 0; i < n.adj.size(); ++i) pb[i] += n.adj[i] * av[i];
    });
}

template <typename S>
TensorT<S> divide(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape(a, b, "divide");
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](NodeT<S>& n) {
        const auto& av = n.parents[0]->data;
        const auto& bv = n.parents[1]->data;
        if (S* pa = detail::adj_of(*n.parents[0]))
            for (std::size_t i = 0; i < n.adj.size(); ++i) pa[i] += n.adj[i] / bv[i];
        if (S* pb = detail::adj_of(*n.parents[1]))
            for (std::size_t i = 0; i < n.adj.size(); ++i)
                pb[i] -= n.adj[i] * av[i] / (bv[i] * bv[i]);
    });
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [c](NodeT<S>& n) {
        if (S* pa = detail::adj_of(*n.parents[0]))
            for (std::size_t i = 0; i < n.adj.size(); ++i) pa[i] += n.adj[i] * c;
    });
}

// x: [T,D], v: [D]; adds v to every row.
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& v) {
    if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
        throw DimError("add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<S> out(x.numel());
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t d = 0; d < cols; ++d) out[t * cols + d] = x.data()[t * cols + d] + v.data()[d];
    return detail::make_op<S>(x.shape(), std::move(out), {x, v}, [rows, cols](NodeT<S>& n) {
        if (S* px = detail::adj_of(*n.parents[0]))
            for (std::size_t i = 0; i < n.adj.size(); ++i) px[i] += n.adj[i];
        if (S* pv = detail::adj_of(*n.parents[1]))
            for (std::size_t t = 0; t < rows; ++t)
                for (std::size_t d = 0; d < cols; ++d) pv[d] += n.adj[t * cols + d];
    });
}

// ----------------------------------------------------------------------------
// Linear algebra
// ----------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(m * n, S(0));
    detail::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::make_op<S>({m, n}, std::move(out), {a, b}, [m, k, n](NodeT<S>& node) {
        const auto& av = node.parents[0]->data;
        const auto& bv = node.parents[1]->data;
        if (S* pa = detail::adj_of(*node.parents[0]))
            detail::mm_nt(node.adj.data(), bv.data(), pa, m, n, k);  // dA = adj * B^T
        if (S* pb = detail::adj_of(*node.parents[1]))
            detail::mm_tn(av.data(), node.adj.data(), pb, k, m, n);  // dB = A^T * adj
    });
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
    if (x.rank() != 2) throw DimError("transpose: need rank 2, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<S> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
    return detail::make_op<S>({n, m}, std::move(out), {x}, [m, n](NodeT<S>& node) {
        if (S* px = detail::adj_of(*node.parents[0]))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) px[i * n + j] += node.adj[j * m + i];
    });
}

// ----------------------------------------------------------------------------
// Convolution
// ----------------------------------------------------------------------------

enum class Padding { Same, Valid };

// Output length rule shared with the frontend's stride-schedule algebra.
inline std::size_t conv1d_out_len(std::size_t t, std::size_t k, std::size_t stride, Padding pad) {
    if (k < 1 || stride < 1) throw ConfigError("conv1d: kernel and stride must be >= 1");
    if (pad == Padding::Same) return (t + stride - 1) / stride;
    if (t < k)
        throw DimError("conv1d: input length " + std::to_string(t) +
                       " shorter than kernel " + std::to_string(k) + " (empty output)");
    return (t - k) / stride + 1;
}

// x: [T, Cin], kernel: [K, Cin, Cout] -> [T', Cout]. "Same" pads so that
// T' = ceil(T / stride); with stride 1 this preserves T.
template <typename S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& kernel, std::size_t stride, Padding pad) {
    if (x.rank() != 2 || kernel.rank() != 3)
        throw DimError("conv1d: x " + shape_str(x.shape()) + ", kernel " + shape_str(kernel.shape()));
    if (x.dim(1) != kernel.dim(1))
        throw DimError("conv1d: channel mismatch " + shape_str(x.shape()) + " vs kernel " +
                       shape_str(kernel.shape()));
    const std::size_t t_in = x.dim(0), cin = x.dim(1);
    const std::size_t k = kernel.dim(0), cout = kernel.dim(2);
    const std::size_t t_out = conv1d_out_len(t_in, k, stride, pad);
    std::size_t pad_left = 0;
    if (pad == Padding::Same) {
        const std::size_t span = (t_out - 1) * stride + k;
        const std::size_t pad_total = span > t_in ? span - t_in : 0;
        pad_left = pad_total / 2;
    }

    std::vector<S> out(t_out * cout, S(0));
    const S* xd = x.data().data();
    const S* kd = kernel.data().data();
    for (std::size_t t = 0; t < t_out; ++t) {
        S* orow = out.data() + t * cout;
        for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                       static_cast<std::ptrdiff_t>(pad_left);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
            const S* xrow = xd + static_cast<std::size_t>(src) * cin;
            const S* kslab = kd + j * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const S xv = xrow[ci];
                const S* krow = kslab + ci * cout;
                for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * krow[co];
            }
        }
    }

    return detail::make_op<S>(
        {t_out, cout}, std::move(out), {x, kernel},
        [t_in, cin, k, cout, t_out, stride, pad_left](NodeT<S>& node) {
            const S* xd = node.parents[0]->data.data();
            const S* kd = node.parents[1]->data.data();
            S* dx = detail::adj_of(*node.parents[0]);
            S* dk = detail::adj_of(*node.parents[1]);
            for (std::size_t t = 0; t < t_out; ++t) {
                const S* arow = node.adj.data() + t * cout;
                for (std::size_t j = 0; j < k; ++j) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                               static_cast<std::ptrdiff_t>(pad_left);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
                    const std::size_t si = static_cast<std::size_t>(src);
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const S* krow = kd + (j * cin + ci) * cout;
                        if (dk) {
                            const S xv = xd[si * cin + ci];
                            S* dkrow = dk + (j * cin + ci) * cout;
                            for (std::size_t co = 0; co < cout; ++co) dkrow[co] += arow[co] * xv;
                        }
                        if (dx) {
                            S acc = S(0);
                            for (std::size_t co = 0; co < cout; ++co) acc += arow[co] * krow[co];
                            dx[si * cin + ci] += acc;
                        }
                    }
                }
            }
        });
}

// ----------------------------------------------------------------------------
// Normalization and row-wise maps
// ----------------------------------------------------------------------------

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps) {
    if (x.rank() != 2) throw DimError("layer_norm: need rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw DimError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    std::vector<S> out(x.numel());
    std::vector<S> xhat(x.numel());
    std::vector<S> inv_std(rows);
    for (std::size_t t = 0; t < rows; ++t) {
        const S* row = x.data().data() + t * d;
        S mean = S(0);
        for (std::size_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (std::size_t i = 0; i < d; ++i) {
            const S c = row[i] - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S istd = S(1) / std::sqrt(var + eps);
        inv_std[t] = istd;
        for (std::size_t i = 0; i < d; ++i) {
            const S xh = (row[i] - mean) * istd;
            xhat[t * d + i] = xh;
            out[t * d + i] = gain.data()[i] * xh + bias.data()[i];
        }
    }
    return detail::make_op<S>(
        x.shape(), std::move(out), {x, gain, bias},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<S>& node) {
            const auto& g = node.parents[1]->data;
            S* dx = detail::adj_of(*node.parents[0]);
            S* dg = detail::adj_of(*node.parents[1]);
            S* db = detail::adj_of(*node.parents[2]);
            for (std::size_t t = 0; t < rows; ++t) {
                const S* a = node.adj.data() + t * d;
                const S* xh = xhat.data() + t * d;
                if (dg)
                    for (std::size_t i = 0; i < d; ++i) dg[i] += a[i] * xh[i];
                if (db)
                    for (std::size_t i = 0; i < d; ++i) db[i] += a[i];
                if (dx) {
                    S mean_dxh = S(0), mean_dxh_xh = S(0);
                    for (std::size_t i = 0; i < d; ++i) {
                        const S dxh = a[i] * g[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                    }
                    mean_dxh /= static_cast<S>(d);
                    mean_dxh_xh /= static_cast<S>(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        const S dxh = a[i] * g[i];
                        dx[t * d + i] += inv_std[t] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
            }
        });
}

namespace detail {
template <typename S>
void softmax_rows_fwd(const S* x, S* y, std::size_t rows, std::size_t d) {
    for (std::size_t t = 0; t < rows; ++t) {
        const S* row = x + t * d;
        S* orow = y + t * d;
        S mx = row[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        S sum = S(0);
        for (std::size_t i = 0; i < d; ++i) {
            orow[i] = std::exp(row[i] - mx);
            sum += orow[i];
        }
        const S inv = S(1) / sum;
        for (std::size_t i = 0; i < d; ++i) orow[i] *= inv;
    }
}
}  // namespace detail

// Softmax over the last dimension; rank 1 is treated as a single row.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    if (x.rank() < 1 || x.rank() > 2)
        throw DimError("softmax_rows: need rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    std::vector<S> out(x.numel());
    detail::softmax_rows_fwd(x.data().data(), out.data(), rows, d);
    std::vector<S> saved = out;
    return detail::make_op<S>(x.shape(), std::move(out), {x},
                              [rows, d, saved = std::move(saved)](NodeT<S>& node) {
                                  S* dx = detail::adj_of(*node.parents[0]);
                                  if (!dx) return;
                                  for (std::size_t t = 0; t < rows; ++t) {
                                      const S* a = node.adj.data() + t * d;
                                      const S* y = saved.data() + t * d;
                                      S dot = S(0);
                                      for (std::size_t i = 0; i < d; ++i) dot += a[i] * y[i];
                                      for (std::size_t i = 0; i < d; ++i)
                                          dx[t * d + i] += y[i] * (a[i] - dot);
                                  }
                              });
}

// Stable log-softmax over the last dimension.
template <typename S>
TensorT<S> log_softmax_rows(const TensorT<S>& x) {
    if (x.rank() < 1 || x.rank() > 2)
        throw DimError("log_softmax_rows: need rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    std::vector<S> out(x.numel());
    for (std::size_t t = 0; t < rows; ++t) {
        const S* row = x.data().data() + t * d;
        S mx = row[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        S sum = S(0);
        for (std::size_t i = 0; i < d; ++i) sum += std::exp(row[i] - mx);
        const S lse = mx + std::log(sum);
        for (std::size_t i = 0; i < d; ++i) out[t * d + i] = row[i] - lse;
    }
    std::vector<S> saved = out;
    return detail::make_op<S>(x.shape(), std::move(out), {x},
                              [rows, d, saved = std::move(saved)](NodeT<S>& node) {
                                  S* dx = detail::adj_of(*node.parents[0]);
                                  if (!dx) return;
                                  for (std::size_t t = 0; t < rows; ++t) {
                                      const S* a = node.adj.data() + t * d;
                                      const S* lp = saved.data() + t * d;
                                      S total = S(0);
                                      for (std::size_t i = 0; i < d; ++i) total += a[i];
                                      for (std::size_t i = 0; i < d; ++i)
                                          dx[t * d + i] += a[i] - std::exp(lp[i]) * total;
                                  }
                              });
}

// ----------------------------------------------------------------------------
// Unary maps
// ----------------------------------------------------------------------------

enum class UnaryKind { Relu, Gelu, Tanh };

inline UnaryKind unary_kind_from(const std::string& name) {
    if (name == "relu") return UnaryKind::Relu;
    if (name == "gelu") return UnaryKind::Gelu;
    if (name == "tanh") return UnaryKind::Tanh;
    throw ConfigError("apply_unary: unknown kind '" + name + "'");
}

template <typename S>
TensorT<S> apply_unary(UnaryKind kind, const TensorT<S>& x) {
    const S inv_sqrt2 = S(0.70710678118654752440);
    const S inv_sqrt2pi = S(0.39894228040143267794);
    std::vector<S> out(x.numel());
    switch (kind) {
        case UnaryKind::Relu:
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
            break;
        case UnaryKind::Gelu:
            for (std::size_t i = 0; i < out.size(); ++i) {
                const S v = x.data()[i];
                out[i] = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
            }
            break;
        case UnaryKind::Tanh:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
            break;
    }
    std::vector<S> saved = out;
    return detail::make_op<S>(
        x.shape(), std::move(out), {x},
        [kind, inv_sqrt2, inv_sqrt2pi, saved = std::move(saved)](NodeT<S>& node) {
            S* dx = detail::adj_of(*node.parents[0]);
            if (!dx) return;
            const auto& xv = node.parents[0]->data;
            switch (kind) {
                case UnaryKind::Relu:
                    for (std::size_t i = 0; i < node.adj.size(); ++i)
                        if (xv[i] > S(0)) dx[i] += node.adj[i];
                    break;
                case UnaryKind::Gelu:
                    for (std::size_t i = 0; i < node.adj.size(); ++i) {
                        const S v = xv[i];
                        const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
                        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
                        dx[i] += node.adj[i] * (cdf + v * pdf);
                    }
                    break;
                case UnaryKind::Tanh:
                    for (std::size_t i = 0; i < node.adj.size(); ++i) {
                        const S y = saved[i];
                        dx[i] += node.adj[i] * (S(1) - y * y);
                    }
                    break;
            }
        });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) { return apply_unary(UnaryKind::Relu, x); }
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) { return apply_unary(UnaryKind::Gelu, x); }
template <typename S>
TensorT<S> tanh_map(const TensorT<S>& x) { return apply_unary(UnaryKind::Tanh, x); }

// ----------------------------------------------------------------------------
// Pooling, reductions, reshaping
// ----------------------------------------------------------------------------

// x: [T,D], mask: length-T validity flags. Mean over valid rows only, so
// appending masked-out rows leaves the output unchanged exactly.
template <typename S>
TensorT<S> masked_mean_pool(const TensorT<S>& x, const std::vector<std::uint8_t>& mask) {
    if (x.rank() != 2) throw DimError("masked_mean_pool: need rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (mask.size() != rows)
        throw DimError("masked_mean_pool: mask length " + std::to_string(mask.size()) +
                       " != rows " + std::to_string(rows));
    std::size_t n_valid = 0;
    for (auto m : mask) n_valid += m ? 1 : 0;
    if (n_valid == 0) throw InputError("masked_mean_pool: no valid frames");
    std::vector<S> out(d, S(0));
    for (std::size_t t = 0; t < rows; ++t) {
        if (!mask[t]) continue;
        const S* row = x.data().data() + t * d;
        for (std::size_t i = 0; i < d; ++i) out[i] += row[i];
    }
    const S inv = S(1) / static_cast<S>(n_valid);
    for (std::size_t i = 0; i < d; ++i) out[i] *= inv;
    return detail::make_op<S>({d}, std::move(out), {x}, [rows, d, mask, inv](NodeT<S>& node) {
        S* dx = detail::adj_of(*node.parents[0]);
        if (!dx) return;
        for (std::size_t t = 0; t < rows; ++t) {
            if (!mask[t]) continue;
            for (std::size_t i = 0; i < d; ++i) dx[t * d + i] += node.adj[i] * inv;
        }
    });
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
    S total = S(0);
    for (S v : x.data()) total += v;
    return detail::make_op<S>({1}, {total}, {x}, [](NodeT<S>& node) {
        if (S* dx = detail::adj_of(*node.parents[0]))
            for (std::size_t i = 0; i < node.parents[0]->data.size(); ++i) dx[i] += node.adj[0];
    });
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, std::size_t c0, std::size_t len) {
    if (x.rank() != 2) throw DimError("slice_cols: need rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (c0 + len > cols)
        throw DimError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + len) +
                       ") out of range for " + shape_str(x.shape()));
    std::vector<S> out(rows * len);
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t i = 0; i < len; ++i) out[t * len + i] = x.data()[t * cols + c0 + i];
    return detail::make_op<S>({rows, len}, std::move(out), {x}, [rows, cols, c0, len](NodeT<S>& node) {
        if (S* dx = detail::adj_of(*node.parents[0]))
            for (std::size_t t = 0; t < rows; ++t)
                for (std::size_t i = 0; i < len; ++i)
                    dx[t * cols + c0 + i] += node.adj[t * len + i];
    });
}

// Nearest-neighbor temporal upsampling: each row emitted `factor` times.
template <typename S>
TensorT<S> repeat_rows(const TensorT<S>& x, std::size_t factor) {
    if (x.rank() != 2) throw DimError("repeat_rows: need rank 2, got " + shape_str(x.shape()));
    if (factor < 1) throw ConfigError("repeat_rows: factor must be >= 1");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<S> out(rows * factor * cols);
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t r = 0; r < factor; ++r)
            for (std::size_t i = 0; i < cols; ++i)
                out[(t * factor + r) * cols + i] = x.data()[t * cols + i];
    return detail::make_op<S>({rows * factor, cols}, std::move(out), {x},
                              [rows, cols, factor](NodeT<S>& node) {
                                  if (S* dx = detail::adj_of(*node.parents[0]))
                                      for (std::size_t t = 0; t < rows; ++t)
                                          for (std::size_t r = 0; r < factor; ++r)
                                              for (std::size_t i = 0; i < cols; ++i)
                                                  dx[t * cols + i] +=
                                                      node.adj[(t * factor + r) * cols + i];
                              });
}

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& x, std::size_t r0, std::size_t len) {
    if (x.rank() != 2) throw DimError("slice_rows: need rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (r0 + len > rows)
        throw DimError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r0 + len) +
                       ") out of range for " + shape_str(x.shape()));
    std::vector<S> out(x.data().begin() + r0 * cols, x.data().begin() + (r0 + len) * cols);
    return detail::make_op<S>({len, cols}, std::move(out), {x}, [r0, cols, len](NodeT<S>& node) {
        if (S* dx = detail::adj_of(*node.parents[0]))
            for (std::size_t i = 0; i < len * cols; ++i) dx[r0 * cols + i] += node.adj[i];
    });
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw DimError("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw DimError("concat_cols: row mismatch, expected " + std::to_string(rows) +
                           " rows, got " + shape_str(p.shape()));
        total += p.dim(1);
    }
    std::vector<S> out(rows * total);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t w = p.dim(1);
        for (std::size_t t = 0; t < rows; ++t)
            for (std::size_t i = 0; i < w; ++i) out[t * total + off + i] = p.data()[t * w + i];
        off += w;
    }
    return detail::make_op<S>({rows, total}, std::move(out), parts,
                              [rows, total, offsets](NodeT<S>& node) {
                                  for (std::size_t pi = 0; pi < node.parents.size(); ++pi) {
                                      S* dp = detail::adj_of(*node.parents[pi]);
                                      if (!dp) continue;
                                      const std::size_t w = node.parents[pi]->shape[1];
                                      const std::size_t off = offsets[pi];
                                      for (std::size_t t = 0; t < rows; ++t)
                                          for (std::size_t i = 0; i < w; ++i)
                                              dp[t * w + i] += node.adj[t * total + off + i];
                                  }
                              });
}

// Reinterprets the buffer with a new shape of equal size.
template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                       " changes element count");
    return detail::make_op<S>(std::move(shape), x.data(), {x}, [](NodeT<S>& node) {
        if (S* dx = detail::adj_of(*node.parents[0]))
            for (std::size_t i = 0; i < node.adj.size(); ++i) dx[i] += node.adj[i];
    });
}

// Stacks N same-shape tensors along a new leading dimension.
template <typename S>
TensorT<S> stack_first(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw DimError("stack_first: no inputs");
    const Shape inner = parts[0].shape();
    const std::size_t step = parts[0].numel();
    for (const auto& p : parts) check_same_shape(p, parts[0], "stack_first");
    Shape shape;
    shape.push_back(parts.size());
    shape.insert(shape.end(), inner.begin(), inner.end());
    std::vector<S> out;
    out.reserve(parts.size() * step);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::make_op<S>(std::move(shape), std::move(out), parts, [step](NodeT<S>& node) {
        for (std::size_t pi = 0; pi < node.parents.size(); ++pi)
            if (S* dp = detail::adj_of(*node.parents[pi]))
                for (std::size_t i = 0; i < step; ++i) dp[i] += node.adj[pi * step + i];
    });
}

// out = sum_k w[k] * entries[k]. Entries are typically frozen bank tensors,
// so gradient flows to the weight vector (and to entries when they train).
template <typename S>
TensorT<S> weighted_sum(const std::vector<TensorT<S>>& entries, const TensorT<S>& w) {
    if (entries.empty()) throw DimError("weighted_sum: no entries");
    if (w.rank() != 1 || w.dim(0) != entries.size())
        throw DimError("weighted_sum: weight length " + shape_str(w.shape()) + " vs " +
                       std::to_string(entries.size()) + " entries");
    const Shape shape = entries[0].shape();
    for (const auto& e : entries) check_same_shape(e, entries[0], "weighted_sum");
    std::vector<S> out(entries[0].numel(), S(0));
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const S wk = w.data()[k];
        const auto& ed = entries[k].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * ed[i];
    }
    std::vector<TensorT<S>> parents = entries;
    parents.push_back(w);
    const std::size_t n_entries = entries.size();
    return detail::make_op<S>(shape, std::move(out), std::move(parents),
                              [n_entries](NodeT<S>& node) {
                                  auto& wnode = *node.parents[n_entries];
                                  S* dw = detail::adj_of(wnode);
                                  for (std::size_t k = 0; k < n_entries; ++k) {
                                      const auto& ed = node.parents[k]->data;
                                      if (dw) {
                                          S acc = S(0);
                                          for (std::size_t i = 0; i < node.adj.size(); ++i)
                                              acc += node.adj[i] * ed[i];
                                          dw[k] += acc;
                                      }
                                      if (S* de = detail::adj_of(*node.parents[k])) {
                                          const S wk = wnode.data[k];
                                          for (std::size_t i = 0; i < node.adj.size(); ++i)
                                              de[i] += wk * node.adj[i];
                                      }
                                  }
                              });
}

// Mean negative picked log-probability: -(1/N) sum_i logp[i, labels[i]].
template <typename S>
TensorT<S> gather_nll(const TensorT<S>& logp, const std::vector<std::size_t>& labels) {
    if (logp.rank() != 2) throw DimError("gather_nll: need rank 2, got " + shape_str(logp.shape()));
    const std::size_t n = logp.dim(0), k = logp.dim(1);
    if (labels.size() != n)
        throw DimError("gather_nll: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(n) + " rows");
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i] >= k)
            throw InputError("gather_nll: label " + std::to_string(labels[i]) +
                             " out of range [0," + std::to_string(k) + ") at row " +
                             std::to_string(i));
    S total = S(0);
    for (std::size_t i = 0; i < n; ++i) total -= logp.data()[i * k + labels[i]];
    total /= static_cast<S>(n);
    return detail::make_op<S>({1}, {total}, {logp}, [n, k, labels](NodeT<S>& node) {
        if (S* dl = detail::adj_of(*node.parents[0])) {
            const S c = node.adj[0] / static_cast<S>(n);
            for (std::size_t i = 0; i < n; ++i) dl[i * k + labels[i]] -= c;
        }
    });
}

// ----------------------------------------------------------------------------
// Reverse pass
// ----------------------------------------------------------------------------

// Accumulates gradients into every requires_grad tensor reachable from loss.
// Gradient accumulation is additive: calling twice doubles leaf gradients.
template <typename S>
void backward(const TensorT<S>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;  // detached from every parameter

    // Post-order DFS over parents; order respects data dependencies.
    std::vector<NodeT<S>*> order;
    std::unordered_set<NodeT<S>*> seen;
    std::vector<std::pair<NodeT<S>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT<S>* parent = node->parents[next].get();
            ++next;
            if (parent->requires_grad && seen.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (NodeT<S>* n : order) n->adj.assign(n->data.size(), S(0));
    loss.node()->adj[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    for (NodeT<S>* n : order) {
        for (std::size_t i = 0; i < n->adj.size(); ++i) n->grad[i] += n->adj[i];
        n->adj.clear();
        n->adj.shrink_to_fit();
    }
}

}  // namespace care

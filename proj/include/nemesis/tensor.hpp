#pragma once

// Dense tensors (rank 0..2) with reverse-mode automatic differentiation.
//
// Every op records its parents on the implicit tape: nodes carry a strictly
// increasing sequence number, so creation order is a topological order.
// backward() walks reachable nodes in reverse sequence order exactly once,
// which makes gradient accumulation deterministic and repeatable bit-for-bit.
// Ops whose inputs do not require gradients skip all recording, so forward
// evaluation (e.g. inside finite differences) carries no tape overhead.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nemesis/errors.hpp"

namespace nemesis {

using Shape = std::vector<std::size_t>;

namespace detail {

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

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily by backward()
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t numel() const { return values.size(); }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// c[m x n] += a[m x k] * b[k x n]; caller zeroes c. Fixed i-k-j order.
inline void matmul_acc(const double* a, const double* b, double* c,
                       std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] += a[k x m]^T * b[k x n]
inline void matmul_at_b_acc(const double* a, const double* b, double* c,
                            std::size_t k, std::size_t m, std::size_t n) {
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * m;
        const double* brow = b + kk * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x k] += a[m x n] * b[k x n]^T
inline void matmul_a_bt_acc(const double* a, const double* b, double* c,
                            std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double* brow = b + j * n;
            double acc = 0.0;
            for (std::size_t kk = 0; kk < n; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw ShapeError("from: " + detail::shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
        for (std::size_t e : shape)
            if (e == 0) throw ShapeError("from: zero extent in " + detail::shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::move(data);
        n->requires_grad = requires_grad;
        n->seq = detail::next_seq();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(detail::shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(detail::shape_numel(shape), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->values.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    std::size_t rows() const {
        if (rank() != 2) throw ShapeError("rows: tensor is not rank-2");
        return node_->shape[0];
    }
    std::size_t cols() const {
        if (rank() != 2) throw ShapeError("cols: tensor is not rank-2");
        return node_->shape[1];
    }

    const std::vector<double>& values() const { return node_->values; }
    double value(std::size_t i) const { return node_->values[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }
    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar");
        return node_->values[0];
    }

    // Gradient after backward(); zeros when the leaf was unreachable.
    std::vector<double> grad() const {
        if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
        return node_->grad;
    }

    // Fresh leaf with the same values. Used by finite differences and
    // by checkpoint/optimizer plumbing; never shares the node.
    Tensor detached(bool requires_grad = false) const {
        return from(node_->shape, node_->values, requires_grad);
    }

    // In-place value mutation for leaves (optimizer updates, fd probes).
    std::vector<double>& leaf_values() {
        if (node_->backward_fn) throw Error("leaf_values: tensor is not a leaf");
        return node_->values;
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    template <typename BwFn>
    friend Tensor make_op(Shape, std::vector<double>, const std::vector<Tensor>&, BwFn&&, const char*);
};

// Builds an op result node. Records parents + backward only when some input
// needs gradients (so no-grad forwards skip the std::function allocation);
// verifies the finiteness invariant on the output.
template <typename BwFn>
inline Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                      BwFn&& backward_fn, const char* op_name) {
    for (double v : values)
        if (!std::isfinite(v)) throw NumericError(std::string(op_name) + ": non-finite output value");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    n->seq = detail::next_seq();
    if (rg) {
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::forward<BwFn>(backward_fn);
    }
    return Tensor(std::move(n));
}

namespace detail {

inline void ensure_grad(Node& n) {
    if (n.grad.size() != n.values.size()) n.grad.assign(n.values.size(), 0.0);
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw ShapeError("matmul: inner extents disagree, " + detail::shape_str(a.shape()) +
                         " x " + detail::shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    detail::matmul_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto bw = [m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        detail::ensure_grad(pa);
        detail::ensure_grad(pb);
        // dA = dC * B^T ; dB = A^T * dC
        detail::matmul_a_bt_acc(self.grad.data(), pb.values.data(), pa.grad.data(), m, n, k);
        detail::matmul_at_b_acc(pa.values.data(), self.grad.data(), pb.grad.data(), m, k, n);
    };
    return make_op({m, n}, std::move(out), {a, b}, std::move(bw), "matmul");
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    auto bw = [m, n](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j * m + i];
    };
    return make_op({n, m}, std::move(out), {a}, std::move(bw), "transpose");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto bw = [](detail::Node& self) {
        for (int s = 0; s < 2; ++s) {
            detail::Node& p = *self.parents[s];
            detail::ensure_grad(p);
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    };
    return make_op(a.shape(), std::move(out), {a, b}, std::move(bw), "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto bw = [](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        detail::ensure_grad(pa);
        detail::ensure_grad(pb);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa.grad[i] += self.grad[i];
            pb.grad[i] -= self.grad[i];
        }
    };
    return make_op(a.shape(), std::move(out), {a, b}, std::move(bw), "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto bw = [](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        detail::ensure_grad(pa);
        detail::ensure_grad(pb);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa.grad[i] += self.grad[i] * pb.values[i];
            pb.grad[i] += self.grad[i] * pa.values[i];
        }
    };
    return make_op(a.shape(), std::move(out), {a, b}, std::move(bw), "mul");
}

// y = k*x + c, elementwise with double constants.
inline Tensor affine(const Tensor& a, double k, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * a.values()[i] + c;
    auto bw = [k](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += k * self.grad[i];
    };
    return make_op(a.shape(), std::move(out), {a}, std::move(bw), "affine");
}

inline Tensor scale(const Tensor& a, double k) { return affine(a, k, 0.0); }

// Row-wise bias: a[n x d] + b[d].
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "add_rowvec");
    if (b.rank() != 1 || b.shape()[0] != a.cols())
        throw ShapeError("add_rowvec: " + detail::shape_str(a.shape()) + " + " + detail::shape_str(b.shape()));
    const std::size_t n = a.rows(), d = a.cols();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.values()[i * d + j] + b.values()[j];
    auto bw = [n, d](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        detail::ensure_grad(pa);
        detail::ensure_grad(pb);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                pa.grad[i * d + j] += self.grad[i * d + j];
                pb.grad[j] += self.grad[i * d + j];
            }
    };
    return make_op(a.shape(), std::move(out), {a, b}, std::move(bw), "add_rowvec");
}

// y = s * a where s is a scalar tensor (learnable gate paths).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("scale_by: scale must be scalar");
    const double sv = s.value(0);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * a.values()[i];
    auto bw = [sv](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& ps = *self.parents[1];
        detail::ensure_grad(pa);
        detail::ensure_grad(ps);
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa.grad[i] += sv * self.grad[i];
            acc += pa.values[i] * self.grad[i];
        }
        ps.grad[0] += acc;
    };
    return make_op(a.shape(), std::move(out), {a, s}, std::move(bw), "scale_by");
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.values()[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    auto bw = [](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.values[i];
            p.grad[i] += self.grad[i] * y * (1.0 - y);
        }
    };
    return make_op(a.shape(), std::move(out), {a}, std::move(bw), "sigmoid");
}

// Exact GELU: x * Phi(x) with Phi from erf.
inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.values()[i];
        out[i] = x * 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    }
    auto bw = [inv_sqrt2, inv_sqrt2pi](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = p.values[i];
            const double phi_cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double phi_pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            p.grad[i] += self.grad[i] * (phi_cdf + x * phi_pdf);
        }
    };
    return make_op(a.shape(), std::move(out), {a}, std::move(bw), "gelu");
}

// Row-stabilized softmax over the last dimension of a rank-2 tensor.
inline Tensor softmax_rows(const Tensor& a) {
    detail::require_rank2(a, "softmax_rows");
    for (double v : a.values())
        if (!std::isfinite(v)) throw NumericError("softmax_rows: non-finite input");
    const std::size_t n = a.rows(), d = a.cols();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = a.values().data() + i * d;
        double mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double e = std::exp(row[j] - mx);
            out[i * d + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= sum;
    }
    auto bw = [n, d](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < n; ++i) {
            const double* y = self.values.data() + i * d;
            const double* dy = self.grad.data() + i * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
            for (std::size_t j = 0; j < d; ++j) p.grad[i * d + j] += y[j] * (dy[j] - dot);
        }
    };
    return make_op(a.shape(), std::move(out), {a}, std::move(bw), "softmax_rows");
}

// Per-row layer normalization with affine: gamma * (x - mu)/sqrt(var + eps) + beta.
inline Tensor layernorm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    detail::require_rank2(a, "layernorm");
    const std::size_t n = a.rows(), d = a.cols();
    if (gamma.rank() != 1 || gamma.shape()[0] != d || beta.rank() != 1 || beta.shape()[0] != d)
        throw ShapeError("layernorm: gamma/beta must be [" + std::to_string(d) + "]");
    if (eps < 0.0) throw ParamError("layernorm: eps must be >= 0");
    std::vector<double> out(n * d);
    std::vector<double> inv_std(n), mean(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = a.values().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j)
            out[i * d + j] = gamma.values()[j] * (row[j] - mu) * is + beta.values()[j];
    }
    auto bw = [n, d, mean = std::move(mean), inv_std = std::move(inv_std)](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pg = *self.parents[1];
        detail::Node& pb = *self.parents[2];
        detail::ensure_grad(pa);
        detail::ensure_grad(pg);
        detail::ensure_grad(pb);
        const double dd = static_cast<double>(d);
        for (std::size_t i = 0; i < n; ++i) {
            const double* x = pa.values.data() + i * d;
            const double* dy = self.grad.data() + i * d;
            const double mu = mean[i], is = inv_std[i];
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double xhat = (x[j] - mu) * is;
                const double dxhat = dy[j] * pg.values[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                pg.grad[j] += dy[j] * xhat;
                pb.grad[j] += dy[j];
            }
            for (std::size_t j = 0; j < d; ++j) {
                const double xhat = (x[j] - mu) * is;
                const double dxhat = dy[j] * pg.values[j];
                pa.grad[i * d + j] += is * (dxhat - sum_dxhat / dd - xhat * sum_dxhat_xhat / dd);
            }
        }
    };
    return make_op(a.shape(), std::move(out), {a, gamma, beta}, std::move(bw), "layernorm");
}

// Row gather; duplicate indices are allowed and accumulate on backward.
inline Tensor take_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    detail::require_rank2(a, "take_rows");
    const std::size_t n = a.rows(), d = a.cols();
    for (std::size_t r : idx)
        if (r >= n) throw ShapeError("take_rows: index " + std::to_string(r) + " out of " + std::to_string(n));
    std::vector<double> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.values()[idx[i] * d + j];
    auto bw = [idx, d](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) p.grad[idx[i] * d + j] += self.grad[i * d + j];
    };
    return make_op({idx.size(), d}, std::move(out), {a}, std::move(bw), "take_rows");
}

// Contiguous column slice [c0, c0+width).
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t width) {
    detail::require_rank2(a, "slice_cols");
    const std::size_t n = a.rows(), d = a.cols();
    if (c0 + width > d || width == 0) throw ShapeError("slice_cols: bad range");
    std::vector<double> out(n * width);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < width; ++j) out[i * width + j] = a.values()[i * d + c0 + j];
    auto bw = [n, d, c0, width](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < width; ++j) p.grad[i * d + c0 + j] += self.grad[i * width + j];
    };
    return make_op({n, width}, std::move(out), {a}, std::move(bw), "slice_cols");
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    const std::size_t d = parts[0].cols();
    std::size_t total = 0;
    for (const Tensor& t : parts) {
        detail::require_rank2(t, "concat_rows");
        if (t.cols() != d) throw ShapeError("concat_rows: column mismatch");
        total += t.rows();
    }
    std::vector<double> out;
    out.reserve(total * d);
    std::vector<std::size_t> row_counts;
    for (const Tensor& t : parts) {
        out.insert(out.end(), t.values().begin(), t.values().end());
        row_counts.push_back(t.rows());
    }
    auto bw = [row_counts, d](detail::Node& self) {
        std::size_t offset = 0;
        for (std::size_t s = 0; s < row_counts.size(); ++s) {
            detail::Node& p = *self.parents[s];
            detail::ensure_grad(p);
            const std::size_t count = row_counts[s] * d;
            for (std::size_t i = 0; i < count; ++i) p.grad[i] += self.grad[offset + i];
            offset += count;
        }
    };
    return make_op({total, d}, std::move(out), parts, std::move(bw), "concat_rows");
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) { return concat_rows(std::vector<Tensor>{a, b}); }

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    const std::size_t n = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& t : parts) {
        detail::require_rank2(t, "concat_cols");
        if (t.rows() != n) throw ShapeError("concat_cols: row mismatch");
        total += t.cols();
    }
    std::vector<double> out(n * total);
    std::vector<std::size_t> col_counts;
    std::size_t c0 = 0;
    for (const Tensor& t : parts) {
        const std::size_t w = t.cols();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * total + c0 + j] = t.values()[i * w + j];
        col_counts.push_back(w);
        c0 += w;
    }
    auto bw = [col_counts, n, total](detail::Node& self) {
        std::size_t base = 0;
        for (std::size_t s = 0; s < col_counts.size(); ++s) {
            detail::Node& p = *self.parents[s];
            detail::ensure_grad(p);
            const std::size_t w = col_counts[s];
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j) p.grad[i * w + j] += self.grad[i * total + base + j];
            base += w;
        }
    };
    return make_op({n, total}, std::move(out), parts, std::move(bw), "concat_cols");
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) { return concat_cols(std::vector<Tensor>{a, b}); }

// Broadcast a [d] (or [1 x d]) vector to n identical rows.
inline Tensor repeat_row(const Tensor& a, std::size_t n) {
    std::size_t d = 0;
    if (a.rank() == 1) d = a.shape()[0];
    else if (a.rank() == 2 && a.rows() == 1) d = a.cols();
    else throw ShapeError("repeat_row: expected [d] or [1 x d]");
    if (n == 0) throw ShapeError("repeat_row: n must be positive");
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.values()[j];
    auto bw = [n, d](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) p.grad[j] += self.grad[i * d + j];
    };
    return make_op({n, d}, std::move(out), {a}, std::move(bw), "repeat_row");
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto bw = [](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        detail::ensure_grad(p);
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
    };
    return make_op({1}, {s}, {a}, std::move(bw), "sum_all");
}

// ---------------------------------------------------------------------------
// Backward pass

// Reverse-mode sweep from a scalar loss. Reachable nodes are ordered by
// their creation sequence (a topological order by construction), gradients
// zeroed, then pulled backward through each node exactly once.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw Error("backward: loss must be scalar");
    auto root = loss.node();
    if (!root->requires_grad)
        throw Error("backward: loss does not depend on any gradient-tracked leaf");

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });

    for (detail::Node* n : order) n->grad.assign(n->values.size(), 0.0);
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_param = 0;   // index into the params list
    std::size_t worst_coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central differences (f(t+h) - f(t-h)) / 2h per coordinate against
// backward(). Error is |ad - fd| / max(1, |ad|, |fd|). `f` must be a
// deterministic function of the parameter values. fd probes run with
// gradient recording off; `threads` splits coordinates across workers
// (each owns a private parameter copy, so results are order-independent).
inline GradCheckReport finite_diff_check_report(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& params, double step, unsigned threads = 1) {
    if (step <= 0.0) throw ParamError("finite_diff_check: step must be > 0");
    if (params.empty()) throw ParamError("finite_diff_check: no parameters");

    // Analytic pass.
    std::vector<Tensor> tracked;
    tracked.reserve(params.size());
    for (const Tensor& p : params) tracked.push_back(p.detached(true));
    Tensor loss = f(tracked);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(tracked.size());
    for (const Tensor& p : tracked) analytic.push_back(p.grad());

    // Flat coordinate table for the numeric sweep.
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t ci = 0; ci < params[pi].numel(); ++ci) coords.emplace_back(pi, ci);

    std::vector<double> numeric(coords.size(), 0.0);
    auto worker = [&](std::size_t begin, std::size_t end) {
        std::vector<Tensor> probe;
        probe.reserve(params.size());
        for (const Tensor& p : params) probe.push_back(p.detached(false));
        for (std::size_t k = begin; k < end; ++k) {
            const auto [pi, ci] = coords[k];
            double& slot = probe[pi].leaf_values()[ci];
            const double saved = slot;
            slot = saved + step;
            const double fp = f(probe).item();
            slot = saved - step;
            const double fm = f(probe).item();
            slot = saved;
            numeric[k] = (fp - fm) / (2.0 * step);
        }
    };
    if (threads <= 1 || coords.size() < 2 * threads) {
        worker(0, coords.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (coords.size() + threads - 1) / threads;
        for (unsigned t = 0; t < threads; ++t) {
            const std::size_t b = t * chunk, e = std::min(coords.size(), b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }

    GradCheckReport report;
    for (std::size_t k = 0; k < coords.size(); ++k) {
        const auto [pi, ci] = coords[k];
        const double ad = analytic[pi][ci];
        const double fd = numeric[k];
        const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_param = pi;
            report.worst_coord = ci;
            report.analytic = ad;
            report.numeric = fd;
        }
    }
    return report;
}

inline double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                const std::vector<Tensor>& params, double step,
                                unsigned threads = 1) {
    return finite_diff_check_report(f, params, step, threads).max_rel_err;
}

}  // namespace nemesis

#pragma once

// Reverse-mode autodiff on dense row-major tensors, templated on the scalar
// type: float for production runs, double for verification (gradient checks,
// rotation recovery). Operations execute eagerly; when a Tape is active and
// an input participates in differentiation, the op records a backward closure.
// Gradients flow only inside an explicit tape scope.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hlm/common.hpp"

namespace hlm {

namespace detail {

// C[m x n] += A[m x k] * B[k x n]. i-k-j order: the inner loop updates a row
// of C with no reduction dependency, so it vectorizes without reassociation.
template <typename S>
void gemm_nn(int m, int k, int n, const S* a, const S* b, S* c) {
    for (int i = 0; i < m; ++i) {
        const S* ai = a + static_cast<std::size_t>(i) * k;
        S* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            S aip = ai[p];
            if (aip == S(0)) continue;
            const S* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n].
template <typename S>
void gemm_tn(int m, int k, int n, const S* a, const S* b, S* c) {
    for (int p = 0; p < k; ++p) {
        const S* ap = a + static_cast<std::size_t>(p) * m;
        const S* bp = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            S api = ap[i];
            if (api == S(0)) continue;
            S* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T. B is transposed into scratch once
// (O(n*k) copies against O(m*n*k) arithmetic) so the kernel stays in the
// vectorizable i-k-j form.
template <typename S>
void gemm_nt(int m, int k, int n, const S* a, const S* b, S* c) {
    std::vector<S> bt(static_cast<std::size_t>(k) * n);
    for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p)
            bt[static_cast<std::size_t>(p) * n + j] =
                b[static_cast<std::size_t>(j) * k + p];
    gemm_nn(m, k, n, a, bt.data(), c);
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

}  // namespace detail

template <typename S>
struct TensorNode {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until a backward pass touches this node
    bool requires_grad = false;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape) {
        return Tensor(std::move(shape), S(0));
    }
    static Tensor full(std::vector<int> shape, S value) {
        return Tensor(std::move(shape), value);
    }
    static Tensor scalar(S value) { return Tensor({1}, value); }
    static Tensor from(std::vector<S> data, std::vector<int> shape) {
        Tensor t(std::move(shape), S(0));
        if (data.size() != t.numel())
            throw dimension_error("tensor data size does not match shape " +
                                  detail::shape_str(t.shape()));
        t.node_->data = std::move(data);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return check()->shape; }
    int dim(int i) const { return check()->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(check()->shape.size()); }
    std::size_t numel() const { return check()->data.size(); }

    S* data() { return check()->data.data(); }
    const S* data() const { return check()->data.data(); }
    std::vector<S>& vec() { return check()->data; }
    const std::vector<S>& vec() const { return check()->data; }

    S item() const {
        if (numel() != 1) throw contract_error("item() on non-scalar tensor");
        return check()->data[0];
    }

    bool requires_grad() const { return check()->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        check()->requires_grad = v;
        return *this;
    }

    /// Gradient buffer; empty until backward touches this node.
    const std::vector<S>& grad() const { return check()->grad; }
    void zero_grad() { check()->grad.clear(); }

    /// Low-level node access for fused ops that register custom backward
    /// closures. Not part of the everyday API.
    const std::shared_ptr<TensorNode<S>>& node() const {
        check();
        return node_;
    }

private:
    Tensor(std::vector<int> shape, S fill) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw dimension_error("negative tensor extent");
            n *= static_cast<std::size_t>(d);
        }
        node_ = std::make_shared<TensorNode<S>>();
        node_->shape = std::move(shape);
        node_->data.assign(n, fill);
    }

    TensorNode<S>* check() const {
        if (!node_) throw contract_error("operation on an undefined tensor");
        return node_.get();
    }

    std::shared_ptr<TensorNode<S>> node_;
};

// ---------------------------------------------------------------------------
// Tape: records backward closures in execution order. Exactly one tape may
// be active per thread; activation is scoped so gradient tracking cannot
// leak out of a training step.
// ---------------------------------------------------------------------------

template <typename S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    class Scope {
    public:
        explicit Scope(Tape& t) : tape_(&t) {
            if (active_ != nullptr)
                throw contract_error("a tape is already active on this thread");
            active_ = tape_;
        }
        ~Scope() { active_ = nullptr; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* tape_;
    };

    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
    std::size_t size() const { return ops_.size(); }
    void clear() {
        ops_.clear();
        consumed_ = false;
    }

    /// Seeds d(loss)/d(loss) = 1 and runs recorded closures in reverse.
    /// The loss must be a scalar produced under this tape. Each recording
    /// supports exactly one backward pass: intermediate nodes keep their
    /// gradients, so a second pass would double-count.
    void backward(const Tensor<S>& loss) {
        if (consumed_)
            throw contract_error("tape already consumed by a backward pass");
        if (loss.numel() != 1)
            throw contract_error("backward target must be a scalar");
        if (!loss.requires_grad())
            throw contract_error("backward target was not recorded for gradients");
        consumed_ = true;
        auto n = loss.node();
        n->ensure_grad();
        n->grad[0] += S(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    static thread_local Tape* active_;
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
};

template <typename S>
thread_local Tape<S>* Tape<S>::active_ = nullptr;

namespace detail {

template <typename S>
bool track(std::initializer_list<const Tensor<S>*> inputs) {
    if (Tape<S>::active() == nullptr) return false;
    for (const Tensor<S>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename S>
void record(std::function<void()> fn) {
    Tape<S>::active()->record(std::move(fn));
}

// Accumulates src into node's grad buffer if that node participates.
template <typename S>
void add_grad(const std::shared_ptr<TensorNode<S>>& n, const S* src) {
    if (!n->requires_grad) return;
    n->ensure_grad();
    S* g = n->grad.data();
    std::size_t m = n->numel();
    for (std::size_t i = 0; i < m; ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw dimension_error("matmul shapes " + detail::shape_str(a.shape()) +
                              " x " + detail::shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    detail::gemm_nn(m, k, n, a.data(), b.data(), out.data());
    if (detail::track<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::record<S>([an, bn, on, m, k, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(m, n, k, on->grad.data(), bn->data.data(),
                                an->grad.data());
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(k, m, n, an->data.data(), on->grad.data(),
                                bn->grad.data());
            }
        });
    }
    return out;
}

/// y = x * W^T with W stored [out_dim x in_dim]; x may be [T x in] or [in].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
    if (w.rank() != 2)
        throw dimension_error("linear weight must be rank 2");
    const bool vec_in = (x.rank() == 1);
    int t = vec_in ? 1 : x.dim(0);
    int in = vec_in ? x.dim(0) : x.dim(1);
    int out = w.dim(0);
    if ((vec_in ? x.dim(0) : x.dim(1)) != w.dim(1))
        throw dimension_error("linear shapes " + detail::shape_str(x.shape()) +
                              " with weight " + detail::shape_str(w.shape()));
    Tensor<S> y = vec_in ? Tensor<S>::zeros({out}) : Tensor<S>::zeros({t, out});
    detail::gemm_nt(t, in, out, x.data(), w.data(), y.data());
    if (detail::track<S>({&x, &w})) {
        y.set_requires_grad(true);
        auto xn = x.node(), wn = w.node(), yn = y.node();
        detail::record<S>([xn, wn, yn, t, in, out] {
            if (yn->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dX += dY * W
                detail::gemm_nn(t, out, in, yn->grad.data(), wn->data.data(),
                                xn->grad.data());
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                // dW += dY^T * X
                detail::gemm_tn(out, t, in, yn->grad.data(), xn->data.data(),
                                wn->grad.data());
            }
        });
    }
    return y;
}

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> elementwise_binary(const Tensor<S>& a, const Tensor<S>& b,
                             const char* name, Fwd fwd, Bwd bwd) {
    if (a.shape() != b.shape())
        throw dimension_error(std::string(name) + " shape mismatch " +
                              shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    std::size_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    if (track<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        record<S>([an, bn, on, n, bwd] {
            if (on->grad.empty()) return;
            const S* g = on->grad.data();
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                auto [da, db] = bwd(an->data[i], bn->data[i], g[i]);
                if (an->requires_grad) an->grad[i] += da;
                if (bn->requires_grad) bn->grad[i] += db;
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary(
        a, b, "add", [](S x, S y) { return x + y; },
        [](S, S, S g) { return std::pair<S, S>(g, g); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary(
        a, b, "sub", [](S x, S y) { return x - y; },
        [](S, S, S g) { return std::pair<S, S>(g, -g); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::elementwise_binary(
        a, b, "mul", [](S x, S y) { return x * y; },
        [](S x, S y, S g) { return std::pair<S, S>(g * y, g * x); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (detail::track<S>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        detail::record<S>([an, on, n, c] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        S v = x.data()[i];
        out.data()[i] = v / (S(1) + std::exp(-v));
    }
    if (detail::track<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        detail::record<S>([xn, on, n] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                S v = xn->data[i];
                S sig = S(1) / (S(1) + std::exp(-v));
                xn->grad[i] += on->grad[i] * sig * (S(1) + v * (S(1) - sig));
            }
        });
    }
    return out;
}

/// Row-wise softmax over the last axis of a rank-2 tensor, max-shifted.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
    if (x.rank() != 2) throw dimension_error("softmax_rows expects rank 2");
    int m = x.dim(0), n = x.dim(1);
    if (n == 0) throw dimension_error("softmax_rows over empty rows");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int i = 0; i < m; ++i) {
        const S* xi = x.data() + static_cast<std::size_t>(i) * n;
        S* oi = out.data() + static_cast<std::size_t>(i) * n;
        S mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        S z = S(0);
        for (int j = 0; j < n; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            z += oi[j];
        }
        for (int j = 0; j < n; ++j) oi[j] /= z;
    }
    if (detail::track<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        detail::record<S>([xn, on, m, n] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const S* y = on->data.data() + static_cast<std::size_t>(i) * n;
                const S* g = on->grad.data() + static_cast<std::size_t>(i) * n;
                S* dx = xn->grad.data() + static_cast<std::size_t>(i) * n;
                S dot = S(0);
                for (int j = 0; j < n; ++j) dot += g[j] * y[j];
                for (int j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

/// RMS normalization with learnable gain: y_i = x_i / rms(x) * gain_i,
/// rms(x) = sqrt(mean(x^2) + eps). Applied per row for rank-2 input.
template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain, S eps = S(1e-6)) {
    const bool vec_in = (x.rank() == 1);
    if (!vec_in && x.rank() != 2)
        throw dimension_error("rms_norm expects rank 1 or 2");
    int rows = vec_in ? 1 : x.dim(0);
    int d = vec_in ? x.dim(0) : x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != d)
        throw dimension_error("rms_norm gain shape " +
                              detail::shape_str(gain.shape()) +
                              " does not match feature dim");
    if (d == 0) throw dimension_error("rms_norm over empty feature dim");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int r = 0; r < rows; ++r) {
        const S* xr = x.data() + static_cast<std::size_t>(r) * d;
        S* orow = out.data() + static_cast<std::size_t>(r) * d;
        S ms = S(0);
        for (int i = 0; i < d; ++i) ms += xr[i] * xr[i];
        S inv = S(1) / std::sqrt(ms / S(d) + eps);
        for (int i = 0; i < d; ++i) orow[i] = xr[i] * inv * gain.data()[i];
    }
    if (detail::track<S>({&x, &gain})) {
        out.set_requires_grad(true);
        auto xn = x.node(), gn = gain.node(), on = out.node();
        detail::record<S>([xn, gn, on, rows, d, eps] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const S* xr = xn->data.data() + static_cast<std::size_t>(r) * d;
                const S* g = on->grad.data() + static_cast<std::size_t>(r) * d;
                S ms = S(0);
                for (int i = 0; i < d; ++i) ms += xr[i] * xr[i];
                S inv = S(1) / std::sqrt(ms / S(d) + eps);
                if (gn->requires_grad)
                    for (int i = 0; i < d; ++i)
                        gn->grad[i] += g[i] * xr[i] * inv;
                if (xn->requires_grad) {
                    S* dx = xn->grad.data() + static_cast<std::size_t>(r) * d;
                    S acc = S(0);  // sum_i g_i * gain_i * x_i
                    for (int i = 0; i < d; ++i)
                        acc += g[i] * gn->data[i] * xr[i];
                    S k = inv * inv * inv * acc / S(d);
                    for (int i = 0; i < d; ++i)
                        dx[i] += g[i] * gn->data[i] * inv - xr[i] * k;
                }
            }
        });
    }
    return out;
}

/// Unit-normalizes a vector. A norm below the guard signals an untrained or
/// broken embedding head rather than a representable direction.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x, S guard = S(1e-12)) {
    if (x.rank() != 1) throw dimension_error("l2_normalize expects rank 1");
    int d = x.dim(0);
    S ss = S(0);
    for (int i = 0; i < d; ++i) ss += x.data()[i] * x.data()[i];
    S norm = std::sqrt(ss);
    if (!(norm > guard))
        throw degenerate_embedding_error(
            "embedding norm " + std::to_string(static_cast<double>(norm)) +
            " below guard");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int i = 0; i < d; ++i) out.data()[i] = x.data()[i] / norm;
    if (detail::track<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        detail::record<S>([xn, on, d, norm] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            const S* y = on->data.data();
            const S* g = on->grad.data();
            S dot = S(0);
            for (int i = 0; i < d; ++i) dot += g[i] * y[i];
            for (int i = 0; i < d; ++i)
                xn->grad[i] += (g[i] - y[i] * dot) / norm;
        });
    }
    return out;
}

/// Gathers rows of an embedding table: out[t] = table[tokens[t]].
template <typename S>
Tensor<S> embedding_rows(const Tensor<S>& table, const std::vector<int>& tokens) {
    if (table.rank() != 2) throw dimension_error("embedding table must be rank 2");
    int v = table.dim(0), h = table.dim(1);
    int t = static_cast<int>(tokens.size());
    if (t == 0) throw dimension_error("empty token sequence");
    Tensor<S> out = Tensor<S>::zeros({t, h});
    for (int i = 0; i < t; ++i) {
        int id = tokens[static_cast<std::size_t>(i)];
        if (id < 0 || id >= v)
            throw data_error("token id " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(v));
        std::copy_n(table.data() + static_cast<std::size_t>(id) * h, h,
                    out.data() + static_cast<std::size_t>(i) * h);
    }
    if (detail::track<S>({&table})) {
        out.set_requires_grad(true);
        auto tn = table.node(), on = out.node();
        detail::record<S>([tn, on, tokens, h] {
            if (on->grad.empty() || !tn->requires_grad) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < tokens.size(); ++i) {
                const S* g = on->grad.data() + i * h;
                S* dst = tn->grad.data() +
                         static_cast<std::size_t>(tokens[i]) * h;
                for (int j = 0; j < h; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

namespace detail {

// Rotates pairs (x[2i], x[2i+1]) inside each head by angle
// sign * pos * base^(-2i/head_dim).
template <typename S>
void rope_apply(const S* src, S* dst, int t, int width, int head_dim,
                double base, double sign) {
    int heads = width / head_dim;
    int half = head_dim / 2;
    for (int pos = 0; pos < t; ++pos) {
        const S* in = src + static_cast<std::size_t>(pos) * width;
        S* out = dst + static_cast<std::size_t>(pos) * width;
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < half; ++i) {
                double theta =
                    sign * pos *
                    std::pow(base, -2.0 * i / static_cast<double>(head_dim));
                S c = static_cast<S>(std::cos(theta));
                S s = static_cast<S>(std::sin(theta));
                int off = h * head_dim + 2 * i;
                S x0 = in[off], x1 = in[off + 1];
                out[off] = c * x0 - s * x1;
                out[off + 1] = s * x0 + c * x1;
            }
        }
    }
}

}  // namespace detail

/// Rotary position encoding over [T x heads*head_dim]; row index is the
/// position. Inverse rotation in backward (rotations are orthogonal).
template <typename S>
Tensor<S> rope(const Tensor<S>& x, int head_dim, double base = 10000.0) {
    if (x.rank() != 2) throw dimension_error("rope expects rank 2");
    int t = x.dim(0), width = x.dim(1);
    if (head_dim <= 0 || head_dim % 2 != 0 || width % head_dim != 0)
        throw dimension_error("rope head_dim must be even and divide width");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    detail::rope_apply(x.data(), out.data(), t, width, head_dim, base, 1.0);
    if (detail::track<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        detail::record<S>([xn, on, t, width, head_dim, base] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            std::vector<S> tmp(on->grad.size());
            detail::rope_apply(on->grad.data(), tmp.data(), t, width, head_dim,
                               base, -1.0);
            for (std::size_t i = 0; i < tmp.size(); ++i) xn->grad[i] += tmp[i];
        });
    }
    return out;
}

/// Fused causal grouped-query attention. q is [T x n_q*head_dim], k and v
/// are [T x n_kv*head_dim]; query head h attends through kv head
/// h / (n_q / n_kv). Scores are scaled by 1/sqrt(head_dim) and masked so
/// position t sees keys 0..t. Per-head probabilities are kept for backward.
template <typename S>
Tensor<S> causal_gqa_attention(const Tensor<S>& q, const Tensor<S>& k,
                               const Tensor<S>& v, int n_q, int n_kv,
                               int head_dim) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw dimension_error("attention inputs must be rank 2");
    int t = q.dim(0);
    if (k.dim(0) != t || v.dim(0) != t)
        throw dimension_error("attention sequence lengths differ");
    if (n_q <= 0 || n_kv <= 0 || n_q % n_kv != 0)
        throw dimension_error("query head count must be a multiple of kv heads");
    if (q.dim(1) != n_q * head_dim || k.dim(1) != n_kv * head_dim ||
        v.dim(1) != n_kv * head_dim)
        throw dimension_error("attention widths do not match head layout");

    const int group = n_q / n_kv;
    const int qw = n_q * head_dim, kw = n_kv * head_dim;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));
    Tensor<S> out = Tensor<S>::zeros({t, qw});

    // probs[h] is a lower-triangular [T x T] row-stochastic matrix.
    auto probs = std::make_shared<std::vector<S>>(
        static_cast<std::size_t>(n_q) * t * t, S(0));

    for (int h = 0; h < n_q; ++h) {
        int g = h / group;
        S* p = probs->data() + static_cast<std::size_t>(h) * t * t;
        for (int i = 0; i < t; ++i) {
            const S* qi = q.data() + static_cast<std::size_t>(i) * qw +
                          static_cast<std::size_t>(h) * head_dim;
            S* pi = p + static_cast<std::size_t>(i) * t;
            S mx = S(0);
            for (int u = 0; u <= i; ++u) {
                const S* ku = k.data() + static_cast<std::size_t>(u) * kw +
                              static_cast<std::size_t>(g) * head_dim;
                S s = S(0);
                for (int d = 0; d < head_dim; ++d) s += qi[d] * ku[d];
                pi[u] = s * inv_sqrt;
                mx = (u == 0) ? pi[u] : std::max(mx, pi[u]);
            }
            S z = S(0);
            for (int u = 0; u <= i; ++u) {
                pi[u] = std::exp(pi[u] - mx);
                z += pi[u];
            }
            S* oi = out.data() + static_cast<std::size_t>(i) * qw +
                    static_cast<std::size_t>(h) * head_dim;
            for (int u = 0; u <= i; ++u) {
                pi[u] /= z;
                const S* vu = v.data() + static_cast<std::size_t>(u) * kw +
                              static_cast<std::size_t>(g) * head_dim;
                for (int d = 0; d < head_dim; ++d) oi[d] += pi[u] * vu[d];
            }
        }
    }

    if (detail::track<S>({&q, &k, &v})) {
        out.set_requires_grad(true);
        auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
        detail::record<S>([qn, kn, vn, on, probs, t, n_q, n_kv, head_dim, group,
                           qw, kw, inv_sqrt] {
            if (on->grad.empty()) return;
            if (qn->requires_grad) qn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            std::vector<S> dp(static_cast<std::size_t>(t), S(0));
            for (int h = 0; h < n_q; ++h) {
                int g = h / group;
                const S* p = probs->data() + static_cast<std::size_t>(h) * t * t;
                for (int i = 0; i < t; ++i) {
                    const S* go = on->grad.data() +
                                  static_cast<std::size_t>(i) * qw +
                                  static_cast<std::size_t>(h) * head_dim;
                    const S* pi = p + static_cast<std::size_t>(i) * t;
                    // dP[i,u] = dOut[i] . V[u]; dV[u] += P[i,u] * dOut[i]
                    S row_dot = S(0);
                    for (int u = 0; u <= i; ++u) {
                        const S* vu = vn->data.data() +
                                      static_cast<std::size_t>(u) * kw +
                                      static_cast<std::size_t>(g) * head_dim;
                        S acc = S(0);
                        for (int d = 0; d < head_dim; ++d) acc += go[d] * vu[d];
                        dp[static_cast<std::size_t>(u)] = acc;
                        row_dot += acc * pi[u];
                        if (vn->requires_grad) {
                            S* dv = vn->grad.data() +
                                    static_cast<std::size_t>(u) * kw +
                                    static_cast<std::size_t>(g) * head_dim;
                            for (int d = 0; d < head_dim; ++d)
                                dv[d] += pi[u] * go[d];
                        }
                    }
                    // dS[i,u] = P[i,u] * (dP[i,u] - row_dot), then through
                    // the 1/sqrt(head_dim) scaling into q and k.
                    const S* qi = qn->data.data() +
                                  static_cast<std::size_t>(i) * qw +
                                  static_cast<std::size_t>(h) * head_dim;
                    for (int u = 0; u <= i; ++u) {
                        S ds = pi[u] * (dp[static_cast<std::size_t>(u)] - row_dot) *
                               inv_sqrt;
                        if (ds == S(0)) continue;
                        const S* ku = kn->data.data() +
                                      static_cast<std::size_t>(u) * kw +
                                      static_cast<std::size_t>(g) * head_dim;
                        if (qn->requires_grad) {
                            S* dq = qn->grad.data() +
                                    static_cast<std::size_t>(i) * qw +
                                    static_cast<std::size_t>(h) * head_dim;
                            for (int d = 0; d < head_dim; ++d)
                                dq[d] += ds * ku[d];
                        }
                        if (kn->requires_grad) {
                            S* dk = kn->grad.data() +
                                    static_cast<std::size_t>(u) * kw +
                                    static_cast<std::size_t>(g) * head_dim;
                            for (int d = 0; d < head_dim; ++d)
                                dk[d] += ds * qi[d];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> last_row(const Tensor<S>& x) {
    if (x.rank() != 2 || x.dim(0) == 0)
        throw dimension_error("last_row expects a non-empty rank-2 tensor");
    int t = x.dim(0), d = x.dim(1);
    Tensor<S> out = Tensor<S>::zeros({d});
    std::copy_n(x.data() + static_cast<std::size_t>(t - 1) * d, d, out.data());
    if (detail::track<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        detail::record<S>([xn, on, t, d] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            S* dst = xn->grad.data() + static_cast<std::size_t>(t - 1) * d;
            for (int i = 0; i < d; ++i) dst[i] += on->grad[i];
        });
    }
    return out;
}

/// First k coordinates of a vector (nested-truncation view of an embedding).
template <typename S>
Tensor<S> take_front(const Tensor<S>& x, int k) {
    if (x.rank() != 1) throw dimension_error("take_front expects rank 1");
    if (k <= 0 || k > x.dim(0))
        throw dimension_error("take_front size " + std::to_string(k) +
                              " out of range for dim " + std::to_string(x.dim(0)));
    Tensor<S> out = Tensor<S>::zeros({k});
    std::copy_n(x.data(), k, out.data());
    if (detail::track<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        detail::record<S>([xn, on, k] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int i = 0; i < k; ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

/// Stacks equal-length vectors into a [N x d] matrix (batch assembly).
template <typename S>
Tensor<S> stack_rows(const std::vector<Tensor<S>>& rows) {
    if (rows.empty()) throw dimension_error("stack_rows of nothing");
    int d = rows.front().rank() == 1
                ? rows.front().dim(0)
                : throw dimension_error("stack_rows expects rank-1 inputs");
    int n = static_cast<int>(rows.size());
    Tensor<S> out = Tensor<S>::zeros({n, d});
    bool any_grad = false;
    for (int i = 0; i < n; ++i) {
        if (rows[static_cast<std::size_t>(i)].rank() != 1 ||
            rows[static_cast<std::size_t>(i)].dim(0) != d)
            throw dimension_error("stack_rows inputs differ in length");
        std::copy_n(rows[static_cast<std::size_t>(i)].data(), d,
                    out.data() + static_cast<std::size_t>(i) * d);
        any_grad |= rows[static_cast<std::size_t>(i)].requires_grad();
    }
    if (Tape<S>::active() != nullptr && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode<S>>> nodes;
        nodes.reserve(rows.size());
        for (const auto& r : rows) nodes.push_back(r.node());
        auto on = out.node();
        detail::record<S>([nodes, on, d] {
            if (on->grad.empty()) return;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (!nodes[i]->requires_grad) continue;
                nodes[i]->ensure_grad();
                const S* g = on->grad.data() + i * d;
                for (int j = 0; j < d; ++j) nodes[i]->grad[static_cast<std::size_t>(j)] += g[j];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::scalar(S(0));
    S acc = S(0);
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
    out.data()[0] = acc;
    if (detail::track<S>({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        detail::record<S>([xn, on] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            S g = on->grad[0];
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
    if (x.numel() == 0) throw dimension_error("mean of empty tensor");
    return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0))
        throw dimension_error("dot expects equal-length vectors");
    return sum(mul(a, b));
}

/// Mean cross-entropy of logits[t] against targets[t] over the listed
/// positions only (the masked-prediction warmup objective).
template <typename S>
Tensor<S> masked_cross_entropy(const Tensor<S>& logits,
                               const std::vector<int>& targets,
                               const std::vector<int>& positions) {
    if (logits.rank() != 2) throw dimension_error("logits must be rank 2");
    int t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t)
        throw dimension_error("targets length does not match sequence");
    if (positions.empty())
        throw dimension_error("masked_cross_entropy needs at least one position");
    for (int p : positions) {
        if (p < 0 || p >= t) throw dimension_error("mask position out of range");
        if (targets[static_cast<std::size_t>(p)] < 0 ||
            targets[static_cast<std::size_t>(p)] >= v)
            throw data_error("target token outside vocabulary");
    }
    S loss = S(0);
    for (int p : positions) {
        const S* row = logits.data() + static_cast<std::size_t>(p) * v;
        S mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        S z = S(0);
        for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        loss += std::log(z) + mx - row[targets[static_cast<std::size_t>(p)]];
    }
    loss /= static_cast<S>(positions.size());
    Tensor<S> out = Tensor<S>::scalar(loss);
    if (detail::track<S>({&logits})) {
        out.set_requires_grad(true);
        auto ln = logits.node(), on = out.node();
        detail::record<S>([ln, on, targets, positions, v] {
            if (on->grad.empty() || !ln->requires_grad) return;
            ln->ensure_grad();
            S g = on->grad[0] / static_cast<S>(positions.size());
            for (int p : positions) {
                const S* row = ln->data.data() + static_cast<std::size_t>(p) * v;
                S* drow = ln->grad.data() + static_cast<std::size_t>(p) * v;
                S mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                S z = S(0);
                for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
                for (int j = 0; j < v; ++j)
                    drow[j] += g * std::exp(row[j] - mx) / z;
                drow[targets[static_cast<std::size_t>(p)]] -= g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// SVD of a square matrix by one-sided Jacobi, always computed in double.
// Not differentiable; used for rotation recovery, never inside training.
// ---------------------------------------------------------------------------

template <typename S>
struct SvdResult {
    Tensor<S> u;  // [d x d] orthogonal
    Tensor<S> s;  // [d] singular values, descending
    Tensor<S> v;  // [d x d] orthogonal, a = u * diag(s) * v^T
};

template <typename S>
SvdResult<S> svd_square(const Tensor<S>& a) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1))
        throw dimension_error("svd_square expects a square matrix");
    const int d = a.dim(0);
    const int max_sweeps = 100;
    const double tol = 1e-12;

    // Column-major double copies: work orthogonalizes columns, v accumulates
    // the applied rotations so that input = work_final * v^T at all times.
    std::vector<double> w(static_cast<std::size_t>(d) * d);
    std::vector<double> vm(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            w[static_cast<std::size_t>(j) * d + i] =
                static_cast<double>(a.data()[static_cast<std::size_t>(i) * d + j]);
    for (int i = 0; i < d; ++i) vm[static_cast<std::size_t>(i) * d + i] = 1.0;

    bool converged = (d <= 1);
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        for (int p = 0; p < d - 1; ++p) {
            for (int q = p + 1; q < d; ++q) {
                double* cp = w.data() + static_cast<std::size_t>(p) * d;
                double* cq = w.data() + static_cast<std::size_t>(q) * d;
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (int i = 0; i < d; ++i) {
                    app += cp[i] * cp[i];
                    aqq += cq[i] * cq[i];
                    apq += cp[i] * cq[i];
                }
                if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0)
                    continue;
                converged = false;
                double zeta = (aqq - app) / (2.0 * apq);
                double tt = (zeta >= 0.0 ? 1.0 : -1.0) /
                            (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double cs = 1.0 / std::sqrt(1.0 + tt * tt);
                double sn = cs * tt;
                double* vp = vm.data() + static_cast<std::size_t>(p) * d;
                double* vq = vm.data() + static_cast<std::size_t>(q) * d;
                for (int i = 0; i < d; ++i) {
                    double wp = cp[i], wq = cq[i];
                    cp[i] = cs * wp - sn * wq;
                    cq[i] = sn * wp + cs * wq;
                    double xp = vp[i], xq = vq[i];
                    vp[i] = cs * xp - sn * xq;
                    vq[i] = sn * xp + cs * xq;
                }
            }
        }
    }
    if (!converged)
        throw numeric_error("svd_square: Jacobi sweeps did not converge");

    std::vector<double> sig(static_cast<std::size_t>(d));
    std::vector<int> order(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        double ss = 0.0;
        const double* cj = w.data() + static_cast<std::size_t>(j) * d;
        for (int i = 0; i < d; ++i) ss += cj[i] * cj[i];
        sig[static_cast<std::size_t>(j)] = std::sqrt(ss);
        order[static_cast<std::size_t>(j)] = j;
    }
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return sig[static_cast<std::size_t>(x)] > sig[static_cast<std::size_t>(y)];
    });

    SvdResult<S> r;
    r.u = Tensor<S>::zeros({d, d});
    r.s = Tensor<S>::zeros({d});
    r.v = Tensor<S>::zeros({d, d});
    std::vector<double> ucols(static_cast<std::size_t>(d) * d, 0.0);
    int filled = 0;
    for (int rank_pos = 0; rank_pos < d; ++rank_pos) {
        int j = order[static_cast<std::size_t>(rank_pos)];
        double sj = sig[static_cast<std::size_t>(j)];
        r.s.data()[rank_pos] = static_cast<S>(sj);
        for (int i = 0; i < d; ++i)
            r.v.data()[static_cast<std::size_t>(i) * d + rank_pos] =
                static_cast<S>(vm[static_cast<std::size_t>(j) * d + i]);
        if (sj > 1e-300) {
            double* dst = ucols.data() + static_cast<std::size_t>(rank_pos) * d;
            const double* cj = w.data() + static_cast<std::size_t>(j) * d;
            for (int i = 0; i < d; ++i) dst[i] = cj[i] / sj;
            filled = rank_pos + 1;
        }
    }
    // Complete zero-singular-value columns to an orthonormal basis.
    for (int col = filled; col < d; ++col) {
        double* dst = ucols.data() + static_cast<std::size_t>(col) * d;
        for (int cand = 0; cand < d; ++cand) {
            std::fill(dst, dst + d, 0.0);
            dst[cand] = 1.0;
            for (int prev = 0; prev < col; ++prev) {
                const double* u = ucols.data() + static_cast<std::size_t>(prev) * d;
                double proj = 0.0;
                for (int i = 0; i < d; ++i) proj += u[i] * dst[i];
                for (int i = 0; i < d; ++i) dst[i] -= proj * u[i];
            }
            double nn = 0.0;
            for (int i = 0; i < d; ++i) nn += dst[i] * dst[i];
            if (nn > 1e-8) {
                double inv = 1.0 / std::sqrt(nn);
                for (int i = 0; i < d; ++i) dst[i] *= inv;
                break;
            }
        }
    }
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            r.u.data()[static_cast<std::size_t>(i) * d + j] =
                static_cast<S>(ucols[static_cast<std::size_t>(j) * d + i]);
    return r;
}

}  // namespace hlm

// SPDX-License-Identifier: Apache-2.0
//
// Dense fp32 tensors with reverse-mode autodiff on an explicit tape.
// Exactly the operations the model and losses need, nothing speculative.
// Broadcasting is limited to exact-shape and scalar(1-element) cases.

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moelab/rng.hpp"

namespace moelab {

using Shape = std::vector<int>;

struct DimError : std::runtime_error {
    explicit DimError(const std::string& m) : std::runtime_error("dimension error: " + m) {}
};
struct ArgError : std::runtime_error {
    explicit ArgError(const std::string& m) : std::runtime_error("argument error: " + m) {}
};
struct EvalError : std::runtime_error {
    explicit EvalError(const std::string& m) : std::runtime_error("evaluation error: " + m) {}
};

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimError("non-positive dimension in " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

class Tensor {
    struct Node {
        Shape shape;
        std::vector<float> values;
        std::vector<float> grad;  // empty until touched; zeros on first touch
        bool requires_grad = false;
        std::string name;
    };
    std::shared_ptr<Node> node_;

public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->values.assign(shape_numel(shape), 0.0f);
        t.node_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, float v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.values().begin(), t.values().end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<float> vals) {
        if (shape_numel(shape) != vals.size())
            throw DimError("value count " + std::to_string(vals.size()) + " does not match " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(vals);
        return t;
    }

    static Tensor randn(Shape shape, float stddev, Rng& rng) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.values()) v = rng.normal(0.0f, stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int rows() const { return node_->shape[0]; }
    int cols() const { return ndim() == 1 ? 1 : node_->shape[1]; }
    size_t numel() const { return node_->values.size(); }

    std::vector<float>& values() { return node_->values; }
    const std::vector<float>& values() const { return node_->values; }
    float* data() { return node_->values.data(); }
    const float* data() const { return node_->values.data(); }

    float& at(int i) { return node_->values[static_cast<size_t>(i)]; }
    float at(int i) const { return node_->values[static_cast<size_t>(i)]; }
    float& at(int r, int c) { return node_->values[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return node_->values[static_cast<size_t>(r) * cols() + c]; }
    float item() const {
        if (numel() != 1) throw DimError("item() on non-scalar " + shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool rg = true) {
        node_->requires_grad = rg;
        return *this;
    }
    const std::string& name() const { return node_->name; }
    Tensor& set_name(std::string n) {
        node_->name = std::move(n);
        return *this;
    }

    bool grad_allocated() const { return !node_->grad.empty(); }
    std::vector<float>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0f);
        return node_->grad;
    }
    const std::vector<float>& grad() const { return const_cast<Tensor*>(this)->grad(); }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
    }

    // Identity of the underlying storage (two handles may alias one node).
    bool same_node(Tensor o) const { return node_ == o.node_; }

    Tensor clone() const {
        Tensor t = from(shape(), values());
        t.node_->name = node_->name;
        return t;
    }

    bool all_finite() const {
        for (float v : node_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Records backward closures in forward (topological) order; backward() runs
// them exactly once, in reverse. One tape per graph; no shared mutable state
// between tapes.
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
    void backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }
    size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

// Seeds d(loss)/d(loss) = 1 and propagates through the tape.
inline void backward(Tensor loss, Tape& tape) {
    if (loss.numel() != 1) throw ArgError("backward() expects a scalar loss");
    loss.grad()[0] += 1.0f;
    tape.backward();
}

namespace detail {

inline void check_finite(Tensor t, const char* op) {
#ifndef NDEBUG
    if (!t.all_finite()) throw EvalError(std::string(op) + " produced non-finite values");
#else
    (void)t;
    (void)op;
#endif
}

inline bool want_grad(Tape* tape, std::initializer_list<const Tensor*> ins) {
    if (!tape) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

// ---- raw matmul kernels (row-major) ------------------------------------
// Loop orders keep the inner stride 1 so the compiler can vectorize; when
// parallelized, each thread owns whole output rows, so per-element summation
// order never depends on the thread count (determinism contract).

inline void mm_nn_acc(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(m) * k * n > 65536 && m > 1)
    for (int i = 0; i < m; ++i) {
        float* ci = c + static_cast<size_t>(i) * n;
        const float* ai = a + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const float ail = ai[l];
            if (ail == 0.0f) continue;
            const float* bl = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]^T
inline void mm_nt_acc(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(m) * k * n > 65536 && m > 1)
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<size_t>(i) * k;
        float* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* bj = b + static_cast<size_t>(j) * k;
            float acc = 0.0f;
            for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
            ci[j] += acc;
        }
    }
}

// c[k×n] += a[m×k]^T · b[m×n]
inline void mm_tn_acc(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(m) * k * n > 65536 && k > 1)
    for (int l = 0; l < k; ++l) {
        float* cl = c + static_cast<size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            const float ail = a[static_cast<size_t>(i) * k + l];
            if (ail == 0.0f) continue;
            const float* bi = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) cl[j] += ail * bi[j];
        }
    }
}

inline void check_2d(Tensor t, const char* what) {
    if (t.ndim() != 2) throw DimError(std::string(what) + " must be 2-D, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---- core ops ------------------------------------------------------------

inline Tensor matmul(Tensor a, Tensor b, Tape* tape) {
    detail::check_2d(a, "matmul lhs");
    detail::check_2d(b, "matmul rhs");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimError("matmul inner dims: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    detail::mm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out, "matmul");
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad();
        tape->record([a, b, out, m, k, n]() mutable {
            const float* g = out.grad().data();
            if (a.requires_grad()) detail::mm_nt_acc(g, b.data(), a.grad().data(), m, n, k);
            if (b.requires_grad()) detail::mm_tn_acc(a.data(), g, b.grad().data(), m, k, n);
        });
    }
    return out;
}

// a · b^T for b stored row-major [n×k].
inline Tensor matmul_nt(Tensor a, Tensor b, Tape* tape) {
    detail::check_2d(a, "matmul_nt lhs");
    detail::check_2d(b, "matmul_nt rhs");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw DimError("matmul_nt inner dims: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    detail::mm_nt_acc(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out, "matmul_nt");
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad();
        tape->record([a, b, out, m, k, n]() mutable {
            const float* g = out.grad().data();
            // ga += g · b ; gb += g^T · a
            if (a.requires_grad()) detail::mm_nn_acc(g, b.data(), a.grad().data(), m, n, k);
            if (b.requires_grad()) detail::mm_tn_acc(g, a.data(), b.grad().data(), m, n, k);
        });
    }
    return out;
}

inline Tensor add(Tensor a, Tensor b, Tape* tape) {
    if (a.shape() != b.shape())
        throw DimError("add shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad();
        tape->record([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(Tensor a, Tensor b, Tape* tape) {
    if (a.shape() != b.shape())
        throw DimError("sub shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad();
        tape->record([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

// Hadamard product; either operand may be a 1-element tensor (scalar broadcast).
inline Tensor mul(Tensor a, Tensor b, Tape* tape) {
    const bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw DimError("mul shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor big = b_scalar ? a : b;
    Tensor out = Tensor::zeros(big.shape());
    const size_t n = big.numel();
    for (size_t i = 0; i < n; ++i)
        out.data()[i] = (a_scalar ? a.data()[0] : a.data()[i]) * (b_scalar ? b.data()[0] : b.data()[i]);
    detail::check_finite(out, "mul");
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad();
        tape->record([a, b, out, a_scalar, b_scalar]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                if (a_scalar) {
                    float acc = 0.0f;
                    for (size_t i = 0; i < g.size(); ++i) acc += g[i] * (b_scalar ? b.data()[0] : b.data()[i]);
                    ga[0] += acc;
                } else {
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (b_scalar ? b.data()[0] : b.data()[i]);
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                if (b_scalar) {
                    float acc = 0.0f;
                    for (size_t i = 0; i < g.size(); ++i) acc += g[i] * (a_scalar ? a.data()[0] : a.data()[i]);
                    gb[0] += acc;
                } else {
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (a_scalar ? a.data()[0] : a.data()[i]);
                }
            }
        });
    }
    return out;
}

inline Tensor scale(Tensor a, float c, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad();
        tape->record([a, out, c]() mutable {
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

inline Tensor sigmoid(Tensor a, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = 1.0f / (1.0f + std::exp(-a.data()[i]));
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad();
        tape->record([a, out]() mutable {
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                const float y = out.data()[i];
                ga[i] += g[i] * y * (1.0f - y);
            }
        });
    }
    return out;
}

inline Tensor silu(Tensor a, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) {
        const float x = a.data()[i];
        out.data()[i] = x / (1.0f + std::exp(-x));
    }
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad();
        tape->record([a, out]() mutable {
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                const float x = a.data()[i];
                const float s = 1.0f / (1.0f + std::exp(-x));
                ga[i] += g[i] * s * (1.0f + x * (1.0f - s));
            }
        });
    }
    return out;
}

// Per-token RMS normalization over the last dimension, then scale by gamma.
inline Tensor rmsnorm(Tensor x, Tensor gamma, float eps, Tape* tape) {
    detail::check_2d(x, "rmsnorm input");
    const int n = x.dim(0), d = x.dim(1);
    if (gamma.numel() != static_cast<size_t>(d))
        throw DimError("rmsnorm gamma " + shape_str(gamma.shape()) + " vs d=" + std::to_string(d));
    if (eps < 0.0f) throw ArgError("rmsnorm eps must be >= 0");
    Tensor out = Tensor::zeros({n, d});
    std::vector<float> inv_rms(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        const float* xr = x.data() + static_cast<size_t>(r) * d;
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += static_cast<double>(xr[j]) * xr[j];
        const float rms = std::sqrt(static_cast<float>(ss / d) + eps);
        const float inv = rms > 0.0f ? 1.0f / rms : 0.0f;
        inv_rms[static_cast<size_t>(r)] = inv;
        float* or_ = out.data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j) or_[j] = xr[j] * inv * gamma.data()[j];
    }
    detail::check_finite(out, "rmsnorm");
    if (detail::want_grad(tape, {&x, &gamma})) {
        out.set_requires_grad();
        tape->record([x, gamma, out, inv_rms, n, d]() mutable {
            const float* g = out.grad().data();
            for (int r = 0; r < n; ++r) {
                const float inv = inv_rms[static_cast<size_t>(r)];
                const float* xr = x.data() + static_cast<size_t>(r) * d;
                const float* gr = g + static_cast<size_t>(r) * d;
                if (gamma.requires_grad()) {
                    auto& gg = gamma.grad();
                    for (int j = 0; j < d; ++j) gg[static_cast<size_t>(j)] += gr[j] * xr[j] * inv;
                }
                if (x.requires_grad()) {
                    float dot = 0.0f;
                    for (int j = 0; j < d; ++j) dot += gr[j] * gamma.data()[j] * xr[j];
                    const float k = dot * inv * inv * inv / static_cast<float>(d);
                    auto& gx = x.grad();
                    float* gxr = gx.data() + static_cast<size_t>(r) * d;
                    for (int j = 0; j < d; ++j) gxr[j] += gr[j] * gamma.data()[j] * inv - xr[j] * k;
                }
            }
        });
    }
    return out;
}

inline Tensor softmax_rows(Tensor x, Tape* tape) {
    detail::check_2d(x, "softmax input");
    const int n = x.dim(0), m = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int r = 0; r < n; ++r) {
        const float* xr = x.data() + static_cast<size_t>(r) * m;
        float* pr = out.data() + static_cast<size_t>(r) * m;
        float mx = xr[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < m; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            sum += pr[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < m; ++j) pr[j] *= inv;
    }
    detail::check_finite(out, "softmax_rows");
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, n, m]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            for (int r = 0; r < n; ++r) {
                const float* pr = out.data() + static_cast<size_t>(r) * m;
                const float* gr = g + static_cast<size_t>(r) * m;
                float dot = 0.0f;
                for (int j = 0; j < m; ++j) dot += gr[j] * pr[j];
                float* gxr = gx.data() + static_cast<size_t>(r) * m;
                for (int j = 0; j < m; ++j) gxr[j] += pr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// Softmax over columns 0..r of row r (square score matrices); masked-out
// entries stay exactly zero.
inline Tensor causal_softmax_rows(Tensor x, Tape* tape) {
    detail::check_2d(x, "causal softmax input");
    const int n = x.dim(0);
    if (x.dim(1) != n) throw DimError("causal softmax expects square input, got " + shape_str(x.shape()));
    Tensor out = Tensor::zeros({n, n});
    for (int r = 0; r < n; ++r) {
        const float* xr = x.data() + static_cast<size_t>(r) * n;
        float* pr = out.data() + static_cast<size_t>(r) * n;
        float mx = xr[0];
        for (int j = 1; j <= r; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j <= r; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            sum += pr[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j <= r; ++j) pr[j] *= inv;
    }
    detail::check_finite(out, "causal_softmax_rows");
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, n]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            for (int r = 0; r < n; ++r) {
                const float* pr = out.data() + static_cast<size_t>(r) * n;
                const float* gr = g + static_cast<size_t>(r) * n;
                float dot = 0.0f;
                for (int j = 0; j <= r; ++j) dot += gr[j] * pr[j];
                float* gxr = gx.data() + static_cast<size_t>(r) * n;
                for (int j = 0; j <= r; ++j) gxr[j] += pr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// Indices of the k largest values, sorted by descending value then ascending
// index; ties broken toward the lower index.
inline std::vector<int> topk_indices(std::span<const float> x, int k) {
    const int m = static_cast<int>(x.size());
    if (k < 1 || k > m)
        throw ArgError("topk k=" + std::to_string(k) + " out of range for m=" + std::to_string(m));
    std::vector<int> idx(static_cast<size_t>(m));
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (x[static_cast<size_t>(a)] != x[static_cast<size_t>(b)])
            return x[static_cast<size_t>(a)] > x[static_cast<size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

// Causal depthwise convolution: output position t mixes inputs t-w+1..t per
// channel; kernel row w-1 is the tap at the current position.
inline Tensor causal_depthwise_conv(Tensor x, Tensor kernel, Tape* tape) {
    detail::check_2d(x, "conv input");
    detail::check_2d(kernel, "conv kernel");
    const int n = x.dim(0), c = x.dim(1), w = kernel.dim(0);
    if (kernel.dim(1) != c)
        throw DimError("conv channels: input " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
    if (w < 1) throw ArgError("conv width must be >= 1");
    Tensor out = Tensor::zeros({n, c});
    for (int t = 0; t < n; ++t) {
        float* ot = out.data() + static_cast<size_t>(t) * c;
        for (int j = 0; j < w; ++j) {
            const int src = t - (w - 1) + j;
            if (src < 0) continue;
            const float* xs = x.data() + static_cast<size_t>(src) * c;
            const float* kj = kernel.data() + static_cast<size_t>(j) * c;
            for (int ch = 0; ch < c; ++ch) ot[ch] += kj[ch] * xs[ch];
        }
    }
    if (detail::want_grad(tape, {&x, &kernel})) {
        out.set_requires_grad();
        tape->record([x, kernel, out, n, c, w]() mutable {
            const float* g = out.grad().data();
            for (int t = 0; t < n; ++t) {
                const float* gt = g + static_cast<size_t>(t) * c;
                for (int j = 0; j < w; ++j) {
                    const int src = t - (w - 1) + j;
                    if (src < 0) continue;
                    if (x.requires_grad()) {
                        float* gx = x.grad().data() + static_cast<size_t>(src) * c;
                        const float* kj = kernel.data() + static_cast<size_t>(j) * c;
                        for (int ch = 0; ch < c; ++ch) gx[ch] += kj[ch] * gt[ch];
                    }
                    if (kernel.requires_grad()) {
                        float* gk = kernel.grad().data() + static_cast<size_t>(j) * c;
                        const float* xs = x.data() + static_cast<size_t>(src) * c;
                        for (int ch = 0; ch < c; ++ch) gk[ch] += xs[ch] * gt[ch];
                    }
                }
            }
        });
    }
    return out;
}

// out[i,:] = x[rows[i],:]. Row indices may repeat; backward scatter-adds.
inline Tensor gather_rows(Tensor x, const std::vector<int>& rows, Tape* tape) {
    detail::check_2d(x, "gather input");
    const int c = x.dim(1);
    for (int r : rows)
        if (r < 0 || r >= x.dim(0)) throw ArgError("gather row " + std::to_string(r) + " out of range");
    Tensor out = Tensor::zeros({static_cast<int>(rows.size()), c});
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(x.data() + static_cast<size_t>(rows[i]) * c, c, out.data() + i * c);
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, rows, c]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            for (size_t i = 0; i < rows.size(); ++i) {
                float* dst = gx.data() + static_cast<size_t>(rows[i]) * c;
                const float* src = g + i * c;
                for (int j = 0; j < c; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Inverse of gather for unique row sets: out[n_out×c] zeros except
// out[rows[i],:] = src[i,:].
inline Tensor scatter_rows(Tensor src, const std::vector<int>& rows, int n_out, Tape* tape) {
    detail::check_2d(src, "scatter input");
    if (static_cast<size_t>(src.dim(0)) != rows.size()) throw DimError("scatter rows/src mismatch");
    const int c = src.dim(1);
    Tensor out = Tensor::zeros({n_out, c});
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= n_out) throw ArgError("scatter row out of range");
        std::copy_n(src.data() + i * c, c, out.data() + static_cast<size_t>(rows[i]) * c);
    }
    if (detail::want_grad(tape, {&src})) {
        out.set_requires_grad();
        tape->record([src, out, rows, c]() mutable {
            auto& gs = src.grad();
            const float* g = out.grad().data();
            for (size_t i = 0; i < rows.size(); ++i) {
                const float* gr = g + static_cast<size_t>(rows[i]) * c;
                float* dst = gs.data() + i * c;
                for (int j = 0; j < c; ++j) dst[j] += gr[j];
            }
        });
    }
    return out;
}

inline Tensor row_slice(Tensor x, int start, int len, Tape* tape) {
    detail::check_2d(x, "row_slice input");
    if (start < 0 || len < 1 || start + len > x.dim(0))
        throw ArgError("row_slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") of " +
                       shape_str(x.shape()));
    const int c = x.dim(1);
    Tensor out = Tensor::zeros({len, c});
    std::copy_n(x.data() + static_cast<size_t>(start) * c, static_cast<size_t>(len) * c, out.data());
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, start, len, c]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            float* dst = gx.data() + static_cast<size_t>(start) * c;
            for (size_t i = 0; i < static_cast<size_t>(len) * c; ++i) dst[i] += g[i];
        });
    }
    return out;
}

inline Tensor col_slice(Tensor x, int start, int len, Tape* tape) {
    detail::check_2d(x, "col_slice input");
    if (start < 0 || len < 1 || start + len > x.dim(1))
        throw ArgError("col_slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") of " +
                       shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1);
    Tensor out = Tensor::zeros({n, len});
    for (int r = 0; r < n; ++r)
        std::copy_n(x.data() + static_cast<size_t>(r) * m + start, len, out.data() + static_cast<size_t>(r) * len);
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, start, len, n, m]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            for (int r = 0; r < n; ++r) {
                float* dst = gx.data() + static_cast<size_t>(r) * m + start;
                const float* src = g + static_cast<size_t>(r) * len;
                for (int j = 0; j < len; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

inline Tensor concat_cols(std::vector<Tensor> parts, Tape* tape) {
    if (parts.empty()) throw ArgError("concat_cols needs at least one part");
    const int n = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat part");
        if (p.dim(0) != n) throw DimError("concat_cols row mismatch");
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({n, total});
    int off = 0;
    for (const auto& p : parts) {
        const int c = p.dim(1);
        for (int r = 0; r < n; ++r)
            std::copy_n(p.data() + static_cast<size_t>(r) * c, c, out.data() + static_cast<size_t>(r) * total + off);
        off += c;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        out.set_requires_grad();
        tape->record([parts, out, n, total]() mutable {
            const float* g = out.grad().data();
            int off = 0;
            for (auto& p : parts) {
                const int c = p.dim(1);
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (int r = 0; r < n; ++r) {
                        const float* src = g + static_cast<size_t>(r) * total + off;
                        float* dst = gp.data() + static_cast<size_t>(r) * c;
                        for (int j = 0; j < c; ++j) dst[j] += src[j];
                    }
                }
                off += c;
            }
        });
    }
    return out;
}

// Scale row r of x by s[r]; s is [n×1] (or length-n vector).
inline Tensor row_scale(Tensor x, Tensor s, Tape* tape) {
    detail::check_2d(x, "row_scale input");
    const int n = x.dim(0), m = x.dim(1);
    if (s.numel() != static_cast<size_t>(n))
        throw DimError("row_scale scale " + shape_str(s.shape()) + " vs rows " + std::to_string(n));
    Tensor out = Tensor::zeros({n, m});
    for (int r = 0; r < n; ++r) {
        const float sr = s.data()[r];
        const float* xr = x.data() + static_cast<size_t>(r) * m;
        float* or_ = out.data() + static_cast<size_t>(r) * m;
        for (int j = 0; j < m; ++j) or_[j] = xr[j] * sr;
    }
    if (detail::want_grad(tape, {&x, &s})) {
        out.set_requires_grad();
        tape->record([x, s, out, n, m]() mutable {
            const float* g = out.grad().data();
            for (int r = 0; r < n; ++r) {
                const float* gr = g + static_cast<size_t>(r) * m;
                if (x.requires_grad()) {
                    float* gx = x.grad().data() + static_cast<size_t>(r) * m;
                    const float sr = s.data()[r];
                    for (int j = 0; j < m; ++j) gx[j] += gr[j] * sr;
                }
                if (s.requires_grad()) {
                    const float* xr = x.data() + static_cast<size_t>(r) * m;
                    float acc = 0.0f;
                    for (int j = 0; j < m; ++j) acc += gr[j] * xr[j];
                    s.grad()[static_cast<size_t>(r)] += acc;
                }
            }
        });
    }
    return out;
}

inline Tensor l2_normalize_rows(Tensor x, float eps, Tape* tape) {
    detail::check_2d(x, "l2_normalize input");
    const int n = x.dim(0), m = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    std::vector<float> inv_norm(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        const float* xr = x.data() + static_cast<size_t>(r) * m;
        double ss = 0.0;
        for (int j = 0; j < m; ++j) ss += static_cast<double>(xr[j]) * xr[j];
        const float inv = 1.0f / std::sqrt(static_cast<float>(ss) + eps);
        inv_norm[static_cast<size_t>(r)] = inv;
        float* or_ = out.data() + static_cast<size_t>(r) * m;
        for (int j = 0; j < m; ++j) or_[j] = xr[j] * inv;
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, inv_norm, n, m]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            for (int r = 0; r < n; ++r) {
                const float inv = inv_norm[static_cast<size_t>(r)];
                const float* xr = x.data() + static_cast<size_t>(r) * m;
                const float* gr = g + static_cast<size_t>(r) * m;
                float dot = 0.0f;
                for (int j = 0; j < m; ++j) dot += gr[j] * xr[j];
                const float k = dot * inv * inv * inv;
                float* gxr = gx.data() + static_cast<size_t>(r) * m;
                for (int j = 0; j < m; ++j) gxr[j] += gr[j] * inv - xr[j] * k;
            }
        });
    }
    return out;
}

// Rotary embedding over one head's stream [n×dh]; row index is the position.
inline Tensor rope_rows(Tensor x, float base, Tape* tape) {
    detail::check_2d(x, "rope input");
    const int n = x.dim(0), d = x.dim(1);
    if (d % 2 != 0) throw DimError("rope head dim must be even, got " + std::to_string(d));
    Tensor out = Tensor::zeros({n, d});
    for (int p = 0; p < n; ++p) {
        const float* xr = x.data() + static_cast<size_t>(p) * d;
        float* or_ = out.data() + static_cast<size_t>(p) * d;
        for (int i = 0; i < d / 2; ++i) {
            const float theta = static_cast<float>(p * std::pow(static_cast<double>(base), -2.0 * i / d));
            const float c = std::cos(theta), s = std::sin(theta);
            or_[2 * i] = xr[2 * i] * c - xr[2 * i + 1] * s;
            or_[2 * i + 1] = xr[2 * i] * s + xr[2 * i + 1] * c;
        }
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, base, n, d]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            for (int p = 0; p < n; ++p) {
                const float* gr = g + static_cast<size_t>(p) * d;
                float* gxr = gx.data() + static_cast<size_t>(p) * d;
                for (int i = 0; i < d / 2; ++i) {
                    const float theta = static_cast<float>(p * std::pow(static_cast<double>(base), -2.0 * i / d));
                    const float c = std::cos(theta), s = std::sin(theta);
                    gxr[2 * i] += gr[2 * i] * c + gr[2 * i + 1] * s;
                    gxr[2 * i + 1] += -gr[2 * i] * s + gr[2 * i + 1] * c;
                }
            }
        });
    }
    return out;
}

// Gated delta rule over one head: S_t = S_{t-1}(alpha_t (I - beta_t k_t k_t^T))
// + beta_t v_t k_t^T, y_t = S_t q_t, from S_0 = 0. Fused forward/backward; the
// per-step states are checkpointed for the reverse sweep.
inline Tensor delta_rule(Tensor q, Tensor k, Tensor v, Tensor alpha,
                         Tensor beta, Tape* tape) {
    detail::check_2d(q, "delta q");
    detail::check_2d(k, "delta k");
    detail::check_2d(v, "delta v");
    const int n = q.dim(0), dk = q.dim(1), dv = v.dim(1);
    if (k.dim(0) != n || v.dim(0) != n || k.dim(1) != dk)
        throw DimError("delta_rule stream shapes disagree");
    if (alpha.numel() != static_cast<size_t>(n) || beta.numel() != static_cast<size_t>(n))
        throw DimError("delta_rule gate length mismatch");

    const bool rec = detail::want_grad(tape, {&q, &k, &v, &alpha, &beta});
    Tensor out = Tensor::zeros({n, dv});
    // states[t] = S_t flattened [dv×dk]; states[0] = 0.
    auto states = std::make_shared<std::vector<float>>();
    if (rec) states->assign(static_cast<size_t>(n + 1) * dv * dk, 0.0f);

    std::vector<float> S(static_cast<size_t>(dv) * dk, 0.0f);
    std::vector<float> u(static_cast<size_t>(dv));
    for (int t = 0; t < n; ++t) {
        const float* kt = k.data() + static_cast<size_t>(t) * dk;
        const float* vt = v.data() + static_cast<size_t>(t) * dv;
        const float* qt = q.data() + static_cast<size_t>(t) * dk;
        const float at = alpha.data()[t], bt = beta.data()[t];
        // u = S k
        for (int i = 0; i < dv; ++i) {
            const float* Si = S.data() + static_cast<size_t>(i) * dk;
            float acc = 0.0f;
            for (int j = 0; j < dk; ++j) acc += Si[j] * kt[j];
            u[static_cast<size_t>(i)] = acc;
        }
        // S = alpha (S - beta u k^T) + beta v k^T
        for (int i = 0; i < dv; ++i) {
            float* Si = S.data() + static_cast<size_t>(i) * dk;
            const float ui = u[static_cast<size_t>(i)];
            const float vi = vt[i];
            for (int j = 0; j < dk; ++j) Si[j] = at * (Si[j] - bt * ui * kt[j]) + bt * vi * kt[j];
        }
        // y_t = S q_t
        float* yt = out.data() + static_cast<size_t>(t) * dv;
        for (int i = 0; i < dv; ++i) {
            const float* Si = S.data() + static_cast<size_t>(i) * dk;
            float acc = 0.0f;
            for (int j = 0; j < dk; ++j) acc += Si[j] * qt[j];
            yt[i] = acc;
        }
        if (rec) std::copy(S.begin(), S.end(), states->begin() + static_cast<size_t>(t + 1) * dv * dk);
    }
    detail::check_finite(out, "delta_rule");

    if (rec) {
        out.set_requires_grad();
        tape->record([q, k, v, alpha, beta, out, states, n, dk, dv]() mutable {
            std::vector<float> G(static_cast<size_t>(dv) * dk, 0.0f);  // dL/dS_t
            std::vector<float> u(static_cast<size_t>(dv)), w(static_cast<size_t>(dv));
            const float* gy = out.grad().data();
            for (int t = n - 1; t >= 0; --t) {
                const float* St = states->data() + static_cast<size_t>(t + 1) * dv * dk;
                const float* Sp = states->data() + static_cast<size_t>(t) * dv * dk;
                const float* kt = k.data() + static_cast<size_t>(t) * dk;
                const float* vt = v.data() + static_cast<size_t>(t) * dv;
                const float* qt = q.data() + static_cast<size_t>(t) * dk;
                const float* gyt = gy + static_cast<size_t>(t) * dv;
                const float at = alpha.data()[t], bt = beta.data()[t];

                // y_t = S_t q_t : G += gy_t q_t^T ; gq_t = S_t^T gy_t
                for (int i = 0; i < dv; ++i) {
                    float* Gi = G.data() + static_cast<size_t>(i) * dk;
                    const float gyi = gyt[i];
                    if (gyi != 0.0f)
                        for (int j = 0; j < dk; ++j) Gi[j] += gyi * qt[j];
                }
                if (q.requires_grad()) {
                    float* gq = q.grad().data() + static_cast<size_t>(t) * dk;
                    for (int j = 0; j < dk; ++j) {
                        float acc = 0.0f;
                        for (int i = 0; i < dv; ++i) acc += St[static_cast<size_t>(i) * dk + j] * gyt[i];
                        gq[j] += acc;
                    }
                }
                // u = S_{t-1} k_t ; w = G k_t
                for (int i = 0; i < dv; ++i) {
                    const float* Si = Sp + static_cast<size_t>(i) * dk;
                    const float* Gi = G.data() + static_cast<size_t>(i) * dk;
                    float au = 0.0f, aw = 0.0f;
                    for (int j = 0; j < dk; ++j) {
                        au += Si[j] * kt[j];
                        aw += Gi[j] * kt[j];
                    }
                    u[static_cast<size_t>(i)] = au;
                    w[static_cast<size_t>(i)] = aw;
                }
                float uw = 0.0f, vw = 0.0f, GS = 0.0f;
                for (int i = 0; i < dv; ++i) {
                    uw += u[static_cast<size_t>(i)] * w[static_cast<size_t>(i)];
                    vw += vt[i] * w[static_cast<size_t>(i)];
                }
                if (alpha.requires_grad()) {
                    for (size_t i = 0; i < static_cast<size_t>(dv) * dk; ++i) GS += G[i] * Sp[i];
                    alpha.grad()[static_cast<size_t>(t)] += GS - bt * uw;
                }
                if (beta.requires_grad()) beta.grad()[static_cast<size_t>(t)] += vw - at * uw;
                if (v.requires_grad()) {
                    float* gv = v.grad().data() + static_cast<size_t>(t) * dv;
                    for (int i = 0; i < dv; ++i) gv[i] += bt * w[static_cast<size_t>(i)];
                }
                if (k.requires_grad()) {
                    float* gk = k.grad().data() + static_cast<size_t>(t) * dk;
                    for (int j = 0; j < dk; ++j) {
                        float gtu = 0.0f, gtv = 0.0f, sw = 0.0f;
                        for (int i = 0; i < dv; ++i) {
                            const float Gij = G[static_cast<size_t>(i) * dk + j];
                            gtu += Gij * u[static_cast<size_t>(i)];
                            gtv += Gij * vt[i];
                            sw += Sp[static_cast<size_t>(i) * dk + j] * w[static_cast<size_t>(i)];
                        }
                        gk[j] += -at * bt * gtu + bt * gtv - at * bt * sw;
                    }
                }
                // G <- alpha G - alpha beta w k^T  (dL/dS_{t-1})
                for (int i = 0; i < dv; ++i) {
                    float* Gi = G.data() + static_cast<size_t>(i) * dk;
                    const float wi = w[static_cast<size_t>(i)];
                    for (int j = 0; j < dk; ++j) Gi[j] = at * Gi[j] - at * bt * wi * kt[j];
                }
            }
        });
    }
    return out;
}

// Per-row softmax over the k largest logits. Returns the normalized weights
// [n×k] plus the selected indices (row-major n×k, descending logit order).
struct TopkSoftmax {
    Tensor weights;            // [n×k]
    std::vector<int> indices;  // n*k
};

inline TopkSoftmax topk_softmax(Tensor logits, int k, Tape* tape) {
    detail::check_2d(logits, "topk_softmax input");
    const int n = logits.dim(0), m = logits.dim(1);
    if (k < 1 || k > m) throw ArgError("topk_softmax k out of range");
    TopkSoftmax res;
    res.weights = Tensor::zeros({n, k});
    res.indices.resize(static_cast<size_t>(n) * k);
    for (int r = 0; r < n; ++r) {
        const float* zr = logits.data() + static_cast<size_t>(r) * m;
        auto sel = topk_indices(std::span<const float>(zr, static_cast<size_t>(m)), k);
        std::copy(sel.begin(), sel.end(), res.indices.begin() + static_cast<size_t>(r) * k);
        float mx = zr[sel[0]];
        double sum = 0.0;
        float* wr = res.weights.data() + static_cast<size_t>(r) * k;
        for (int j = 0; j < k; ++j) {
            wr[j] = std::exp(zr[sel[static_cast<size_t>(j)]] - mx);
            sum += wr[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < k; ++j) wr[j] *= inv;
    }
    if (detail::want_grad(tape, {&logits})) {
        res.weights.set_requires_grad();
        Tensor w = res.weights;
        std::vector<int> idx = res.indices;
        tape->record([logits, w, idx, n, m, k]() mutable {
            auto& gz = logits.grad();
            const float* g = w.grad().data();
            for (int r = 0; r < n; ++r) {
                const float* wr = w.data() + static_cast<size_t>(r) * k;
                const float* gr = g + static_cast<size_t>(r) * k;
                float dot = 0.0f;
                for (int j = 0; j < k; ++j) dot += gr[j] * wr[j];
                for (int j = 0; j < k; ++j) {
                    const int col = idx[static_cast<size_t>(r) * k + j];
                    gz[static_cast<size_t>(r) * m + col] += wr[j] * (gr[j] - dot);
                }
            }
        });
    }
    return res;
}

// Mean cross-entropy over rows against integer targets (caller aligns the
// next-token shift).
inline Tensor cross_entropy_rows(Tensor logits, const std::vector<int>& targets, Tape* tape) {
    detail::check_2d(logits, "cross_entropy input");
    const int n = logits.dim(0), m = logits.dim(1);
    if (static_cast<size_t>(n) != targets.size()) throw DimError("cross_entropy target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= m) throw ArgError("cross_entropy target out of range");
    double total = 0.0;
    std::vector<float> lse(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        const float* zr = logits.data() + static_cast<size_t>(r) * m;
        float mx = zr[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, zr[j]);
        double sum = 0.0;
        for (int j = 0; j < m; ++j) sum += std::exp(static_cast<double>(zr[j]) - mx);
        lse[static_cast<size_t>(r)] = mx + static_cast<float>(std::log(sum));
        total += lse[static_cast<size_t>(r)] - zr[targets[static_cast<size_t>(r)]];
    }
    Tensor out = Tensor::from({1}, {static_cast<float>(total / n)});
    detail::check_finite(out, "cross_entropy_rows");
    if (detail::want_grad(tape, {&logits})) {
        out.set_requires_grad();
        tape->record([logits, out, targets, lse, n, m]() mutable {
            const float g = out.grad()[0] / static_cast<float>(n);
            auto& gz = logits.grad();
            for (int r = 0; r < n; ++r) {
                const float* zr = logits.data() + static_cast<size_t>(r) * m;
                float* gr = gz.data() + static_cast<size_t>(r) * m;
                const float l = lse[static_cast<size_t>(r)];
                for (int j = 0; j < m; ++j) gr[j] += g * std::exp(zr[j] - l);
                gr[targets[static_cast<size_t>(r)]] -= g;
            }
        });
    }
    return out;
}

// Mean soft-target cross-entropy -sum_v q[v] log p[v]; q rows are constant
// probability vectors (teacher targets are detached by construction).
inline Tensor soft_cross_entropy_rows(Tensor logits, Tensor q, Tape* tape) {
    detail::check_2d(logits, "soft_cross_entropy input");
    if (logits.shape() != q.shape())
        throw DimError("soft_cross_entropy shapes " + shape_str(logits.shape()) + " vs " + shape_str(q.shape()));
    const int n = logits.dim(0), m = logits.dim(1);
    double total = 0.0;
    std::vector<float> lse(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        const float* zr = logits.data() + static_cast<size_t>(r) * m;
        const float* qr = q.data() + static_cast<size_t>(r) * m;
        float mx = zr[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, zr[j]);
        double sum = 0.0;
        for (int j = 0; j < m; ++j) sum += std::exp(static_cast<double>(zr[j]) - mx);
        const float l = mx + static_cast<float>(std::log(sum));
        lse[static_cast<size_t>(r)] = l;
        double qz = 0.0;
        for (int j = 0; j < m; ++j) qz += static_cast<double>(qr[j]) * zr[j];
        total += l - qz;
    }
    Tensor out = Tensor::from({1}, {static_cast<float>(total / n)});
    detail::check_finite(out, "soft_cross_entropy_rows");
    if (detail::want_grad(tape, {&logits})) {
        out.set_requires_grad();
        tape->record([logits, q, out, lse, n, m]() mutable {
            const float g = out.grad()[0] / static_cast<float>(n);
            auto& gz = logits.grad();
            for (int r = 0; r < n; ++r) {
                const float* zr = logits.data() + static_cast<size_t>(r) * m;
                const float* qr = q.data() + static_cast<size_t>(r) * m;
                float* gr = gz.data() + static_cast<size_t>(r) * m;
                const float l = lse[static_cast<size_t>(r)];
                for (int j = 0; j < m; ++j) gr[j] += g * (std::exp(zr[j] - l) - qr[j]);
            }
        });
    }
    return out;
}

// out[i,0] = x[rows[i], cols[i]].
inline Tensor gather_elems(Tensor x, const std::vector<int>& rows, const std::vector<int>& cols, Tape* tape) {
    detail::check_2d(x, "gather_elems input");
    if (rows.size() != cols.size()) throw DimError("gather_elems index count mismatch");
    const int m = x.dim(1);
    Tensor out = Tensor::zeros({static_cast<int>(rows.size()), 1});
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.dim(0) || cols[i] < 0 || cols[i] >= m)
            throw ArgError("gather_elems index out of range");
        out.data()[i] = x.data()[static_cast<size_t>(rows[i]) * m + cols[i]];
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out, rows, cols, m]() mutable {
            auto& gx = x.grad();
            const float* g = out.grad().data();
            for (size_t i = 0; i < rows.size(); ++i)
                gx[static_cast<size_t>(rows[i]) * m + cols[i]] += g[i];
        });
    }
    return out;
}

inline Tensor sum_all(Tensor x, Tape* tape) {
    double total = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) total += x.data()[i];
    Tensor out = Tensor::from({1}, {static_cast<float>(total)});
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad();
        tape->record([x, out]() mutable {
            const float g = out.grad()[0];
            auto& gx = x.grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

// Mean row entropy of a probability matrix (monitoring only, no grad).
inline float entropy_rows(Tensor probs) {
    const int n = probs.dim(0), m = probs.dim(1);
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        const float* pr = probs.data() + static_cast<size_t>(r) * m;
        for (int j = 0; j < m; ++j)
            if (pr[j] > 0.0f) total -= static_cast<double>(pr[j]) * std::log(static_cast<double>(pr[j]));
    }
    return static_cast<float>(total / n);
}

}  // namespace moelab

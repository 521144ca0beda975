// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op computes its forward value with a
// fixed sequential row-major reduction order (bitwise-reproducible), checks
// the result for NaN/Inf, and records one fused adjoint rule on the active
// graph. Softmax subtracts the row max; layer_norm uses eps = 1e-5.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dsrt/graph.hpp"
#include "dsrt/tensor.hpp"

namespace dsrt {

inline constexpr double kLayerNormEps = 1e-5;

// Boolean attention mask view: bits[q * key_len + k] (1 = attend).
struct MaskView {
    const uint8_t* bits = nullptr;
    size_t query_len = 0;
    size_t key_len = 0;
    bool at(size_t q, size_t k) const { return bits[q * key_len + k] != 0; }
};

// Analytic operation counter. Attention cost is counted per (query, visible
// key, head) pair so streaming/full-recompute cost claims are exact integers.
struct FlopCounter {
    unsigned long long attention_flops = 0;
    unsigned long long matmul_flops = 0;
    void reset() { attention_flops = matmul_flops = 0; }
};

namespace detail {

template <typename R>
Tensor<R> make_like(const Shape& shape) {
    return Tensor<R>::zeros(shape);
}

template <typename R>
void mark_recorded(Tensor<R>& out) {
    out.set_requires_grad(true);
}

template <typename R>
void require_same_shape(const char* op, const Tensor<R>& a, const Tensor<R>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

template <typename R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape("add", a, b);
    Tensor<R> out = detail::make_like<R>(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) + b.at(i);
    out.check_finite("add");
    if (detail::should_record<R>(a, b)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [a, b](Graph<R>& g, const std::vector<R>& go) {
            if (a.requires_grad()) {
                auto& ga = g.grad_acc(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = g.grad_acc(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape("sub", a, b);
    Tensor<R> out = detail::make_like<R>(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) - b.at(i);
    out.check_finite("sub");
    if (detail::should_record<R>(a, b)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [a, b](Graph<R>& g, const std::vector<R>& go) {
            if (a.requires_grad()) {
                auto& ga = g.grad_acc(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = g.grad_acc(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

// x {n x m} + row {1 x m}, broadcast over rows (bias add).
template <typename R>
Tensor<R> add_rowwise(const Tensor<R>& x, const Tensor<R>& row) {
    const size_t n = x.rows(), m = x.cols();
    if (row.numel() != m) {
        throw ShapeError("add_rowwise: row " + shape_str(row.shape()) +
                         " incompatible with " + shape_str(x.shape()));
    }
    Tensor<R> out = detail::make_like<R>(x.shape());
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) out.at(i * m + j) = x.at(i * m + j) + row.at(j);
    out.check_finite("add_rowwise");
    if (detail::should_record<R>(x, row)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [x, row, n, m](Graph<R>& g, const std::vector<R>& go) {
            if (x.requires_grad()) {
                auto& gx = g.grad_acc(x);
                for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            }
            if (row.requires_grad()) {
                auto& gr = g.grad_acc(row);
                for (size_t i = 0; i < n; ++i)
                    for (size_t j = 0; j < m; ++j) gr[j] += go[i * m + j];
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape("mul", a, b);
    Tensor<R> out = detail::make_like<R>(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * b.at(i);
    out.check_finite("mul");
    if (detail::should_record<R>(a, b)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [a, b](Graph<R>& g, const std::vector<R>& go) {
            if (a.requires_grad()) {
                auto& ga = g.grad_acc(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.at(i);
            }
            if (b.requires_grad()) {
                auto& gb = g.grad_acc(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.at(i);
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> scale(const Tensor<R>& a, double c) {
    Tensor<R> out = detail::make_like<R>(a.shape());
    const R rc = static_cast<R>(c);
    for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * rc;
    out.check_finite("scale");
    if (detail::should_record<R>(a)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [a, rc](Graph<R>& g, const std::vector<R>& go) {
            auto& ga = g.grad_acc(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * rc;
        });
    }
    return out;
}

template <typename R>
Tensor<R> add_scalar(const Tensor<R>& a, double c) {
    Tensor<R> out = detail::make_like<R>(a.shape());
    const R rc = static_cast<R>(c);
    for (size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) + rc;
    out.check_finite("add_scalar");
    if (detail::should_record<R>(a)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [a](Graph<R>& g, const std::vector<R>& go) {
            auto& ga = g.grad_acc(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        });
    }
    return out;
}

template <typename R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: " + shape_str(a.shape()) + " incompatible with " +
                         shape_str(b.shape()));
    }
    const size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    Tensor<R> out = Tensor<R>::zeros({n, m});
    for (size_t i = 0; i < n; ++i) {
        const R* ai = a.data() + i * k;
        R* oi = out.data() + i * m;
        for (size_t l = 0; l < k; ++l) {
            const R av = ai[l];
            const R* bl = b.data() + l * m;
            for (size_t j = 0; j < m; ++j) oi[j] += av * bl[j];
        }
    }
    out.check_finite("matmul");
    if (detail::should_record<R>(a, b)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [a, b, n, k, m](Graph<R>& g, const std::vector<R>& go) {
            if (a.requires_grad()) {
                auto& ga = g.grad_acc(a);  // dA = dO * B^T
                for (size_t i = 0; i < n; ++i)
                    for (size_t l = 0; l < k; ++l) {
                        R acc = 0;
                        const R* goi = go.data() + i * m;
                        const R* bl = b.data() + l * m;
                        for (size_t j = 0; j < m; ++j) acc += goi[j] * bl[j];
                        ga[i * k + l] += acc;
                    }
            }
            if (b.requires_grad()) {
                auto& gb = g.grad_acc(b);  // dB = A^T * dO
                for (size_t l = 0; l < k; ++l)
                    for (size_t i = 0; i < n; ++i) {
                        const R av = a.at(i * k + l);
                        const R* goi = go.data() + i * m;
                        R* gbl = gb.data() + l * m;
                        for (size_t j = 0; j < m; ++j) gbl[j] += av * goi[j];
                    }
            }
        });
    }
    return out;
}

// Row-wise softmax with max subtraction.
template <typename R>
Tensor<R> softmax(const Tensor<R>& x) {
    const size_t n = x.rows(), m = x.cols();
    Tensor<R> out = detail::make_like<R>(x.shape());
    for (size_t i = 0; i < n; ++i) {
        const R* xi = x.data() + i * m;
        R* oi = out.data() + i * m;
        R mx = xi[0];
        for (size_t j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
        R s = 0;
        for (size_t j = 0; j < m; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            s += oi[j];
        }
        for (size_t j = 0; j < m; ++j) oi[j] /= s;
    }
    out.check_finite("softmax");
    if (detail::should_record<R>(x)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [x, out, n, m](Graph<R>& g, const std::vector<R>& go) {
            auto& gx = g.grad_acc(x);
            for (size_t i = 0; i < n; ++i) {
                const R* oi = out.data() + i * m;
                const R* goi = go.data() + i * m;
                R dot = 0;
                for (size_t j = 0; j < m; ++j) dot += goi[j] * oi[j];
                for (size_t j = 0; j < m; ++j) gx[i * m + j] += oi[j] * (goi[j] - dot);
            }
        });
    }
    return out;
}

// Row-wise normalization, no affine terms. A constant row maps to zeros
// because the eps keeps the denominator positive.
template <typename R>
Tensor<R> layer_norm(const Tensor<R>& x) {
    const size_t n = x.rows(), m = x.cols();
    Tensor<R> out = detail::make_like<R>(x.shape());
    std::vector<R> inv_std(n);
    for (size_t i = 0; i < n; ++i) {
        const R* xi = x.data() + i * m;
        R mu = 0;
        for (size_t j = 0; j < m; ++j) mu += xi[j];
        mu /= static_cast<R>(m);
        R var = 0;
        for (size_t j = 0; j < m; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<R>(m);
        const R is = R(1) / std::sqrt(var + static_cast<R>(kLayerNormEps));
        inv_std[i] = is;
        for (size_t j = 0; j < m; ++j) out.at(i * m + j) = (xi[j] - mu) * is;
    }
    out.check_finite("layer_norm");
    if (detail::should_record<R>(x)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(
            out, [x, out, inv_std, n, m](Graph<R>& g, const std::vector<R>& go) {
                auto& gx = g.grad_acc(x);
                for (size_t i = 0; i < n; ++i) {
                    const R* yi = out.data() + i * m;
                    const R* goi = go.data() + i * m;
                    R mean_g = 0, mean_gy = 0;
                    for (size_t j = 0; j < m; ++j) {
                        mean_g += goi[j];
                        mean_gy += goi[j] * yi[j];
                    }
                    mean_g /= static_cast<R>(m);
                    mean_gy /= static_cast<R>(m);
                    for (size_t j = 0; j < m; ++j) {
                        gx[i * m + j] += inv_std[i] * (goi[j] - mean_g - yi[j] * mean_gy);
                    }
                }
            });
    }
    return out;
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

// tanh-approximation GELU.
template <typename R>
Tensor<R> gelu(const Tensor<R>& x) {
    using detail::kGeluA;
    using detail::kGeluC;
    constexpr double kC = kGeluC;
    constexpr double kA = kGeluA;
    Tensor<R> out = detail::make_like<R>(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) {
        const double v = x.at(i);
        out.at(i) = static_cast<R>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
    }
    out.check_finite("gelu");
    if (detail::should_record<R>(x)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [x](Graph<R>& g, const std::vector<R>& go) {
            auto& gx = g.grad_acc(x);
            for (size_t i = 0; i < go.size(); ++i) {
                const double v = x.at(i);
                const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
                const double th = std::tanh(u);
                const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * detail::kGeluC *
                                                        (1.0 + 3.0 * detail::kGeluA * v * v);
                gx[i] += go[i] * static_cast<R>(d);
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> sum(const Tensor<R>& x) {
    R s = 0;
    for (size_t i = 0; i < x.numel(); ++i) s += x.at(i);
    Tensor<R> out = Tensor<R>::from_data({1}, {s});
    if (detail::should_record<R>(x)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [x](Graph<R>& g, const std::vector<R>& go) {
            auto& gx = g.grad_acc(x);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[0];
        });
    }
    return out;
}

template <typename R>
Tensor<R> mean(const Tensor<R>& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Mean squared error over all elements.
template <typename R>
Tensor<R> mse(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape("mse", a, b);
    const size_t n = a.numel();
    R s = 0;
    for (size_t i = 0; i < n; ++i) {
        const R d = a.at(i) - b.at(i);
        s += d * d;
    }
    Tensor<R> out = Tensor<R>::from_data({1}, {static_cast<R>(s / static_cast<R>(n))});
    if (detail::should_record<R>(a, b)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [a, b, n](Graph<R>& g, const std::vector<R>& go) {
            const R c = go[0] * R(2) / static_cast<R>(n);
            if (a.requires_grad()) {
                auto& ga = g.grad_acc(a);
                for (size_t i = 0; i < n; ++i) ga[i] += c * (a.at(i) - b.at(i));
            }
            if (b.requires_grad()) {
                auto& gb = g.grad_acc(b);
                for (size_t i = 0; i < n; ++i) gb[i] -= c * (a.at(i) - b.at(i));
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> slice_rows(const Tensor<R>& x, size_t begin, size_t count) {
    const size_t n = x.rows(), m = x.cols();
    if (begin + count > n) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") out of range for " +
                         shape_str(x.shape()));
    }
    Tensor<R> out = Tensor<R>::zeros({count, m});
    std::copy(x.data() + begin * m, x.data() + (begin + count) * m, out.data());
    if (detail::should_record<R>(x)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [x, begin, m](Graph<R>& g, const std::vector<R>& go) {
            auto& gx = g.grad_acc(x);
            for (size_t i = 0; i < go.size(); ++i) gx[begin * m + i] += go[i];
        });
    }
    return out;
}

template <typename R>
Tensor<R> concat_rows(const std::vector<Tensor<R>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const size_t m = parts[0].cols();
    size_t n = 0;
    for (const auto& p : parts) {
        if (p.cols() != m) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
        }
        n += p.rows();
    }
    Tensor<R> out = Tensor<R>::zeros({n, m});
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + off);
        off += p.numel();
    }
    bool rec = Graph<R>::active() != nullptr;
    if (rec) {
        bool any = false;
        for (const auto& p : parts) any = any || p.requires_grad();
        rec = any;
    }
    if (rec) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [parts](Graph<R>& g, const std::vector<R>& go) {
            size_t off = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    auto& gp = g.grad_acc(p);
                    for (size_t i = 0; i < p.numel(); ++i) gp[i] += go[off + i];
                }
                off += p.numel();
            }
        });
    }
    return out;
}

template <typename R>
Tensor<R> add_all(const std::vector<Tensor<R>>& xs) {
    if (xs.empty()) throw ShapeError("add_all: empty input");
    Tensor<R> acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

// Detached copy: d/dx sg(x) = 0 exactly.
template <typename R>
Tensor<R> stop_gradient(const Tensor<R>& x) {
    Tensor<R> out = Tensor<R>::from_data(x.shape(), x.vec());
    return out;
}

// One row of an embedding table {vocab x d}.
template <typename R>
Tensor<R> embedding_row(const Tensor<R>& table, size_t index) {
    const size_t v = table.rows(), d = table.cols();
    if (index >= v) {
        throw ShapeError("embedding_row: index " + std::to_string(index) +
                         " out of range for table " + shape_str(table.shape()));
    }
    Tensor<R> out = Tensor<R>::zeros({1, d});
    std::copy(table.data() + index * d, table.data() + (index + 1) * d, out.data());
    if (detail::should_record<R>(table)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(out, [table, index, d](Graph<R>& g, const std::vector<R>& go) {
            auto& gt = g.grad_acc(table);
            for (size_t j = 0; j < d; ++j) gt[index * d + j] += go[j];
        });
    }
    return out;
}

// Rotary position transform applied per head chunk; pair (2i, 2i+1) of each
// head rotates by pos * base^(-2i/head_dim). Positions are real-valued so
// audio tokens can carry fractional frame phases.
template <typename R>
Tensor<R> rope(const Tensor<R>& x, const std::vector<double>& pos, size_t head_dim, double base) {
    const size_t n = x.rows(), d = x.cols();
    if (pos.size() != n) {
        throw ShapeError("rope: positions length " + std::to_string(pos.size()) +
                         " does not match rows of " + shape_str(x.shape()));
    }
    if (head_dim == 0 || d % head_dim != 0 || head_dim % 2 != 0) {
        throw ShapeError("rope: head_dim " + std::to_string(head_dim) + " invalid for " +
                         shape_str(x.shape()));
    }
    const size_t half = head_dim / 2;
    std::vector<double> freq(half);
    for (size_t i = 0; i < half; ++i) {
        freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }
    Tensor<R> out = detail::make_like<R>(x.shape());
    for (size_t r = 0; r < n; ++r) {
        for (size_t h = 0; h < d / head_dim; ++h) {
            const size_t off = r * d + h * head_dim;
            for (size_t i = 0; i < half; ++i) {
                const double ang = pos[r] * freq[i];
                const double c = std::cos(ang), s = std::sin(ang);
                const double x0 = x.at(off + 2 * i), x1 = x.at(off + 2 * i + 1);
                out.at(off + 2 * i) = static_cast<R>(x0 * c - x1 * s);
                out.at(off + 2 * i + 1) = static_cast<R>(x0 * s + x1 * c);
            }
        }
    }
    out.check_finite("rope");
    if (detail::should_record<R>(x)) {
        detail::mark_recorded(out);
        Graph<R>::active()->record(
            out, [x, pos, head_dim, freq, n, d](Graph<R>& g, const std::vector<R>& go) {
                auto& gx = g.grad_acc(x);
                const size_t half = head_dim / 2;
                for (size_t r = 0; r < n; ++r) {
                    for (size_t h = 0; h < d / head_dim; ++h) {
                        const size_t off = r * d + h * head_dim;
                        for (size_t i = 0; i < half; ++i) {
                            const double ang = pos[r] * freq[i];
                            const double c = std::cos(ang), s = std::sin(ang);
                            const double g0 = go[off + 2 * i], g1 = go[off + 2 * i + 1];
                            gx[off + 2 * i] += static_cast<R>(g0 * c + g1 * s);
                            gx[off + 2 * i + 1] += static_cast<R>(-g0 * s + g1 * c);
                        }
                    }
                }
            });
    }
    return out;
}

// Fused masked multi-head attention. Blocked keys never enter any reduction,
// in forward or backward, so masked positions cannot perturb outputs even at
// the last bit; this is what the leakage probes assert.
template <typename R>
Tensor<R> attention(const Tensor<R>& q, const Tensor<R>& k, const Tensor<R>& v,
                    const MaskView& mask, size_t heads, FlopCounter* fc = nullptr,
                    bool allow_empty_rows = false) {
    const size_t n = q.rows(), m = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != m) {
        throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " inconsistent");
    }
    if (heads == 0 || d % heads != 0) {
        throw ShapeError("attention: model dim " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    if (mask.query_len != n || mask.key_len != m) {
        throw ShapeError("attention: mask " + std::to_string(mask.query_len) + "x" +
                         std::to_string(mask.key_len) + " does not match q/k " +
                         std::to_string(n) + "x" + std::to_string(m));
    }
    const size_t dh = d / heads;
    const R sc = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));

    Tensor<R> out = Tensor<R>::zeros({n, d});
    // Dense per-head weight buffer (zeros at blocked positions), kept for backward.
    std::vector<R> w(heads * n * m, R(0));
    unsigned long long pair_count = 0;

    for (size_t h = 0; h < heads; ++h) {
        for (size_t i = 0; i < n; ++i) {
            const R* qi = q.data() + i * d + h * dh;
            R* wi = w.data() + (h * n + i) * m;
            R mx = R(0);
            bool any = false;
            for (size_t j = 0; j < m; ++j) {
                if (!mask.at(i, j)) continue;
                const R* kj = k.data() + j * d + h * dh;
                R dot = 0;
                for (size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                dot *= sc;
                wi[j] = dot;
                mx = any ? std::max(mx, dot) : dot;
                any = true;
                ++pair_count;
            }
            if (!any) {
                if (allow_empty_rows) continue;  // output row stays zero
                throw NumericError("attention: query row " + std::to_string(i) +
                                   " has no visible keys");
            }
            R s = 0;
            for (size_t j = 0; j < m; ++j) {
                if (!mask.at(i, j)) continue;
                wi[j] = std::exp(wi[j] - mx);
                s += wi[j];
            }
            R* oi = out.data() + i * d + h * dh;
            for (size_t j = 0; j < m; ++j) {
                if (!mask.at(i, j)) continue;
                wi[j] /= s;
                const R* vj = v.data() + j * d + h * dh;
                for (size_t c = 0; c < dh; ++c) oi[c] += wi[j] * vj[c];
            }
        }
    }
    if (fc) fc->attention_flops += pair_count * (4ull * dh + 4ull);
    out.check_finite("attention");

    if (detail::should_record<R>(q, k, v)) {
        detail::mark_recorded(out);
        // Copy of the mask bits: callers may rebuild masks between forward and backward.
        std::vector<uint8_t> mbits(mask.bits, mask.bits + n * m);
        Graph<R>::active()->record(
            out, [q, k, v, w, mbits, n, m, d, heads, dh, sc](Graph<R>& g,
                                                             const std::vector<R>& go) {
                std::vector<R>* gq = q.requires_grad() ? &g.grad_acc(q) : nullptr;
                std::vector<R>* gk = k.requires_grad() ? &g.grad_acc(k) : nullptr;
                std::vector<R>* gv = v.requires_grad() ? &g.grad_acc(v) : nullptr;
                std::vector<R> dl(m);
                for (size_t h = 0; h < heads; ++h) {
                    for (size_t i = 0; i < n; ++i) {
                        const R* wi = w.data() + (h * n + i) * m;
                        const R* goi = go.data() + i * d + h * dh;
                        R dot_wd = 0;
                        for (size_t j = 0; j < m; ++j) {
                            if (!mbits[i * m + j]) continue;
                            const R* vj = v.data() + j * d + h * dh;
                            R dw = 0;
                            for (size_t c = 0; c < dh; ++c) dw += goi[c] * vj[c];
                            dl[j] = dw;
                            dot_wd += wi[j] * dw;
                        }
                        for (size_t j = 0; j < m; ++j) {
                            if (!mbits[i * m + j]) continue;
                            const R dlj = wi[j] * (dl[j] - dot_wd);
                            if (gv) {
                                R* gvj = gv->data() + j * d + h * dh;
                                for (size_t c = 0; c < dh; ++c) gvj[c] += wi[j] * goi[c];
                            }
                            if (gq) {
                                const R* kj = k.data() + j * d + h * dh;
                                R* gqi = gq->data() + i * d + h * dh;
                                for (size_t c = 0; c < dh; ++c) gqi[c] += sc * dlj * kj[c];
                            }
                            if (gk) {
                                const R* qi = q.data() + i * d + h * dh;
                                R* gkj = gk->data() + j * d + h * dh;
                                for (size_t c = 0; c < dh; ++c) gkj[c] += sc * dlj * qi[c];
                            }
                        }
                    }
                }
            });
    }
    return out;
}

}  // namespace dsrt

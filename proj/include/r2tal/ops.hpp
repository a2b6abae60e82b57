// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Numerical primitives. All kernels are deterministic with a fixed
// left-to-right summation order, so recomputing a value during the backward
// pass reproduces the forward bits exactly.

#pragma once

#include <algorithm>
#include <cmath>

#include "r2tal/tensor.hpp"

namespace r2tal {

// ---------------------------------------------------------------------------
// Elementwise suite
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::max(a.data()[i], T(0));
    return out;
}

/// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const T inv_sqrt2 = T(0.70710678118654752440);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        T x = a.data()[i];
        out.data()[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    return out;
}

template <typename T>
inline T gelu_grad_scalar(T x) {
    const T inv_sqrt2 = T(0.70710678118654752440);
    const T inv_sqrt2pi = T(0.39894228040143267794);
    return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
}

/// x: [N x C], v: [C]; adds v to every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
        throw DimError("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                       shape_str(v.shape()));
    Tensor<T> out(x.shape());
    const std::int64_t n = x.dim(0), c = x.dim(1);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + v.at(j);
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// [m x k] . [k x n] -> [m x n]. Per-element summation runs over k ascending.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = a.at(i, p);
            for (std::int64_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
        }
    return out;
}

/// a . b^T, a: [m x k], b: [n x k] -> [m x n].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimError("matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> out({m, n});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::int64_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(j, p);
            out.at(i, j) = acc;
        }
    return out;
}

/// a^T . b, a: [k x m], b: [k x n] -> [m x n].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw DimError("matmul_tn: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    const std::int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    for (std::int64_t p = 0; p < k; ++p)
        for (std::int64_t i = 0; i < m; ++i) {
            const T av = a.at(p, i);
            for (std::int64_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Temporal convolution
// ---------------------------------------------------------------------------

inline std::int64_t conv1d_out_len(std::int64_t t, std::int64_t k, std::int64_t stride,
                                   std::int64_t padding) {
    return (t + 2 * padding - k) / stride + 1;
}

/// Cross-correlation along the time axis.
/// x: [T x C_in], w: [K x C_in x C_out], zero padding on both ends.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride,
                 std::int64_t padding) {
    if (x.rank() != 2 || w.rank() != 3 || x.dim(1) != w.dim(1))
        throw DimError("conv1d: shape mismatch " + shape_str(x.shape()) + " vs " +
                       shape_str(w.shape()));
    if (stride < 1) throw DimError("conv1d: stride must be >= 1, got " + std::to_string(stride));
    if (padding < 0) throw DimError("conv1d: negative padding");
    const std::int64_t t_in = x.dim(0), c_in = x.dim(1);
    const std::int64_t k = w.dim(0), c_out = w.dim(2);
    const std::int64_t t_out = conv1d_out_len(t_in, k, stride, padding);
    if (t_out < 1)
        throw DimError("conv1d: non-positive output length for input " + shape_str(x.shape()) +
                       ", kernel " + shape_str(w.shape()) + ", stride " + std::to_string(stride) +
                       ", padding " + std::to_string(padding));
    Tensor<T> out({t_out, c_out});
    for (std::int64_t to = 0; to < t_out; ++to) {
        const std::int64_t base = to * stride - padding;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const std::int64_t ti = base + kk;
            if (ti < 0 || ti >= t_in) continue;
            for (std::int64_t ci = 0; ci < c_in; ++ci) {
                const T xv = x.at(ti, ci);
                for (std::int64_t co = 0; co < c_out; ++co)
                    out.at(to, co) += xv * w.at(kk, ci, co);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and attention
// ---------------------------------------------------------------------------

/// Per-last-axis layer normalization with affine transform. Two-pass statistics.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() < 1) throw DimError("layernorm: rank-0 input");
    const std::int64_t c = x.shape().back();
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != c || beta.dim(0) != c)
        throw DimError("layernorm: affine shape mismatch, x " + shape_str(x.shape()) +
                       ", gamma " + shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    if (!(eps > T(0))) throw DimError("layernorm: eps must be > 0");
    Tensor<T> out(x.shape());
    const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * c;
        T* yr = out.data().data() + r * c;
        T mean = 0;
        for (std::int64_t j = 0; j < c; ++j) mean += xr[j];
        mean /= T(c);
        T var = 0;
        for (std::int64_t j = 0; j < c; ++j) {
            const T d = xr[j] - mean;
            var += d * d;
        }
        var /= T(c);
        const T rstd = T(1) / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < c; ++j)
            yr[j] = gamma.at(j) * (xr[j] - mean) * rstd + beta.at(j);
    }
    return out;
}

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw DimError("softmax_rows: expected rank 2, got " + shape_str(x.shape()));
    Tensor<T> out(x.shape());
    const std::int64_t n = x.dim(0), c = x.dim(1);
    for (std::int64_t i = 0; i < n; ++i) {
        T mx = x.at(i, 0);
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
        T sum = 0;
        for (std::int64_t j = 0; j < c; ++j) {
            const T e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::int64_t j = 0; j < c; ++j) out.at(i, j) /= sum;
    }
    return out;
}

/// Single-head scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
        k.dim(0) != v.dim(0))
        throw DimError("softmax_attention: shape mismatch q " + shape_str(q.shape()) + ", k " +
                       shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    const T inv_sqrt_d = T(1) / std::sqrt(T(q.dim(1)));
    Tensor<T> scores = scale(matmul_nt(q, k), inv_sqrt_d);
    return matmul(softmax_rows(scores), v);
}

} // namespace r2tal

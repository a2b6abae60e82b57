// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stream reversible kernels: the forward step, its exact inverse, and the
// entry/exit adapters (input duplication, output averaging). A block here is
// any callable Tensor -> Tensor that is a pure function of its input and of
// parameters bound elsewhere.

#pragma once

#include <utility>

#include "r2tal/ops.hpp"
#include "r2tal/tensor.hpp"

namespace r2tal {

template <typename T>
struct RevPairState {
    Tensor<T> z1;
    Tensor<T> z2;
};

/// One block step of the two-stream chain: (s1, s2) -> (F(s1) + s2, s1).
/// Two consecutive steps form the reversible pair below.
template <typename T, typename Block>
std::pair<Tensor<T>, Tensor<T>> rev_step(const Tensor<T>& s1, const Tensor<T>& s2, Block&& f) {
    require_same_shape(s1, s2, "rev_step");
    Tensor<T> fout = f(s1);
    require_same_shape(fout, s2, "rev_step (block output)");
    return {add(fout, s2), s1};
}

/// Inverse of rev_step: given (t1, t2) = (F(s1) + s2, s1), recover (s1, s2).
template <typename T, typename Block>
std::pair<Tensor<T>, Tensor<T>> rev_step_inverse(const Tensor<T>& t1, const Tensor<T>& t2,
                                                 Block&& f) {
    require_same_shape(t1, t2, "rev_step_inverse");
    Tensor<T> fout = f(t2);
    return {t2, sub(t1, fout)};
}

/// Forward through a pair of blocks:
///   y2 = x1, y1 = F1(x1) + x2, z2 = y1, z1 = F2(y1) + y2.
template <typename T, typename Block1, typename Block2>
RevPairState<T> rev_forward_pair(const Tensor<T>& x1, const Tensor<T>& x2, Block1&& f1,
                                 Block2&& f2) {
    auto [y1, y2] = rev_step(x1, x2, std::forward<Block1>(f1));
    auto [z1, z2] = rev_step(y1, y2, std::forward<Block2>(f2));
    return {std::move(z1), std::move(z2)};
}

/// Exact inverse of rev_forward_pair:
///   y1 = z2, y2 = z1 - F2(y1), x1 = y2, x2 = y1 - F1(x1).
/// F1/F2 must be the same functions (parameters included) used forward.
template <typename T, typename Block1, typename Block2>
std::pair<Tensor<T>, Tensor<T>> rev_inverse_pair(const Tensor<T>& z1, const Tensor<T>& z2,
                                                 Block1&& f1, Block2&& f2) {
    auto [y1, y2] = rev_step_inverse(z1, z2, std::forward<Block2>(f2));
    return rev_step_inverse(y1, y2, std::forward<Block1>(f1));
}

/// Entry adapter: both streams start as value copies of the input.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> duplicate_input(const Tensor<T>& x) {
    return {x, x};
}

/// Exit adapter: symmetric average of the two streams.
template <typename T>
Tensor<T> average_outputs(const Tensor<T>& r1, const Tensor<T>& r2) {
    require_same_shape(r1, r2, "average_outputs");
    return scale(add(r1, r2), T(0.5));
}

} // namespace r2tal

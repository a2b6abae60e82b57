// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor container, numerical kernels against reference implementations, and
// the seeded random source.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "r2tal/ops.hpp"
#include "r2tal/rng.hpp"
#include "r2tal/tensor.hpp"

using namespace r2tal;

TEST_CASE("tensor construction and indexing") {
    Tensor<double> t({2, 3});
    REQUIRE(t.rank() == 2);
    REQUIRE(t.numel() == 6);
    REQUIRE(t.bytes() == 48);
    REQUIRE(t.dtype() == DType::f64);
    for (auto v : t.data()) REQUIRE(v == 0.0);

    t.at(1, 2) = 7.0;
    REQUIRE(t.data()[5] == 7.0); // row-major
    Tensor<double> u({2, 2, 2});
    u.at(1, 0, 1) = 3.0;
    REQUIRE(u.data()[5] == 3.0);

    auto f = Tensor<float>::full({3}, 2.5f);
    REQUIRE(f.at(2) == 2.5f);
    REQUIRE(f.dtype() == DType::f32);

    REQUIRE_THROWS_AS(Tensor<double>({2, 0}), DimError);
    REQUIRE_THROWS_AS(Tensor<double>({-1}), DimError);
    REQUIRE_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0, 3.0}), DimError);

    Tensor<double> a({2, 2});
    Tensor<double> b({2, 3});
    REQUIRE(!a.same_shape(b));
    REQUIRE_THROWS_AS(require_same_shape(a, b, "test"), DimError);

    Tensor<double> nf({2}, {1.0, std::nan("")});
    REQUIRE(!nf.all_finite());
    REQUIRE(a.all_finite());
}

TEST_CASE("elementwise kernels") {
    Tensor<double> a({2, 2}, {1, 2, 3, 4});
    Tensor<double> b({2, 2}, {10, 20, 30, 40});
    REQUIRE(add(a, b) == Tensor<double>({2, 2}, {11, 22, 33, 44}));
    REQUIRE(sub(b, a) == Tensor<double>({2, 2}, {9, 18, 27, 36}));
    REQUIRE(mul(a, b) == Tensor<double>({2, 2}, {10, 40, 90, 160}));
    REQUIRE(scale(a, 0.5) == Tensor<double>({2, 2}, {0.5, 1, 1.5, 2}));
    REQUIRE_THROWS_AS(add(a, Tensor<double>({3})), DimError);

    Tensor<double> x({4}, {-2, -0.5, 0, 3});
    REQUIRE(relu(x) == Tensor<double>({4}, {0, 0, 0, 3}));

    // Exact-GELU values: gelu(0) = 0, gelu(1) = 0.5 * (1 + erf(1/sqrt(2))).
    auto g = gelu(Tensor<double>({3}, {0.0, 1.0, -1.0}));
    REQUIRE(g.at(0) == 0.0);
    REQUIRE(oracles::close(g.at(1), 0.8413447460685429, 1e-15));
    REQUIRE(oracles::close(g.at(2), -0.15865525393145707, 1e-15));

    // gelu derivative against a central difference.
    for (double v : {-1.7, -0.3, 0.0, 0.9, 2.4}) {
        const double h = 1e-6;
        auto f = [](double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); };
        const double fd = (f(v + h) - f(v - h)) / (2 * h);
        REQUIRE(oracles::close(gelu_grad_scalar(v), fd, 1e-9));
    }

    Tensor<double> m({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<double> v({3}, {10, 20, 30});
    REQUIRE(add_rowvec(m, v) == Tensor<double>({2, 3}, {11, 22, 33, 14, 25, 36}));
    REQUIRE_THROWS_AS(add_rowvec(m, Tensor<double>({2})), DimError);
}

TEST_CASE("matrix products against reference") {
    Rng rng(11);
    for (auto [m, k, n] : {std::array<std::int64_t, 3>{1, 1, 1},
                           {3, 4, 2},
                           {5, 7, 6},
                           {2, 9, 2}}) {
        auto a = rng.normal_tensor<double>({m, k}, 1.0);
        auto b = rng.normal_tensor<double>({k, n}, 1.0);
        REQUIRE(oracles::max_abs_diff(matmul(a, b), oracles::naive_matmul(a, b)) < 1e-12);

        auto bt = rng.normal_tensor<double>({n, k}, 1.0);
        REQUIRE(oracles::max_abs_diff(matmul_nt(a, bt),
                                      oracles::naive_matmul(a, oracles::transpose(bt))) < 1e-12);

        auto at = rng.normal_tensor<double>({k, m}, 1.0);
        auto b2 = rng.normal_tensor<double>({k, n}, 1.0);
        REQUIRE(oracles::max_abs_diff(matmul_tn(at, b2),
                                      oracles::naive_matmul(oracles::transpose(at), b2)) < 1e-12);
    }
    REQUIRE_THROWS_AS(matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), DimError);
    REQUIRE_THROWS_AS(matmul_nt(Tensor<double>({2, 3}), Tensor<double>({2, 4})), DimError);
    REQUIRE_THROWS_AS(matmul_tn(Tensor<double>({2, 3}), Tensor<double>({3, 2})), DimError);
}

TEST_CASE("conv1d against reference") {
    Rng rng(12);
    struct Case {
        std::int64_t t, c_in, c_out, k, stride, padding;
    };
    for (const Case cs : {Case{8, 2, 3, 3, 1, 1},
                          {8, 2, 3, 3, 2, 1},
                          {10, 4, 4, 5, 1, 2},
                          {6, 1, 2, 1, 1, 0},
                          {9, 3, 2, 3, 3, 0},
                          {7, 2, 2, 3, 1, 0}}) {
        auto x = rng.normal_tensor<double>({cs.t, cs.c_in}, 1.0);
        auto w = rng.normal_tensor<double>({cs.k, cs.c_in, cs.c_out}, 1.0);
        auto got = conv1d(x, w, cs.stride, cs.padding);
        auto ref = oracles::naive_conv1d(x, w, cs.stride, cs.padding);
        REQUIRE(got.shape() == ref.shape());
        REQUIRE(got.dim(0) == conv1d_out_len(cs.t, cs.k, cs.stride, cs.padding));
        REQUIRE(oracles::max_abs_diff(got, ref) < 1e-12);
    }

    // Identity kernel: k=1, stride 1, delta weights.
    Tensor<double> x({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor<double> w({1, 2, 2}, {1, 0, 0, 1});
    REQUIRE(conv1d(x, w, 1, 0) == x);

    REQUIRE_THROWS_AS(conv1d(x, Tensor<double>({3, 3, 2}), 1, 1), DimError);
    REQUIRE_THROWS_AS(conv1d(x, w, 0, 0), DimError);
    REQUIRE_THROWS_AS(conv1d(x, w, 1, -1), DimError);
    // Kernel longer than padded input.
    REQUIRE_THROWS_AS(conv1d(Tensor<double>({2, 1}), Tensor<double>({5, 1, 1}), 1, 0), DimError);
}

TEST_CASE("layernorm against reference") {
    Rng rng(13);
    auto x = rng.normal_tensor<double>({5, 7}, 3.0);
    auto gamma = rng.uniform_tensor<double>({7}, 0.5, 1.5);
    auto beta = rng.normal_tensor<double>({7}, 0.2);
    auto got = layernorm(x, gamma, beta, 1e-5);
    REQUIRE(oracles::max_abs_diff(got, oracles::naive_layernorm(x, gamma, beta, 1e-5)) < 1e-12);

    // gamma=1, beta=0: rows have approximately zero mean, unit variance.
    auto ones = Tensor<double>::full({7}, 1.0);
    auto zeros = Tensor<double>({7});
    auto norm = layernorm(x, ones, zeros, 1e-5);
    for (std::int64_t i = 0; i < 5; ++i) {
        double mean = 0, var = 0;
        for (std::int64_t j = 0; j < 7; ++j) mean += norm.at(i, j);
        mean /= 7;
        for (std::int64_t j = 0; j < 7; ++j) var += (norm.at(i, j) - mean) * (norm.at(i, j) - mean);
        var /= 7;
        REQUIRE(oracles::close(mean, 0.0, 1e-12));
        REQUIRE(oracles::close(var, 1.0, 1e-4)); // eps shrinks variance slightly
    }

    REQUIRE_THROWS_AS(layernorm(x, Tensor<double>({6}), beta, 1e-5), DimError);
    REQUIRE_THROWS_AS(layernorm(x, gamma, beta, 0.0), DimError);
}

TEST_CASE("softmax against reference") {
    Rng rng(14);
    auto x = rng.normal_tensor<double>({6, 5}, 2.0);
    auto got = softmax_rows(x);
    REQUIRE(oracles::max_abs_diff(got, oracles::naive_softmax_rows(x)) < 1e-14);
    for (std::int64_t i = 0; i < 6; ++i) {
        double sum = 0;
        for (std::int64_t j = 0; j < 5; ++j) {
            REQUIRE(got.at(i, j) > 0.0);
            sum += got.at(i, j);
        }
        REQUIRE(oracles::close(sum, 1.0, 1e-12));
    }

    // Max subtraction keeps huge logits finite.
    Tensor<double> big({1, 3}, {1000.0, 1001.0, 999.0});
    auto sb = softmax_rows(big);
    REQUIRE(sb.all_finite());
    REQUIRE(oracles::close(sb.at(0, 0) + sb.at(0, 1) + sb.at(0, 2), 1.0, 1e-12));

    REQUIRE_THROWS_AS(softmax_rows(Tensor<double>({3})), DimError);

    // Attention composition equals the explicit pipeline.
    auto q = rng.normal_tensor<double>({4, 3}, 1.0);
    auto k = rng.normal_tensor<double>({4, 3}, 1.0);
    auto v = rng.normal_tensor<double>({4, 2}, 1.0);
    auto att = softmax_attention(q, k, v);
    auto scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(3.0));
    auto ref = matmul(softmax_rows(scores), v);
    REQUIRE(oracles::max_abs_diff(att, ref) == 0.0);
}

TEST_CASE("seeded rng") {
    // Same seed, same stream.
    Rng a(42), b(42);
    for (int i = 0; i < 16; ++i) REQUIRE(a.next_u64() == b.next_u64());

    // Different labels fork to different streams; forking does not disturb the
    // parent beyond one draw per fork.
    Rng p1(7), p2(7);
    Rng f1 = p1.fork("alpha");
    Rng f2 = p2.fork("beta");
    REQUIRE(f1.next_u64() != f2.next_u64());
    Rng p3(7), p4(7);
    Rng c1 = p3.fork("x");
    Rng c2 = p4.fork("x");
    REQUIRE(c1.next_u64() == c2.next_u64());

    // uniform_int covers both endpoints inclusively.
    Rng r(3);
    bool lo = false, hi = false;
    for (int i = 0; i < 400; ++i) {
        auto v = r.uniform_int(2, 5);
        REQUIRE(v >= 2);
        REQUIRE(v <= 5);
        lo = lo || v == 2;
        hi = hi || v == 5;
    }
    REQUIRE(lo);
    REQUIRE(hi);

    for (int i = 0; i < 100; ++i) {
        const double u = r.uniform(-1.0, 1.0);
        REQUIRE(u >= -1.0);
        REQUIRE(u < 1.0);
    }

    auto t = r.normal_tensor<float>({3, 4}, 2.0);
    REQUIRE(t.shape() == Shape{3, 4});
    REQUIRE(t.all_finite());
    auto u = r.uniform_tensor<double>({8}, 5.0, 6.0);
    for (auto v : u.data()) {
        REQUIRE(v >= 5.0);
        REQUIRE(v < 6.0);
    }
}

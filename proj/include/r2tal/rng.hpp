// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded random source. Every random draw in the project flows through this;
// no wall clock or OS entropy anywhere in the training path.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "r2tal/tensor.hpp"

namespace r2tal {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed ^ 0x9e3779b97f4a7c15ull) {}

    /// Derives an independent child stream from a label, so that adding a
    /// consumer never shifts the draws of another.
    Rng fork(std::string_view label) {
        std::uint64_t h = 1469598103934665603ull; // FNV-1a
        for (char c : label) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        return Rng(h ^ gen_());
    }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }

    /// Inclusive on both ends.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uniform_int_distribution<std::int64_t> d(lo, hi);
        return d(gen_);
    }

    std::uint64_t next_u64() { return gen_(); }

    template <typename T>
    Tensor<T> normal_tensor(Shape shape, double stddev) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(normal(0.0, stddev));
        return t;
    }

    template <typename T>
    Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
        return t;
    }

private:
    std::mt19937_64 gen_;
};

} // namespace r2tal

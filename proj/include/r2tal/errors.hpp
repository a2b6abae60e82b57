// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared across the library.

#pragma once

#include <stdexcept>
#include <string>

namespace r2tal {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape / dimension mismatch between tensors or against an op contract.
class DimError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration (specs, dataset configs, train configs).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Rewiring precondition violated (non-residual input, shape-incompatible block).
class RewireError : public Error {
public:
    using Error::Error;
};

/// Parameter remapping failed (missing or extra names, shape drift).
class RemapError : public Error {
public:
    using Error::Error;
};

/// Tape and parameter store disagree (backward called against the wrong store).
class ConsistencyError : public Error {
public:
    using Error::Error;
};

/// Operation requires f64 but was invoked on another dtype.
class PrecisionError : public Error {
public:
    using Error::Error;
};

/// File or serialization failure (checkpoints, specs, datasets).
class IoError : public Error {
public:
    using Error::Error;
};

/// Spec/params cannot be assembled into a runnable network.
class BuildError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required (NaN gradients, diverged loss).
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace r2tal

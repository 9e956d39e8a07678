#pragma once

#include <stdexcept>
#include <string>

namespace pspde {

/// Mismatched array / grid / matrix sizes.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// A precondition of an operation was violated by the caller.
struct ContractError : std::invalid_argument {
    explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// A frequency or coordinate fell outside the covered range.
struct OutOfRangeError : std::domain_error {
    explicit OutOfRangeError(const std::string& msg) : std::domain_error(msg) {}
};

/// Invalid parameter value (non-positive width, amplitude, ...).
struct ParameterError : std::invalid_argument {
    explicit ParameterError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Numerical breakdown (singular beyond regularization, solver divergence,
/// non-finite values). Carries whatever diagnostics the caller attached.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Configuration file problem; message names the offending key.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem / serialization problem.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pspde

#pragma once

#include <stdexcept>
#include <string>

namespace vlalab {

// Shape/rank/index violations in tensor ops and model wiring.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad run configuration: unknown keys, wrong types, invalid values.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Missing or corrupt input files, hash mismatches.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf encountered where finite values are required (training divergence).
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Environment/generator contract violations (overconstrained scene, stuck expert).
class EnvError : public std::runtime_error {
public:
    explicit EnvError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace vlalab

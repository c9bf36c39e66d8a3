#pragma once

#include <stdexcept>
#include <string>

namespace gknet {

/// Bad or inconsistent configuration (unknown keys, invalid values).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Bad input data (malformed files, dimension mismatches, invalid graphs).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure (singular matrix, divergence, non-finite values).
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gknet

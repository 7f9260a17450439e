#pragma once

#include <stdexcept>
#include <string>

namespace lvt {

// Base for every error this library raises on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes. Message always carries both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration (bad key, divisibility, geometry).
struct ConfigError : Error {
  using Error::Error;
};

// A forward op produced NaN/Inf. Message names the op and input statistics.
struct NumericError : Error {
  using Error::Error;
};

// Elementwise division by exact zero without an epsilon variant.
struct DomainError : Error {
  using Error::Error;
};

// A normalization row collapsed to zero with the epsilon guard disabled.
struct DegenerateRowError : Error {
  std::int64_t row;
  DegenerateRowError(const std::string& msg, std::int64_t row_index)
      : Error(msg), row(row_index) {}
};

// API misuse (backward on a detached tensor, consumed tape, ...).
struct UsageError : Error {
  using Error::Error;
};

// File and serialization failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace lvt

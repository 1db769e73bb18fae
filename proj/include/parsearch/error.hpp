#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace parsearch {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

// A caller broke a documented precondition.
struct ContractError : Error {
  using Error::Error;
};

struct IndexError : Error {
  using Error::Error;
};

// Non-finite value produced by a forward op.
struct NumericError : Error {
  using Error::Error;
};

// Invalid user configuration, detected before any compute.
struct ConfigError : Error {
  using Error::Error;
};

struct ParseError : Error {
  ParseError(std::size_t offset, const std::string& message)
      : Error("parse error at offset " + std::to_string(offset) + ": " + message),
        offset(offset) {}
  std::size_t offset;
};

// Training diverged (NaN/Inf loss or gradient).
struct TrainingAbort : Error {
  using Error::Error;
};

}  // namespace parsearch

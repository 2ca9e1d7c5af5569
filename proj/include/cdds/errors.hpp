#pragma once

#include <stdexcept>
#include <string>

namespace cdds {

// Shape-incompatible operands.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// A forward op produced NaN/Inf. Carries the op name.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& op, const std::string& msg = "produced non-finite values")
      : std::runtime_error("numeric error in op '" + op + "': " + msg), op_name(op) {}
  std::string op_name;
};

// An API precondition was violated by the caller.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// Invalid configuration values.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Bad magic/version in a container file.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

// Structurally valid header but truncated/inconsistent payload.
struct CorruptionError : std::runtime_error {
  explicit CorruptionError(const std::string& msg) : std::runtime_error("corruption error: " + msg) {}
};

// Filesystem-level failure (missing file, unwritable path).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("i/o error: " + msg) {}
};

}  // namespace cdds

#ifndef SPIKMAMBA_ERRORS_HPP
#define SPIKMAMBA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace spikmamba {

// All library errors derive from Error so callers can catch one base type.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes or dimensions do not satisfy an op's contract.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// Invalid configuration value (negative size, zero window, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// Math domain violation (log of non-positive, empty reduction axis, ...).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error("domain error: " + msg) {}
};

// Caller broke an API contract (backward on consumed tape, missing grad, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

// File contents failed to parse; message carries a line number where known.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg) : Error("parse error: " + msg) {}
};

// Well-formed input with semantically invalid values (coordinates out of
// range, label out of range, shape-mismatched checkpoint, ...).
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& msg) : Error("validation error: " + msg) {}
};

// Numerical stability precondition violated (non-negative SSM evolution
// matrix, ...).
class StabilityError : public Error {
 public:
  explicit StabilityError(const std::string& msg) : Error("stability error: " + msg) {}
};

// I/O failure (missing file, short read, corrupt archive).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

}  // namespace spikmamba

#endif  // SPIKMAMBA_ERRORS_HPP

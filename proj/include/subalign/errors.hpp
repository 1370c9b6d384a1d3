#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace subalign {

/// Process exit codes shared by every CLI command.
enum class ExitCode : int {
  ok = 0,
  usage = 2,
  data = 3,
  numerical = 4,
};

/// Root of the library's exception hierarchy. Each subclass knows which
/// exit code the CLI should report for it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  [[nodiscard]] virtual ExitCode exit_code() const noexcept { return ExitCode::usage; }
};

/// Shapes of operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file failed header or payload validation.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  [[nodiscard]] std::size_t offset() const noexcept { return offset_; }
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::data; }

 private:
  std::size_t offset_;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Input data is structurally valid but unusable (labels out of range, empty set, ...).
class DataError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

/// Non-finite values, failed convergence, or a rule with no admissible answer.
class NumericalError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::numerical; }
};

class ConvergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace subalign

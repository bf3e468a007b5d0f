#pragma once

#include <stdexcept>
#include <string>

namespace rstlora {

/// Process exit codes used by the command-line driver.
enum class ExitCode : int {
  kSuccess = 0,
  kConfig = 2,
  kData = 3,
  kDivergence = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Invalid hyperparameters, unknown variant tags, bad experiment files.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::kConfig, what) {}
};

/// Malformed or inconsistent inputs.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::kData, what) {}
};

/// A record could not be decoded. Carries the 1-based line number.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A decoded record violates a ParseOutput invariant.
class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

/// Caller broke a documented precondition (e.g. negative gamma).
class ContractError : public DataError {
 public:
  using DataError::DataError;
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(ExitCode::kDivergence, what) {}
};

}  // namespace rstlora

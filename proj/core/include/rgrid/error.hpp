#pragma once

#include <stdexcept>
#include <string>

namespace rgrid {

/// Base of every error raised by the library. `kind()` is a short stable tag
/// used by the CLI to print machine-parsable failure lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Shape mismatches, invalid structures, bad dimensions.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

/// A structure rejected by a named compatibility rule.
class ValidationError : public Error {
 public:
  ValidationError(std::string rule, const std::string& what)
      : Error("validation", what), rule_(std::move(rule)) {}
  const std::string& rule() const noexcept { return rule_; }

 private:
  std::string rule_;
};

/// API misuse: unknown ids, non-scalar losses, bad arguments.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage", what) {}
};

/// Malformed or truncated input files.
class IngestionError : public Error {
 public:
  explicit IngestionError(const std::string& what) : Error("ingestion", what) {}
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

}  // namespace rgrid

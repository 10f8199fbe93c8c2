#pragma once

#include <stdexcept>
#include <string>

namespace clae {

// Caller broke a precondition (shape mismatch, bad batch size, bad config
// combination).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN or Inf reached an operation boundary.
class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed on-disk data (dataset files).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid run configuration; message names the offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint version or layout does not match what the caller expects.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace clae

#pragma once

#include <stdexcept>
#include <string>

namespace cle {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: shape mismatch, bad hyperparameter, leaking plan.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward without a matching forward cache.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Field-of-view geometry that cannot be realized on the given frame.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Pooling over an empty mask.
class PoolingError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input (manifest, config). Carries the offending line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// Malformed or truncated binary payload (PGM, checkpoint).
class DecodeError : public Error {
 public:
  using Error::Error;
};

/// Metric that is undefined for the given result vector (e.g. AUC on one class).
class MetricError : public Error {
 public:
  using Error::Error;
};

/// A patient appears on both sides of a fold split.
class LeakageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// A cross-validation fold could not be trained or evaluated.
class FoldError : public Error {
 public:
  FoldError(const std::string& what, int fold) : Error("fold " + std::to_string(fold) + ": " + what), fold_(fold) {}
  int fold() const { return fold_; }

 private:
  int fold_;
};

}  // namespace cle

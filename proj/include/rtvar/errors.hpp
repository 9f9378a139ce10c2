#pragma once

#include <stdexcept>
#include <string>

namespace rtvar {

/// Base of all library errors. `kind()` is a short stable token used by the CLI
/// for its machine-parsable error prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Invalid configuration value; `field()` names the offending field.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error("config", field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Correlation matrix not positive definite; `minor()` is the 1-based order of
/// the first leading principal minor that is not strictly positive.
class FactorizationError : public Error {
 public:
  FactorizationError(std::size_t minor, const std::string& message)
      : Error("factorization", message), minor_(minor) {}
  std::size_t minor() const noexcept { return minor_; }

 private:
  std::size_t minor_;
};

class CalibrationError : public Error {
 public:
  CalibrationError(std::size_t required_size, const std::string& message)
      : Error("calibration", message), required_size_(required_size) {}
  /// Smallest calibration-set size that makes the requested rank valid.
  std::size_t required_size() const noexcept { return required_size_; }

 private:
  std::size_t required_size_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& message) : Error("dimension", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

}  // namespace rtvar

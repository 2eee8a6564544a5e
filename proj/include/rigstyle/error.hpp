#pragma once

#include <stdexcept>
#include <string>

namespace rigstyle {

/// Bad input: malformed files, invalid style codes, shape mismatches.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during optimisation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LoadErrorKind {
  io,
  malformed_header,
  row_length_mismatch,
  non_finite_value,
  out_of_band_value,
  invalid_fps,
  invalid_manifest,
};

const char* to_string(LoadErrorKind kind);

class LoadError : public ValidationError {
 public:
  LoadError(LoadErrorKind kind, const std::string& what)
      : ValidationError(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  LoadErrorKind kind() const { return kind_; }

 private:
  LoadErrorKind kind_;
};

}  // namespace rigstyle

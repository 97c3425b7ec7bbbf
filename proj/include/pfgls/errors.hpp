// Exception hierarchy shared by all pfgls components.
#pragma once

#include <stdexcept>
#include <string>

namespace pfgls {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file (bad cell, missing column, ...). Carries the
// 1-based line number in the file when known, 0 otherwise.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, long line = 0) : Error(msg), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// Structurally invalid data: unbalanced panel, duplicate cells,
// non-finite values, invariant violations.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Incompatible matrix/vector shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Cholesky pivot failure. An expected outcome during tuning (drives the
// search for the positive-definiteness bound c), so it carries the
// failing row index for diagnostics.
class NotPositiveDefiniteError : public Error {
 public:
  NotPositiveDefiniteError(const std::string& msg, long row) : Error(msg), row_(row) {}
  long row() const { return row_; }

 private:
  long row_;
};

// Singular or numerically rank-deficient system.
class SingularMatrixError : public Error {
 public:
  SingularMatrixError(const std::string& msg, double smallest_sv)
      : Error(msg), smallest_sv_(smallest_sv) {}
  double smallest_singular_value() const { return smallest_sv_; }

 private:
  double smallest_sv_;
};

// Iterative method hit its iteration cap; carries the best bracket found.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& msg, double lo, double hi)
      : Error(msg), lo_(lo), hi_(hi) {}
  double bracket_low() const { return lo_; }
  double bracket_high() const { return hi_; }

 private:
  double lo_, hi_;
};

// Tuning failure, e.g. empty admissible interval for the threshold constant.
class TuningError : public Error {
 public:
  using Error::Error;
};

// Bad run configuration (CLI flags, config file).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace pfgls

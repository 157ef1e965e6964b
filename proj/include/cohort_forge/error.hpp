#pragma once

#include <stdexcept>
#include <string>

namespace cohort_forge {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input, bad configuration or a missing prerequisite. The CLI maps these
// to exit status 2; every other Error maps to 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : ValidationError(line ? "line " + std::to_string(line) + ": " + what
                             : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A metric that is not defined on its input (e.g. AUROC with one class).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

}  // namespace cohort_forge

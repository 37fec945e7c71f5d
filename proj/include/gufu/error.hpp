#pragma once

#include <stdexcept>
#include <string>

namespace gufu {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a documented range or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Non-finite loss or divergence during training.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Graph structure is not what the algorithm requires.
class StructuralError : public Error {
 public:
  using Error::Error;
};

}  // namespace gufu

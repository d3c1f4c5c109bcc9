#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace calq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (bit width, block size, unknown option).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input outside an operation's domain (zero-norm reference, non power-of-two size).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Singular matrix, non-finite loss, diverged optimizer.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, long index = -1) : Error(what), index_(index) {}
  // Iteration or block index the failure refers to, -1 when not applicable.
  long index() const noexcept { return index_; }

 private:
  long index_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, int iterations) : Error(what), iterations_(iterations) {}
  int iterations() const noexcept { return iterations_; }

 private:
  int iterations_;
};

// Malformed file, version mismatch, truncated bitstream.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace calq

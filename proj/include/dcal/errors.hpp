#pragma once

#include <stdexcept>
#include <string>

namespace dcal {

// Shape disagreement between operands. Messages name both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An argument outside its documented domain (label range, probability, index...).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. calling backward with a loss recorded on another tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A numeric computation produced NaN/Inf where a finite value was required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dcal

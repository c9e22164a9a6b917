#pragma once

#include <stdexcept>
#include <string>

namespace gml {

// Bad input: malformed shapes, configs, files or arguments. CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Numerical failure at run time (non-finite loss, degenerate feature). CLI exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gml

#pragma once

#include <stdexcept>
#include <string>

namespace carcopula {

/// Malformed or out-of-contract input (bad indices, invalid parameters,
/// unparseable files). Maps to CLI exit code 1.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numerical routine failed (factorization, non-convergence, non-finite
/// posterior). Maps to CLI exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace carcopula

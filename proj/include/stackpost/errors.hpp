#pragma once

#include <stdexcept>
#include <string>

namespace stackpost {

// Bad caller input: wrong dimension, negative sigma, empty sample set.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Point outside the domain of a transform.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A value object failed its invariants (non-SPD covariance, off-simplex weights).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed run file; the message names the offending field.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// GP fit could not produce an SPD Gram matrix.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Internal precondition broken by the caller (e.g. stacking without corrected estimates).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace stackpost

#pragma once

#include <stdexcept>
#include <string>

namespace pointpc {

/// Violated precondition: wrong shapes, out-of-range counts, empty inputs.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Mathematical domain violation (log of a non-positive value, zero-norm vector, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Malformed or incompatible file content.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operation invoked on an object in the wrong state (empty memory bank, missing stage).
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A function under numerical evaluation produced a non-finite value.
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

}  // namespace pointpc

#pragma once

#include <stdexcept>
#include <string>

namespace tdciv {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not conform to an operation's rule.
struct ShapeError : Error {
  using Error::Error;
};

// Input outside a primitive's real domain (log of non-positive, exp overflow).
struct DomainError : Error {
  using Error::Error;
};

// API precondition violated (non-scalar backward root, bad config, ...).
struct ContractError : Error {
  using Error::Error;
};

// Malformed input file; carries human-readable location info in the message.
struct ParseError : Error {
  using Error::Error;
};

// Regression design matrix is rank deficient.
struct RankError : Error {
  using Error::Error;
};

// Named entity (graph node, edge) does not exist.
struct LookupError : Error {
  using Error::Error;
};

// First-stage association of the instrument with the treatment is below
// tolerance; carries the step and the offending value.
struct WeakInstrumentError : Error {
  WeakInstrumentError(int time_step, double denominator_value, const std::string& msg)
      : Error(msg), t(time_step), denominator(denominator_value) {}
  int t;
  double denominator;
};

// Non-finite gradient or loss encountered during optimization.
struct NonFiniteError : Error {
  using Error::Error;
};

// Finite-difference probe hit a non-finite function value.
struct ProbeError : Error {
  explicit ProbeError(std::size_t coord, const std::string& msg) : Error(msg), coordinate(coord) {}
  std::size_t coordinate;
};

}  // namespace tdciv

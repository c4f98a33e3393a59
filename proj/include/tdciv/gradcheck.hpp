#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tdciv/tape.hpp"

namespace tdciv::ad {

// A scalar function expressed as a tape program. `build` must construct the
// graph from the flat coordinate vector and report every leaf that consumes a
// slice of it, in coordinate order; the concatenation of those leaves' sizes
// must equal the point's size.
struct BuiltFunction {
  Tape::Id root;
  std::vector<Tape::Id> leaves;
};
using TapeBuilder = std::function<BuiltFunction(Tape&, std::span<const double>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Coordinates where a kink was detected (one-sided slopes disagree); these
  // are skipped rather than scored.
  std::vector<std::size_t> skipped;
  std::vector<std::string> warnings;
};

// Compares the tape gradient against central finite differences coordinate by
// coordinate. Relative error is |analytic - numeric| / max(1, |analytic|,
// |numeric|). Throws ProbeError if any probe evaluates non-finite.
GradCheckResult grad_check(const TapeBuilder& build, std::vector<double> point,
                           double perturbation);

}  // namespace tdciv::ad

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tdciv/panel.hpp"

namespace tdciv::est {

// One ordinary-least-squares problem whose reported quantity is the
// coefficient of the focal column. Controls are row-major [n, k]; an
// intercept column is prepended unless disabled.
struct RegressionDesign {
  std::vector<double> response;  // n
  std::vector<double> focal;     // n
  std::vector<double> controls;  // n * k, row-major
  std::size_t n = 0;
  std::size_t k = 0;
  bool intercept = true;
  // Labels for error messages; sized k or empty (columns then named ctrl_j).
  std::vector<std::string> control_names;

  void validate() const;  // shape consistency, n > k + 2
};

// Coefficient of `focal` in OLS of response on [intercept, focal, controls],
// solved by a rank-revealing orthogonal decomposition. Throws RankError
// naming the first column that is linearly dependent on its predecessors,
// ContractError for shape or sample-size violations.
double partial_coefficient(const RegressionDesign& design);

// Everything one time step feeds to the instrument estimators.
struct CivStep {
  int t = 0;                     // step index (estimates labelled by this)
  std::vector<double> y;         // n: next-step outcome
  std::vector<double> w;         // n: treatment at t
  std::vector<double> s;         // n * ds: candidate instrument column(s)
  std::size_t ds = 1;
  std::vector<double> controls;  // n * k, row-major
  std::size_t k = 0;
  std::vector<std::string> control_names;  // sized k or empty
};

struct AceStep {
  int t = 0;
  double estimate = 0.0;
  std::optional<double> truth;
  std::optional<double> abs_error;  // present iff truth present
};

struct AceReport {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<AceStep> steps;
};

// Ratio of partial coefficients: the instrument's effect on the outcome over
// its effect on the treatment, both given the controls. Requires ds == 1.
// |denominator| below `weak_tol` throws WeakInstrumentError carrying the
// step and the denominator.
AceReport ace_civ_ratio(const std::vector<CivStep>& steps, double weak_tol = 1e-3);

// Classical two-stage least squares: stage one fits the treatment from
// [instrument(s), controls], stage two reports the coefficient of the fitted
// treatment in the outcome regression. Handles ds >= 1; with one instrument
// it equals the ratio form up to solver round-off. Weakness is judged by the
// root-mean-square of the fitted treatment after the controls are partialled
// out.
AceReport ace_two_stage(const std::vector<CivStep>& steps, double weak_tol = 1e-3);

// Covariate-adjusted OLS baseline, no instrumenting: per t the coefficient
// of W_t in a regression of Y_{t+1} on [W_t, X_t, W_{t-1}, Y_t] (the two
// history columns drop out at t = 1 where they do not exist yet). Biased
// whenever treatment and outcome share hidden parents; that gap is the
// benchmark signal.
AceReport ace_naive(const PanelDataset& data);

// The oracle inputs for the instrument estimators: true S_t as instrument
// and controls [Z_{1..t}, U_{1..t}, W_{1..t-1}] from stored latents.
// Conditioning on the hidden-state history including U_t closes every
// back-door and post-conditioning path (the graph checker proves this set
// valid at every t), which is exactly what the learned representation
// approximates. Lagged outcomes are omitted: the outcome equation is a
// deterministic function of [W, Z, U] history, so Y columns would be exactly
// collinear with the rest of the design. Steps run t = 2..horizon (a
// next-step outcome is recorded for every t; t = 1 has no treatment history
// and is not part of the benchmark protocol).
std::vector<CivStep> oracle_civ_steps(const PanelDataset& data);

// Fills per-step truth and absolute errors against a scalar ground truth.
AceReport evaluate(AceReport report, double truth);

// Per (t, method) mean/std of absolute error across replicates. All reports
// must share method and step grid (ContractError otherwise) and carry
// errors (evaluate first).
struct AggregateRow {
  int t = 0;
  std::string method;
  double mean_abs_error = 0.0;
  double std_dev = 0.0;
  std::size_t reps = 0;
};
std::vector<AggregateRow> aggregate(const std::vector<AceReport>& replicates);

// CSV forms: `t,method,estimate,truth,abs_error` (blank optionals) and
// `t,method,mean_abs_error,std,reps`.
void write_report_csv(const AceReport& report, const std::string& path);
void write_aggregate_csv(const std::vector<AggregateRow>& rows, const std::string& path);

}  // namespace tdciv::est

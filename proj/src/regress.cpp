#include "tdciv/regress.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>

#include "tdciv/errors.hpp"

namespace tdciv::est {
namespace {

// Names the first column that lies in the span of its predecessors (by a
// modified Gram-Schmidt sweep). Only called once rank deficiency is already
// established, so it must find one.
std::string offending_column(const Eigen::MatrixXd& m, const std::vector<std::string>& names) {
  Eigen::MatrixXd q(m.rows(), m.cols());
  long filled = 0;
  for (long j = 0; j < m.cols(); ++j) {
    Eigen::VectorXd v = m.col(j);
    const double raw = v.norm();
    for (long r = 0; r < filled; ++r) v -= q.col(r).dot(v) * q.col(r);
    // second pass for numerical hygiene
    for (long r = 0; r < filled; ++r) v -= q.col(r).dot(v) * q.col(r);
    if (v.norm() <= std::max(raw, 1.0) * 1e-10) return names[static_cast<std::size_t>(j)];
    q.col(filled++) = v / v.norm();
  }
  return names.back();  // unreachable in practice
}

struct Factored {
  Eigen::MatrixXd m;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
  std::vector<std::string> names;
};

// Assembles [intercept?, leading columns, controls] and factors it once so
// several responses can reuse the decomposition. Throws RankError naming the
// dependent column when the design is not full rank.
Factored factor_design(const std::vector<double>& leading, std::size_t n_lead,
                       const std::vector<std::string>& lead_names,
                       const std::vector<double>& controls, std::size_t k,
                       const std::vector<std::string>& control_names, std::size_t n,
                       bool intercept) {
  Factored f;
  const std::size_t cols = (intercept ? 1 : 0) + n_lead + k;
  f.m.resize(static_cast<long>(n), static_cast<long>(cols));
  long c = 0;
  if (intercept) {
    f.m.col(c).setOnes();
    f.names.push_back("intercept");
    ++c;
  }
  for (std::size_t j = 0; j < n_lead; ++j, ++c) {
    for (std::size_t i = 0; i < n; ++i)
      f.m(static_cast<long>(i), c) = leading[i * n_lead + j];
    f.names.push_back(lead_names[j]);
  }
  for (std::size_t j = 0; j < k; ++j, ++c) {
    for (std::size_t i = 0; i < n; ++i)
      f.m(static_cast<long>(i), c) = controls[i * k + j];
    f.names.push_back(control_names.empty() ? "ctrl_" + std::to_string(j) : control_names[j]);
  }
  f.qr.compute(f.m);
  if (f.qr.rank() < static_cast<long>(cols))
    throw RankError("regress: collinear design, offending column '" +
                    offending_column(f.m, f.names) + "'");
  return f;
}

Eigen::VectorXd map_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}

void check_step_shapes(const CivStep& st) {
  const std::size_t n = st.y.size();
  if (n == 0 || st.w.size() != n || st.s.size() != n * st.ds ||
      st.controls.size() != n * st.k)
    throw ContractError("regress: step " + std::to_string(st.t) +
                        " arrays are inconsistently sized");
  if (st.ds == 0) throw ContractError("regress: step needs at least one instrument column");
  if (!st.control_names.empty() && st.control_names.size() != st.k)
    throw ContractError("regress: control_names must be empty or sized k");
  if (n <= st.k + st.ds + 2)
    throw ContractError("regress: step " + std::to_string(st.t) +
                        " has too few rows for its design");
}

// Distinguishes "the instrument itself carries no signal" from a genuinely
// broken control matrix: the former is a weak-instrument condition, the
// latter a rank error.
template <typename Fn>
auto classify_instrument_rank(const CivStep& st, Fn&& fn) {
  try {
    return fn();
  } catch (const RankError& e) {
    const std::string msg = e.what();
    if (msg.find("'s_") != std::string::npos)
      throw WeakInstrumentError(st.t, 0.0,
                                "regress: weak instrument at step " + std::to_string(st.t) +
                                    " (instrument column carries no independent signal)");
    throw RankError("regress: step " + std::to_string(st.t) + ": " + msg);
  }
}

std::vector<std::string> instrument_names(std::size_t ds) {
  std::vector<std::string> names;
  for (std::size_t j = 0; j < ds; ++j) names.push_back("s_" + std::to_string(j));
  return names;
}

}  // namespace

void RegressionDesign::validate() const {
  if (response.size() != n || focal.size() != n || controls.size() != n * k)
    throw ContractError("regress: design arrays are inconsistently sized");
  if (n <= k + 2)
    throw ContractError("regress: need n > k + 2, got n = " + std::to_string(n) +
                        ", k = " + std::to_string(k));
}

double partial_coefficient(const RegressionDesign& design) {
  design.validate();
  const Factored f = factor_design(design.focal, 1, {"focal"}, design.controls, design.k,
                                   design.control_names, design.n, design.intercept);
  const Eigen::VectorXd coef = f.qr.solve(map_vec(design.response));
  return coef(design.intercept ? 1 : 0);
}

AceReport ace_civ_ratio(const std::vector<CivStep>& steps, double weak_tol) {
  AceReport report;
  report.method = "civ_ratio";
  for (const CivStep& st : steps) {
    check_step_shapes(st);
    if (st.ds != 1)
      throw ContractError("regress: ratio estimator needs a scalar instrument, step " +
                          std::to_string(st.t) + " has " + std::to_string(st.ds) + " columns");
    const Factored f = classify_instrument_rank(st, [&] {
      return factor_design(st.s, 1, instrument_names(1), st.controls, st.k, st.control_names,
                           st.y.size(), true);
    });
    const double numerator = f.qr.solve(map_vec(st.y))(1);
    const double denominator = f.qr.solve(map_vec(st.w))(1);
    if (std::abs(denominator) < weak_tol)
      throw WeakInstrumentError(st.t, denominator,
                                "regress: weak instrument at step " + std::to_string(st.t) +
                                    " (first-stage coefficient " + format_g17(denominator) + ")");
    report.steps.push_back({st.t, numerator / denominator, std::nullopt, std::nullopt});
  }
  return report;
}

AceReport ace_two_stage(const std::vector<CivStep>& steps, double weak_tol) {
  AceReport report;
  report.method = "civ_2sls";
  for (const CivStep& st : steps) {
    check_step_shapes(st);
    const std::size_t n = st.y.size();
    const Factored stage1 = classify_instrument_rank(st, [&] {
      return factor_design(st.s, st.ds, instrument_names(st.ds), st.controls, st.k,
                           st.control_names, n, true);
    });
    const Eigen::VectorXd fitted = stage1.m * stage1.qr.solve(map_vec(st.w));

    // Weakness: fitted treatment variation left after partialling out the
    // controls. Reuses the no-instrument design.
    const Factored ctrl_only = classify_instrument_rank(st, [&] {
      return factor_design({}, 0, {}, st.controls, st.k, st.control_names, n, true);
    });
    const Eigen::VectorXd resid = fitted - ctrl_only.m * ctrl_only.qr.solve(fitted);
    const double rms = std::sqrt(resid.squaredNorm() / static_cast<double>(n));
    if (rms < weak_tol)
      throw WeakInstrumentError(st.t, rms,
                                "regress: weak instrument at step " + std::to_string(st.t) +
                                    " (instrumented treatment rms " + format_g17(rms) + ")");

    std::vector<double> fitted_v(fitted.data(), fitted.data() + n);
    RegressionDesign stage2;
    stage2.response = st.y;
    stage2.focal = std::move(fitted_v);
    stage2.controls = st.controls;
    stage2.control_names = st.control_names;
    stage2.n = n;
    stage2.k = st.k;
    double est = 0.0;
    try {
      est = partial_coefficient(stage2);
    } catch (const RankError& e) {
      throw RankError("regress: step " + std::to_string(st.t) + ", second stage: " + e.what());
    }
    report.steps.push_back({st.t, est, std::nullopt, std::nullopt});
  }
  return report;
}

AceReport ace_naive(const PanelDataset& data) {
  data.validate();
  AceReport report;
  report.method = "naive";
  const std::size_t n = data.n;
  for (std::size_t t = 1; t <= data.horizon; ++t) {
    const bool with_history = t >= 2;
    const std::size_t k = data.dim_x + (with_history ? 2 : 0);
    RegressionDesign d;
    d.n = n;
    d.k = k;
    d.response.resize(n);
    d.focal.resize(n);
    d.controls.resize(n * k);
    for (std::size_t j = 0; j < data.dim_x; ++j)
      d.control_names.push_back("x_" + std::to_string(j));
    if (with_history) {
      d.control_names.push_back("w_prev");
      d.control_names.push_back("y_prev");
    }
    for (std::size_t i = 0; i < n; ++i) {
      d.response[i] = data.y_at(i, t);
      d.focal[i] = data.w_at(i, t);
      double* row = d.controls.data() + i * k;
      for (std::size_t j = 0; j < data.dim_x; ++j) row[j] = data.x_at(i, t, j);
      if (with_history) {
        row[data.dim_x] = data.w_at(i, t - 1);
        row[data.dim_x + 1] = data.y_at(i, t - 1);
      }
    }
    double est = 0.0;
    try {
      est = partial_coefficient(d);
    } catch (const RankError& e) {
      throw RankError("regress: step " + std::to_string(t) + ": " + e.what());
    }
    report.steps.push_back({static_cast<int>(t), est, std::nullopt, std::nullopt});
  }
  return report;
}

std::vector<CivStep> oracle_civ_steps(const PanelDataset& data) {
  data.validate();
  if (!data.has_s() || !data.has_z() || !data.has_u())
    throw ContractError("regress: oracle estimation needs the stored latents (s, z, u)");
  std::vector<CivStep> steps;
  const std::size_t n = data.n;
  for (std::size_t t = 2; t <= data.horizon; ++t) {
    CivStep st;
    st.t = static_cast<int>(t);
    st.ds = 1;
    st.k = t * data.dim_z + t * data.dim_u + (t - 1);
    st.y.resize(n);
    st.w.resize(n);
    st.s.resize(n);
    st.controls.resize(n * st.k);
    for (std::size_t j = 1; j <= t; ++j)
      for (std::size_t d = 0; d < data.dim_z; ++d)
        st.control_names.push_back("z" + std::to_string(j) + "_" + std::to_string(d));
    for (std::size_t j = 1; j <= t; ++j)
      for (std::size_t d = 0; d < data.dim_u; ++d)
        st.control_names.push_back("u" + std::to_string(j) + "_" + std::to_string(d));
    for (std::size_t j = 1; j < t; ++j) st.control_names.push_back("w" + std::to_string(j));
    for (std::size_t i = 0; i < n; ++i) {
      st.y[i] = data.y_at(i, t);
      st.w[i] = data.w_at(i, t);
      st.s[i] = data.s_at(i, t);
      double* row = st.controls.data() + i * st.k;
      std::size_t c = 0;
      for (std::size_t j = 1; j <= t; ++j)
        for (std::size_t d = 0; d < data.dim_z; ++d) row[c++] = data.z_at(i, j, d);
      for (std::size_t j = 1; j <= t; ++j)
        for (std::size_t d = 0; d < data.dim_u; ++d) row[c++] = data.u_at(i, j, d);
      for (std::size_t j = 1; j < t; ++j) row[c++] = data.w_at(i, j);
    }
    steps.push_back(std::move(st));
  }
  return steps;
}

AceReport evaluate(AceReport report, double truth) {
  for (AceStep& s : report.steps) {
    s.truth = truth;
    s.abs_error = std::abs(s.estimate - truth);
  }
  return report;
}

std::vector<AggregateRow> aggregate(const std::vector<AceReport>& replicates) {
  if (replicates.empty()) throw ContractError("regress: nothing to aggregate");
  const AceReport& first = replicates.front();
  for (const AceReport& r : replicates) {
    if (r.method != first.method)
      throw ContractError("regress: aggregate mixes methods '" + first.method + "' and '" +
                          r.method + "'");
    if (r.steps.size() != first.steps.size())
      throw ContractError("regress: aggregate horizon mismatch");
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
      if (r.steps[i].t != first.steps[i].t)
        throw ContractError("regress: aggregate step-grid mismatch");
      if (!r.steps[i].abs_error)
        throw ContractError("regress: aggregate needs evaluated reports (missing errors)");
    }
  }
  std::vector<AggregateRow> rows;
  const double nr = static_cast<double>(replicates.size());
  for (std::size_t i = 0; i < first.steps.size(); ++i) {
    AggregateRow row;
    row.t = first.steps[i].t;
    row.method = first.method;
    row.reps = replicates.size();
    double mean = 0.0;
    for (const AceReport& r : replicates) mean += *r.steps[i].abs_error;
    mean /= nr;
    double var = 0.0;
    for (const AceReport& r : replicates) {
      const double d = *r.steps[i].abs_error - mean;
      var += d * d;
    }
    row.mean_abs_error = mean;
    row.std_dev = std::sqrt(var / nr);
    rows.push_back(row);
  }
  return rows;
}

void write_report_csv(const AceReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("regress: cannot open '" + path + "' for writing");
  out << "t,method,estimate,truth,abs_error\n";
  for (const AceStep& s : report.steps) {
    out << s.t << "," << report.method << "," << format_g17(s.estimate) << ",";
    if (s.truth) out << format_g17(*s.truth);
    out << ",";
    if (s.abs_error) out << format_g17(*s.abs_error);
    out << "\n";
  }
  if (!out) throw Error("regress: failed writing '" + path + "'");
}

void write_aggregate_csv(const std::vector<AggregateRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("regress: cannot open '" + path + "' for writing");
  out << "t,method,mean_abs_error,std,reps\n";
  for (const AggregateRow& r : rows)
    out << r.t << "," << r.method << "," << format_g17(r.mean_abs_error) << ","
        << format_g17(r.std_dev) << "," << r.reps << "\n";
  if (!out) throw Error("regress: failed writing '" + path + "'");
}

}  // namespace tdciv::est

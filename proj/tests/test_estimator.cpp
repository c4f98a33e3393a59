#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tdciv/errors.hpp"
#include "tdciv/generator.hpp"
#include "tdciv/panel.hpp"
#include "tdciv/regress.hpp"
#include "tdciv/rng.hpp"

using namespace tdciv;
using est::AceReport;
using est::CivStep;
using est::RegressionDesign;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("tdciv_est_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

double mean_abs_err(const AceReport& r, double truth, int t_min = 0) {
  double m = 0.0;
  int c = 0;
  for (const auto& s : r.steps)
    if (s.t >= t_min) {
      m += std::abs(s.estimate - truth);
      ++c;
    }
  REQUIRE(c > 0);
  return m / c;
}

// Simple noisy just-identified IV data: s exogenous, u hidden confounder,
// w = a·s + u + noise, y = ace·w + u + noise. OLS of y on w is biased by u;
// the instrument recovers `ace`.
CivStep make_iv_step(Rng& rng, std::size_t n, double ace, std::size_t k_controls) {
  CivStep st;
  st.t = 2;
  st.ds = 1;
  st.k = k_controls;
  st.y.resize(n);
  st.w.resize(n);
  st.s.resize(n);
  st.controls.resize(n * k_controls);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k_controls; ++j) st.controls[i * k_controls + j] = rng.normal();
    const double s = rng.normal();
    const double u = rng.normal();
    double w = 1.3 * s + u + 0.5 * rng.normal();
    double y = ace * w + u + 0.5 * rng.normal();
    for (std::size_t j = 0; j < k_controls; ++j) {
      w += 0.3 * st.controls[i * k_controls + j];
      y += 0.7 * st.controls[i * k_controls + j];
    }
    st.s[i] = s;
    st.w[i] = w;
    st.y[i] = y;
  }
  return st;
}

}  // namespace

TEST_CASE("partial coefficient: exact fits and intercept handling") {
  RegressionDesign d;
  d.n = 20;
  d.k = 0;
  for (std::size_t i = 0; i < d.n; ++i) {
    const double f = 0.3 * static_cast<double>(i) - 2.0;
    d.focal.push_back(f);
    d.response.push_back(3.0 * f + 7.0);
  }
  CHECK(est::partial_coefficient(d) == doctest::Approx(3.0).epsilon(1e-12));

  // One control with its own exact loading.
  RegressionDesign d2;
  d2.n = 50;
  d2.k = 1;
  Rng rng(5);
  for (std::size_t i = 0; i < d2.n; ++i) {
    const double f = rng.normal();
    const double c = rng.normal();
    d2.focal.push_back(f);
    d2.controls.push_back(c);
    d2.response.push_back(-1.25 * f + 4.0 * c + 0.5);
  }
  CHECK(est::partial_coefficient(d2) == doctest::Approx(-1.25).epsilon(1e-12));
}

TEST_CASE("partial coefficient: independent focal stays near zero") {
  Rng rng(11);
  RegressionDesign d;
  d.n = 100000;
  d.k = 0;
  d.focal.resize(d.n);
  d.response.resize(d.n);
  for (std::size_t i = 0; i < d.n; ++i) {
    d.focal[i] = rng.normal();
    d.response[i] = rng.normal();
  }
  CHECK(std::abs(est::partial_coefficient(d)) <= 0.02);
}

TEST_CASE("partial coefficient matches explicit residualization") {
  Rng rng(3);
  const std::size_t n = 500, k = 3;
  RegressionDesign d;
  d.n = n;
  d.k = k;
  d.focal.resize(n);
  d.response.resize(n);
  d.controls.resize(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) d.controls[i * k + j] = rng.normal();
    d.focal[i] = rng.normal() + d.controls[i * k];
    d.response[i] = 2.0 * d.focal[i] - d.controls[i * k + 1] + rng.normal();
  }

  Eigen::MatrixXd c(n, k + 1);
  c.col(0).setOnes();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) c(static_cast<long>(i), static_cast<long>(j) + 1) =
        d.controls[i * k + j];
  Eigen::VectorXd f(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    f(static_cast<long>(i)) = d.focal[i];
    y(static_cast<long>(i)) = d.response[i];
  }
  const auto qr = c.colPivHouseholderQr();
  const Eigen::VectorXd rf = f - c * qr.solve(f);
  const Eigen::VectorXd ry = y - c * qr.solve(y);
  const double slope = rf.dot(ry) / rf.squaredNorm();

  CHECK(est::partial_coefficient(d) == doctest::Approx(slope).epsilon(1e-10));
}

TEST_CASE("design validation and rank errors name the offender") {
  RegressionDesign d;
  d.n = 4;
  d.k = 2;
  d.focal.assign(4, 1.0);
  d.response.assign(4, 0.0);
  d.controls.assign(8, 0.0);
  CHECK_THROWS_AS(est::partial_coefficient(d), ContractError);  // n too small

  Rng rng(7);
  RegressionDesign d2;
  d2.n = 40;
  d2.k = 2;
  d2.control_names = {"good", "copy_of_focal"};
  for (std::size_t i = 0; i < d2.n; ++i) {
    const double f = rng.normal();
    d2.focal.push_back(f);
    d2.controls.push_back(rng.normal());
    d2.controls.push_back(f);  // duplicates the focal column
    d2.response.push_back(rng.normal());
  }
  CHECK_THROWS_WITH_AS(est::partial_coefficient(d2), doctest::Contains("copy_of_focal"),
                       RankError);

  RegressionDesign d3 = d2;
  d3.response.pop_back();
  CHECK_THROWS_AS(est::partial_coefficient(d3), ContractError);
}

TEST_CASE("noiseless linear chain recovers the effect exactly") {
  CivStep st;
  st.t = 3;
  st.ds = 1;
  st.k = 0;
  for (int i = 0; i < 12; ++i) {
    const double s = 0.25 * i - 1.0;
    st.s.push_back(s);
    st.w.push_back(2.0 * s);
    st.y.push_back(0.5 * (2.0 * s));
  }
  const AceReport r = est::ace_civ_ratio({st});
  REQUIRE(r.steps.size() == 1);
  CHECK(r.steps[0].t == 3);
  CHECK(r.steps[0].estimate == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.method == "civ_ratio");

  const AceReport r2 = est::ace_two_stage({st});
  CHECK(r2.steps[0].estimate == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r2.method == "civ_2sls");
}

TEST_CASE("instrument beats confounded OLS on noisy data") {
  Rng rng(21);
  const CivStep st = make_iv_step(rng, 20000, 0.5, 2);
  const AceReport iv = est::ace_civ_ratio({st});
  CHECK(std::abs(iv.steps[0].estimate - 0.5) < 0.03);

  RegressionDesign ols;
  ols.n = st.y.size();
  ols.k = st.k;
  ols.response = st.y;
  ols.focal = st.w;
  ols.controls = st.controls;
  const double naive = est::partial_coefficient(ols);
  CHECK(std::abs(naive - 0.5) > 0.2);  // u pushes the OLS coefficient up
}

TEST_CASE("ratio and two-stage forms agree on random designs") {
  Rng rng(2026);
  int tested = 0;
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t k = rep % 5;
    const CivStep st = make_iv_step(rng, 300, -0.7 + 0.05 * rep, k);
    const AceReport a = est::ace_civ_ratio({st});
    const AceReport b = est::ace_two_stage({st});
    CHECK(a.steps[0].estimate == doctest::Approx(b.steps[0].estimate).epsilon(1e-8));
    ++tested;
  }
  CHECK(tested == 60);
}

TEST_CASE("ratio estimate is invariant to affine rescaling of the instrument") {
  Rng rng(9);
  CivStep st = make_iv_step(rng, 5000, 0.5, 3);
  const double base = est::ace_civ_ratio({st}).steps[0].estimate;
  CivStep scaled = st;
  for (double& v : scaled.s) v = 10.0 * v - 3.0;
  const double after = est::ace_civ_ratio({scaled}).steps[0].estimate;
  CHECK(after == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("weak and absent instruments fail loudly") {
  Rng rng(13);
  // Constant instrument: no independent signal at all.
  CivStep flat = make_iv_step(rng, 400, 0.5, 1);
  for (double& v : flat.s) v = 2.0;
  CHECK_THROWS_AS(est::ace_civ_ratio({flat}), WeakInstrumentError);
  CHECK_THROWS_AS(est::ace_two_stage({flat}), WeakInstrumentError);

  // Constant treatment: zero first-stage coefficient, reported with the step.
  CivStep fixed_w = make_iv_step(rng, 400, 0.5, 1);
  fixed_w.t = 6;
  for (double& v : fixed_w.w) v = 1.0;
  try {
    est::ace_civ_ratio({fixed_w});
    FAIL("expected WeakInstrumentError");
  } catch (const WeakInstrumentError& e) {
    CHECK(e.t == 6);
    CHECK(std::abs(e.denominator) < 1e-10);
    CHECK(std::string(e.what()).find("step 6") != std::string::npos);
  }
  CHECK_THROWS_AS(est::ace_two_stage({fixed_w}), WeakInstrumentError);

  // Instrument orthogonal to the treatment: first-stage coefficient is zero
  // regardless of the instrument's own scale.
  CivStep irrelevant = make_iv_step(rng, 400, 0.5, 0);
  {
    const auto n = static_cast<long>(irrelevant.w.size());
    Eigen::MatrixXd c(n, 2);
    c.col(0).setOnes();
    for (long i = 0; i < n; ++i) c(i, 1) = irrelevant.w[static_cast<std::size_t>(i)];
    Eigen::VectorXd raw(n);
    for (long i = 0; i < n; ++i) raw(i) = rng.normal();
    const Eigen::VectorXd resid = raw - c * c.colPivHouseholderQr().solve(raw);
    for (long i = 0; i < n; ++i) irrelevant.s[static_cast<std::size_t>(i)] = resid(i);
  }
  CHECK_THROWS_AS(est::ace_civ_ratio({irrelevant}), WeakInstrumentError);
}

TEST_CASE("over-identified two-stage accepts several instrument columns") {
  Rng rng(31);
  const std::size_t n = 4000;
  CivStep st;
  st.t = 2;
  st.ds = 2;
  st.k = 1;
  st.y.resize(n);
  st.w.resize(n);
  st.s.resize(n * 2);
  st.controls.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s0 = rng.normal(), s1 = rng.normal(), c = rng.normal(), u = rng.normal();
    st.s[i * 2] = s0;
    st.s[i * 2 + 1] = s1;
    st.controls[i] = c;
    st.w[i] = s0 + 0.5 * s1 + 0.4 * c + u + 0.3 * rng.normal();
    st.y[i] = 0.5 * st.w[i] + 0.8 * c + u + 0.3 * rng.normal();
  }
  const AceReport r = est::ace_two_stage({st});
  CHECK(std::abs(r.steps[0].estimate - 0.5) < 0.05);
  CHECK_THROWS_AS(est::ace_civ_ratio({st}), ContractError);  // ratio needs scalar S
}

TEST_CASE("collinear control matrices are reported with step and column") {
  Rng rng(17);
  CivStep st = make_iv_step(rng, 200, 0.5, 2);
  st.t = 4;
  st.control_names = {"a", "b"};
  for (std::size_t i = 0; i < 200; ++i) st.controls[i * 2 + 1] = 3.0 * st.controls[i * 2];
  try {
    est::ace_civ_ratio({st});
    FAIL("expected RankError");
  } catch (const RankError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 4") != std::string::npos);
    CHECK(msg.find("'b'") != std::string::npos);
  }
}

TEST_CASE("estimates converge with sample size on noisy instrument data") {
  double prev = 1e9;
  for (const std::size_t n : {2000u, 4000u, 8000u}) {
    double err = 0.0;
    for (int rep = 0; rep < 6; ++rep) {
      Rng rng(1000 + 17 * rep + static_cast<int>(n));
      const CivStep st = make_iv_step(rng, n, 0.5, 2);
      err += std::abs(est::ace_civ_ratio({st}).steps[0].estimate - 0.5);
    }
    err /= 6.0;
    CHECK(err <= prev + 0.005);  // noise slack on a decreasing trend
    prev = err;
  }
  CHECK(prev < 0.03);
}

TEST_CASE("oracle steps from the generator recover the stamped effect") {
  sim::GenConfig cfg;
  cfg.n_samples = 2000;
  cfg.horizon = 6;
  cfg.seed = 8;
  const PanelDataset data = sim::generate_dataset(cfg);
  const auto steps = est::oracle_civ_steps(data);
  REQUIRE(steps.size() == 5);  // t = 2..6
  CHECK(steps.front().t == 2);
  CHECK(steps.back().t == 6);
  for (const auto& st : steps) {
    const auto t = static_cast<std::size_t>(st.t);
    CHECK(st.k == t * data.dim_z + t * data.dim_u + (t - 1));
    CHECK(st.control_names.size() == st.k);
  }
  CHECK(steps[0].control_names.front() == "z1_0");
  CHECK(steps[0].control_names.back() == "w1");

  const AceReport ratio = est::ace_civ_ratio(steps);
  const AceReport tsls = est::ace_two_stage(steps);
  REQUIRE(data.true_ace.has_value());
  CHECK(mean_abs_err(ratio, *data.true_ace) <= 0.05);
  for (std::size_t i = 0; i < ratio.steps.size(); ++i)
    CHECK(ratio.steps[i].estimate == doctest::Approx(tsls.steps[i].estimate).epsilon(1e-8));

  sim::GenConfig bare = cfg;
  bare.keep_latents = false;
  CHECK_THROWS_AS(est::oracle_civ_steps(sim::generate_dataset(bare)), ContractError);
}

TEST_CASE("irrelevant extra control barely moves the oracle estimate") {
  sim::GenConfig cfg;
  cfg.n_samples = 8000;
  cfg.horizon = 5;
  cfg.seed = 2;
  const PanelDataset data = sim::generate_dataset(cfg);
  auto steps = est::oracle_civ_steps(data);
  const AceReport base = est::ace_civ_ratio(steps);

  Rng rng(555);
  for (auto& st : steps) {
    const std::size_t n = st.y.size();
    std::vector<double> widened(n * (st.k + 1));
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(st.controls.begin() + static_cast<long>(i * st.k),
                st.controls.begin() + static_cast<long>((i + 1) * st.k),
                widened.begin() + static_cast<long>(i * (st.k + 1)));
      widened[i * (st.k + 1) + st.k] = rng.normal();
    }
    st.controls = std::move(widened);
    st.control_names.push_back("noise");
    st.k += 1;
  }
  const AceReport wide = est::ace_civ_ratio(steps);
  for (std::size_t i = 0; i < base.steps.size(); ++i)
    CHECK(std::abs(base.steps[i].estimate - wide.steps[i].estimate) <= 0.01);
}

TEST_CASE("naive estimator: consistent without confounding, biased with it") {
  sim::GenConfig clean;
  clean.n_samples = 8000;
  clean.seed = 1;
  clean.rho_u = 0.0;  // hidden state no longer touches the outcome
  const AceReport unconfounded = est::ace_naive(sim::generate_dataset(clean));
  for (const auto& s : unconfounded.steps) CHECK(std::abs(s.estimate - 0.5) <= 0.05);

  sim::GenConfig dirty;
  dirty.n_samples = 8000;
  dirty.seed = 1;
  const PanelDataset confounded = sim::generate_dataset(dirty);
  const double naive_err = mean_abs_err(est::ace_naive(confounded), 0.5, 2);
  const double oracle_err = mean_abs_err(est::ace_civ_ratio(est::oracle_civ_steps(confounded)), 0.5);
  CHECK(naive_err >= 0.08);
  CHECK(oracle_err <= 0.05);
  CHECK(naive_err > 10.0 * oracle_err);
}

TEST_CASE("naive estimator flags a degenerate treatment column") {
  sim::GenConfig cfg;
  cfg.n_samples = 200;
  cfg.horizon = 3;
  cfg.seed = 4;
  PanelDataset d = sim::generate_dataset(cfg);
  for (std::size_t i = 0; i < d.n; ++i) d.w_at(i, 2) = 0.0;  // no variation at t = 2
  try {
    est::ace_naive(d);
    FAIL("expected RankError");
  } catch (const RankError& e) {
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
}

TEST_CASE("evaluation fills errors; aggregation reduces replicates") {
  AceReport r;
  r.method = "civ_ratio";
  r.steps = {{2, 0.48, std::nullopt, std::nullopt}, {3, 0.55, std::nullopt, std::nullopt}};
  const AceReport e = est::evaluate(r, 0.5);
  CHECK(*e.steps[0].abs_error == doctest::Approx(0.02));
  CHECK(*e.steps[1].abs_error == doctest::Approx(0.05));
  CHECK(*e.steps[0].truth == 0.5);

  AceReport a = r, b = r;
  a.steps[0].estimate = 0.4;
  a.steps[1].estimate = 0.7;
  b.steps[0].estimate = 0.6;
  b.steps[1].estimate = 0.5;
  const auto rows = est::aggregate({est::evaluate(a, 0.5), est::evaluate(b, 0.5)});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].t == 2);
  CHECK(rows[0].mean_abs_error == doctest::Approx(0.1));
  CHECK(rows[0].std_dev == doctest::Approx(0.0));
  CHECK(rows[1].mean_abs_error == doctest::Approx(0.1));
  CHECK(rows[1].std_dev == doctest::Approx(0.1));
  CHECK(rows[0].reps == 2);

  AceReport other = est::evaluate(a, 0.5);
  other.method = "naive";
  CHECK_THROWS_AS(est::aggregate({est::evaluate(a, 0.5), other}), ContractError);
  CHECK_THROWS_AS(est::aggregate({a}), ContractError);  // not evaluated
  AceReport short_grid = est::evaluate(a, 0.5);
  short_grid.steps.pop_back();
  CHECK_THROWS_AS(est::aggregate({est::evaluate(a, 0.5), short_grid}), ContractError);
  CHECK_THROWS_AS(est::aggregate({}), ContractError);
}

TEST_CASE("report and aggregate CSV layouts") {
  AceReport r;
  r.method = "civ_ratio";
  r.steps = {{2, 0.5, std::nullopt, std::nullopt}};
  const std::string p1 = temp_path("report.csv");
  est::write_report_csv(r, p1);
  CHECK(slurp(p1) == "t,method,estimate,truth,abs_error\n2,civ_ratio,0.5,,\n");

  const AceReport e = est::evaluate(r, 0.5);
  est::write_report_csv(e, p1);
  CHECK(slurp(p1) == "t,method,estimate,truth,abs_error\n2,civ_ratio,0.5,0.5,0\n");
  std::remove(p1.c_str());

  const std::string p2 = temp_path("agg.csv");
  est::write_aggregate_csv({{2, "naive", 0.125, 0.25, 30}}, p2);
  CHECK(slurp(p2) == "t,method,mean_abs_error,std,reps\n2,naive,0.125,0.25,30\n");
  std::remove(p2.c_str());
}

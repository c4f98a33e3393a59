#include "tdciv/pipeline.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>
#include <utility>

#include "json.hpp"
#include "tdciv/errors.hpp"
#include "tdciv/rng.hpp"

namespace tdciv::pipe {

using nlohmann::json;

namespace {

constexpr double kConstantSd = 1e-12;

// Seed streams: three per replicate so the data draw, the weight
// initialization, and the training loop (shuffle/reparam/dropout) never share
// a generator state across roles or replicates.
std::uint64_t data_seed(std::uint64_t master, std::size_t rep) {
  return derive_seed(master, 3 * static_cast<std::uint64_t>(rep));
}
std::uint64_t init_seed(std::uint64_t master, std::size_t rep) {
  return derive_seed(master, 3 * static_cast<std::uint64_t>(rep) + 1);
}
std::uint64_t optim_seed(std::uint64_t master, std::size_t rep) {
  return derive_seed(master, 3 * static_cast<std::uint64_t>(rep) + 2);
}

[[noreturn]] void bad_config(const std::string& msg) { throw ParseError("config: " + msg); }

void check_keys(const json& obj, const std::string& section,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) bad_config("section '" + section + "' must be a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      std::string msg = "unknown key '" + item.key() + "' in section '" + section + "'";
      if (section == "generate" && item.key() == "seed")
        msg += " (replicate seeds derive from the top-level seed)";
      if (section == "(top level)" && item.key() == "jobs")
        msg += " (worker count is the --jobs command-line flag)";
      bad_config(msg);
    }
  }
}

double want_double(const json& v, const std::string& where) {
  if (!v.is_number()) bad_config("'" + where + "' must be a number");
  return v.get<double>();
}

std::size_t want_size(const json& v, const std::string& where) {
  if (!v.is_number_unsigned()) bad_config("'" + where + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

std::uint64_t want_u64(const json& v, const std::string& where) {
  if (!v.is_number_unsigned()) bad_config("'" + where + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

bool want_bool(const json& v, const std::string& where) {
  if (!v.is_boolean()) bad_config("'" + where + "' must be true or false");
  return v.get<bool>();
}

std::string want_string(const json& v, const std::string& where) {
  if (!v.is_string()) bad_config("'" + where + "' must be a string");
  return v.get<std::string>();
}

bool known_method(const std::string& m) { return m == "tdciv" || m == "naive" || m == "oracle"; }

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw ContractError("write to '" + path + "' failed");
}

std::string rep_dir_name(std::size_t rep) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rep_%03zu", rep);
  return buf;
}

struct ZScored {
  std::vector<double> v;
  bool constant = false;
};

ZScored z_score(std::vector<double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  double sd = std::sqrt(var / static_cast<double>(v.size()));
  if (sd < kConstantSd) return {std::move(v), true};
  for (double& x : v) x = (x - mean) / sd;
  return {std::move(v), false};
}

// First-stage strength of the instrument block for one step: F statistic of
// the instrument columns in the regression of w on [1, controls, instrument].
double first_stage_f(const est::CivStep& step) {
  const auto n = static_cast<Eigen::Index>(step.w.size());
  const auto k = static_cast<Eigen::Index>(step.k);
  const auto ds = static_cast<Eigen::Index>(step.ds);
  Eigen::MatrixXd c(n, k + 1);
  c.col(0).setOnes();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) c(i, j + 1) = step.controls[i * k + j];
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) w(i) = step.w[i];
  Eigen::MatrixXd s(n, ds);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < ds; ++j) s(i, j) = step.s[i * ds + j];

  auto qr = c.colPivHouseholderQr();
  Eigen::VectorXd rw = w - c * qr.solve(w);
  Eigen::MatrixXd rs = s - c * qr.solve(s);

  Eigen::VectorXd coef = rs.colPivHouseholderQr().solve(rw);
  Eigen::VectorXd fitted = rs * coef;
  const double explained = fitted.squaredNorm();
  const double rss = (rw - fitted).squaredNorm();
  const double dof = static_cast<double>(n - k - 1 - ds);
  if (dof <= 0.0) return 0.0;
  if (explained <= 0.0) return 0.0;
  if (rss <= 0.0) return 1e18;  // numerically exact first stage
  return (explained / static_cast<double>(ds)) / (rss / dof);
}

est::AceReport estimate_steps(const std::vector<est::CivStep>& steps,
                              const EstimateOptions& opts, std::vector<int>& dropped_t) {
  est::AceReport report;
  for (const auto& step : steps) {
    std::vector<est::CivStep> one{step};
    try {
      est::AceReport r = opts.estimator == "ratio" ? est::ace_civ_ratio(one, opts.weak_tolerance)
                                                   : est::ace_two_stage(one, opts.weak_tolerance);
      report.steps.push_back(r.steps.at(0));
    } catch (const WeakInstrumentError&) {
      dropped_t.push_back(step.t);
    } catch (const RankError&) {
      dropped_t.push_back(step.t);
    }
  }
  return report;
}

}  // namespace

void EstimateOptions::validate() const {
  if (methods.empty()) throw ContractError("estimate: at least one method is required");
  for (const auto& m : methods) {
    if (!known_method(m))
      throw ContractError("estimate: unknown method '" + m +
                          "' (expected tdciv, naive, or oracle)");
    if (std::count(methods.begin(), methods.end(), m) != 1)
      throw ContractError("estimate: method '" + m + "' listed more than once");
  }
  if (estimator != "2sls" && estimator != "ratio")
    throw ContractError("estimate: unknown estimator '" + estimator +
                        "' (expected 2sls or ratio)");
  if (!(weak_tolerance > 0.0)) throw ContractError("estimate: weak_tolerance must be positive");
  if (!(min_first_stage_f >= 0.0))
    throw ContractError("estimate: min_first_stage_f must be non-negative");
}

void RunConfig::validate() const {
  gen.validate();
  estimate.validate();
  {
    // Dims marked 0 resolve against the dataset later; stand-ins keep the
    // remaining model checks (widths, rates, probabilities) active here.
    vae::ModelConfig mc = model;
    if (mc.dim_x == 0) mc.dim_x = 1;
    if (mc.dim_z == 0) mc.dim_z = 1;
    mc.validate();
  }
  if (train.batch_size == 0) throw ContractError("train: batch_size must be positive");
  if (reps == 0) throw ContractError("reps must be positive");
  if (jobs == 0) throw ContractError("jobs must be positive");
  const auto& ms = estimate.methods;
  const bool wants_oracle = std::find(ms.begin(), ms.end(), "oracle") != ms.end();
  if (wants_oracle && !gen.keep_latents)
    throw ContractError("oracle estimates need generate.keep_latents = true");
  const bool wants_tdciv = std::find(ms.begin(), ms.end(), "tdciv") != ms.end();
  if (wants_tdciv && estimate.estimator == "ratio" && model.dim_s != 1)
    throw ContractError("ratio estimator requires model.dim_s == 1");
}

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    bad_config(std::string("invalid JSON: ") + e.what());
  }
  check_keys(root, "(top level)", {"generate", "model", "train", "estimate", "reps", "seed"});

  RunConfig cfg;
  // Pipeline defaults for the model dims are "match the data".
  cfg.model.dim_x = 0;
  cfg.model.dim_z = 0;

  if (root.contains("generate")) {
    const json& g = root.at("generate");
    check_keys(g, "generate",
               {"n_samples", "horizon", "p_order", "dim_x", "dim_u", "rho_w", "rho_z", "rho_u",
                "noise_sd_x", "noise_sd_u", "noise_sd_s", "init_sd", "proxy_injection",
                "proxy_noise_sd", "standardize_logits", "keep_latents"});
    if (g.contains("n_samples")) cfg.gen.n_samples = want_size(g.at("n_samples"), "generate.n_samples");
    if (g.contains("horizon")) cfg.gen.horizon = want_size(g.at("horizon"), "generate.horizon");
    if (g.contains("p_order")) cfg.gen.p_order = want_size(g.at("p_order"), "generate.p_order");
    if (g.contains("dim_x")) cfg.gen.dim_x = want_size(g.at("dim_x"), "generate.dim_x");
    if (g.contains("dim_u")) cfg.gen.dim_u = want_size(g.at("dim_u"), "generate.dim_u");
    if (g.contains("rho_w")) cfg.gen.rho_w = want_double(g.at("rho_w"), "generate.rho_w");
    if (g.contains("rho_z")) cfg.gen.rho_z = want_double(g.at("rho_z"), "generate.rho_z");
    if (g.contains("rho_u")) cfg.gen.rho_u = want_double(g.at("rho_u"), "generate.rho_u");
    if (g.contains("noise_sd_x"))
      cfg.gen.noise_sd_x = want_double(g.at("noise_sd_x"), "generate.noise_sd_x");
    if (g.contains("noise_sd_u"))
      cfg.gen.noise_sd_u = want_double(g.at("noise_sd_u"), "generate.noise_sd_u");
    if (g.contains("noise_sd_s"))
      cfg.gen.noise_sd_s = want_double(g.at("noise_sd_s"), "generate.noise_sd_s");
    if (g.contains("init_sd")) cfg.gen.init_sd = want_double(g.at("init_sd"), "generate.init_sd");
    if (g.contains("proxy_injection"))
      cfg.gen.proxy_injection = want_bool(g.at("proxy_injection"), "generate.proxy_injection");
    if (g.contains("proxy_noise_sd"))
      cfg.gen.proxy_noise_sd = want_double(g.at("proxy_noise_sd"), "generate.proxy_noise_sd");
    if (g.contains("standardize_logits"))
      cfg.gen.standardize_logits =
          want_bool(g.at("standardize_logits"), "generate.standardize_logits");
    if (g.contains("keep_latents"))
      cfg.gen.keep_latents = want_bool(g.at("keep_latents"), "generate.keep_latents");
  }

  if (root.contains("model")) {
    const json& m = root.at("model");
    check_keys(m, "model",
               {"dim_s", "dim_z", "hidden", "fc_hidden", "alpha", "beta", "kl_s_weight",
                "keep_prob", "binary_outcome", "init_sd"});
    if (m.contains("dim_s")) cfg.model.dim_s = want_size(m.at("dim_s"), "model.dim_s");
    if (m.contains("dim_z")) cfg.model.dim_z = want_size(m.at("dim_z"), "model.dim_z");
    if (m.contains("hidden")) cfg.model.hidden = want_size(m.at("hidden"), "model.hidden");
    if (m.contains("fc_hidden"))
      cfg.model.fc_hidden = want_size(m.at("fc_hidden"), "model.fc_hidden");
    if (m.contains("alpha")) cfg.model.alpha = want_double(m.at("alpha"), "model.alpha");
    if (m.contains("beta")) cfg.model.beta = want_double(m.at("beta"), "model.beta");
    if (m.contains("kl_s_weight"))
      cfg.model.kl_s_weight = want_double(m.at("kl_s_weight"), "model.kl_s_weight");
    if (m.contains("keep_prob"))
      cfg.model.keep_prob = want_double(m.at("keep_prob"), "model.keep_prob");
    if (m.contains("binary_outcome"))
      cfg.model.binary_outcome = want_bool(m.at("binary_outcome"), "model.binary_outcome");
    if (m.contains("init_sd")) cfg.model.init_sd = want_double(m.at("init_sd"), "model.init_sd");
  }

  if (root.contains("train")) {
    const json& t = root.at("train");
    check_keys(t, "train", {"epochs", "batch_size", "learning_rate"});
    if (t.contains("epochs")) cfg.train.epochs = want_size(t.at("epochs"), "train.epochs");
    if (t.contains("batch_size"))
      cfg.train.batch_size = want_size(t.at("batch_size"), "train.batch_size");
    if (t.contains("learning_rate"))
      cfg.train.learning_rate = want_double(t.at("learning_rate"), "train.learning_rate");
  }

  if (root.contains("estimate")) {
    const json& e = root.at("estimate");
    check_keys(e, "estimate", {"methods", "estimator", "weak_tolerance", "min_first_stage_f"});
    if (e.contains("methods")) {
      const json& arr = e.at("methods");
      if (!arr.is_array()) bad_config("'estimate.methods' must be an array of strings");
      cfg.estimate.methods.clear();
      for (const auto& item : arr)
        cfg.estimate.methods.push_back(want_string(item, "estimate.methods[]"));
    }
    if (e.contains("estimator"))
      cfg.estimate.estimator = want_string(e.at("estimator"), "estimate.estimator");
    if (e.contains("weak_tolerance"))
      cfg.estimate.weak_tolerance = want_double(e.at("weak_tolerance"), "estimate.weak_tolerance");
    if (e.contains("min_first_stage_f"))
      cfg.estimate.min_first_stage_f =
          want_double(e.at("min_first_stage_f"), "estimate.min_first_stage_f");
  }

  if (root.contains("reps")) cfg.reps = want_size(root.at("reps"), "reps");
  if (root.contains("seed")) cfg.seed = want_u64(root.at("seed"), "seed");

  try {
    cfg.validate();
  } catch (const ContractError& e) {
    bad_config(e.what());
  }
  return cfg;
}

RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string render_run_config(const RunConfig& cfg) {
  json j;
  j["generate"] = {{"n_samples", cfg.gen.n_samples},
                   {"horizon", cfg.gen.horizon},
                   {"p_order", cfg.gen.p_order},
                   {"dim_x", cfg.gen.dim_x},
                   {"dim_u", cfg.gen.dim_u},
                   {"rho_w", cfg.gen.rho_w},
                   {"rho_z", cfg.gen.rho_z},
                   {"rho_u", cfg.gen.rho_u},
                   {"noise_sd_x", cfg.gen.noise_sd_x},
                   {"noise_sd_u", cfg.gen.noise_sd_u},
                   {"noise_sd_s", cfg.gen.noise_sd_s},
                   {"init_sd", cfg.gen.init_sd},
                   {"proxy_injection", cfg.gen.proxy_injection},
                   {"proxy_noise_sd", cfg.gen.proxy_noise_sd},
                   {"standardize_logits", cfg.gen.standardize_logits},
                   {"keep_latents", cfg.gen.keep_latents}};
  j["model"] = {{"dim_s", cfg.model.dim_s},       {"dim_z", cfg.model.dim_z},
                {"hidden", cfg.model.hidden},     {"fc_hidden", cfg.model.fc_hidden},
                {"alpha", cfg.model.alpha},       {"beta", cfg.model.beta},
                {"kl_s_weight", cfg.model.kl_s_weight},
                {"keep_prob", cfg.model.keep_prob}, {"binary_outcome", cfg.model.binary_outcome},
                {"init_sd", cfg.model.init_sd}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate}};
  j["estimate"] = {{"methods", cfg.estimate.methods},
                   {"estimator", cfg.estimate.estimator},
                   {"weak_tolerance", cfg.estimate.weak_tolerance},
                   {"min_first_stage_f", cfg.estimate.min_first_stage_f}};
  j["reps"] = cfg.reps;
  j["seed"] = cfg.seed;
  return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
  const std::string text = render_run_config(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : text) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t replicate_seed(const RunConfig& cfg, std::size_t rep) {
  return data_seed(cfg.seed, rep);
}

std::uint64_t model_init_seed(const RunConfig& cfg, std::size_t rep) {
  return init_seed(cfg.seed, rep);
}

std::uint64_t train_loop_seed(const RunConfig& cfg, std::size_t rep) {
  return optim_seed(cfg.seed, rep);
}

vae::ModelConfig resolve_model_config(const RunConfig& cfg, const PanelDataset& data) {
  vae::ModelConfig mc = cfg.model;
  mc.dim_x = data.dim_x;
  if (mc.dim_z == 0) mc.dim_z = data.dim_x;
  mc.validate();
  return mc;
}

LearnedSteps learned_civ_steps(const PanelDataset& data, const vae::LatentPath& latents,
                               double min_first_stage_f) {
  data.validate();
  if (latents.n != data.n || latents.horizon != data.horizon)
    throw ContractError("learned_civ_steps: representation shape does not match the dataset");
  if (latents.dim_s == 0) throw ContractError("learned_civ_steps: empty representation");
  const std::size_t n = data.n;

  LearnedSteps out;
  for (std::size_t t = 2; t <= data.horizon; ++t) {
    est::CivStep step;
    step.t = static_cast<int>(t);
    step.y.resize(n);
    step.w.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      step.y[i] = data.y_at(i, t);
      step.w[i] = data.w_at(i, t);
    }

    // Instrument: z-scored posterior means of S_t. A constant learned channel
    // has no first stage at all; the step is skipped outright.
    bool degenerate = false;
    std::vector<std::vector<double>> s_cols;
    for (std::size_t d = 0; d < latents.dim_s; ++d) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = latents.s_mean_at(i, t, d);
      ZScored zs = z_score(std::move(col));
      if (zs.constant) {
        degenerate = true;
        break;
      }
      s_cols.push_back(std::move(zs.v));
    }
    if (degenerate) {
      out.skipped_t.push_back(step.t);
      continue;
    }
    step.ds = s_cols.size();
    step.s.resize(n * step.ds);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < step.ds; ++d) step.s[i * step.ds + d] = s_cols[d][i];

    // Controls: z-scored posterior means of Z_t plus the measured history
    // anchors — every earlier outcome Y_2..Y_t and treatment W_1..W_{t-1}.
    // The outcome lags pin the accumulated confounder combinations that drive
    // both treatment and outcome; the treatment lags close the feedback
    // channel. Constant columns are dropped rather than kept as exact
    // duplicates of the intercept.
    std::vector<std::vector<double>> cols;
    std::vector<std::string> names;
    for (std::size_t d = 0; d < latents.dim_z; ++d) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = latents.z_mean_at(i, t, d);
      ZScored zs = z_score(std::move(col));
      if (zs.constant) continue;
      cols.push_back(std::move(zs.v));
      names.push_back("z_hat_" + std::to_string(d));
    }
    for (std::size_t k = 2; k <= t; ++k) {
      std::vector<double> yk(n);
      for (std::size_t i = 0; i < n; ++i) yk[i] = data.y_at(i, k - 1);
      ZScored zy = z_score(std::move(yk));
      if (!zy.constant) {
        cols.push_back(std::move(zy.v));
        names.push_back("y_lag_" + std::to_string(k));
      }
    }
    for (std::size_t k = 1; k < t; ++k) {
      std::vector<double> wk(n);
      for (std::size_t i = 0; i < n; ++i) wk[i] = data.w_at(i, k);
      ZScored zw = z_score(std::move(wk));
      if (!zw.constant) {
        cols.push_back(std::move(zw.v));
        names.push_back("w_lag_" + std::to_string(k));
      }
    }
    step.k = cols.size();
    step.controls.resize(n * step.k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < step.k; ++j) step.controls[i * step.k + j] = cols[j][i];
    step.control_names = std::move(names);

    const double f = first_stage_f(step);
    if (f < min_first_stage_f) {
      out.skipped_t.push_back(step.t);
      continue;
    }
    out.steps.push_back(std::move(step));
    out.first_stage_f.push_back(f);
  }
  return out;
}

MethodOutcome estimate_method(const std::string& method, const PanelDataset& data,
                              const vae::LatentPath* learned, const EstimateOptions& opts) {
  if (!known_method(method)) throw ContractError("estimate_method: unknown method '" + method + "'");
  MethodOutcome out;
  if (method == "naive") {
    try {
      out.report = est::ace_naive(data);
    } catch (const RankError&) {
      for (std::size_t t = 1; t <= data.horizon; ++t) out.dropped_t.push_back(static_cast<int>(t));
    }
  } else if (method == "oracle") {
    out.report = estimate_steps(est::oracle_civ_steps(data), opts, out.dropped_t);
  } else {
    if (learned == nullptr)
      throw ContractError("estimate_method: 'tdciv' needs a learned representation");
    LearnedSteps ls = learned_civ_steps(data, *learned, opts.min_first_stage_f);
    out.dropped_t = ls.skipped_t;
    est::AceReport r = estimate_steps(ls.steps, opts, out.dropped_t);
    out.report.steps = std::move(r.steps);
  }
  out.report.method = method;
  std::sort(out.dropped_t.begin(), out.dropped_t.end());
  return out;
}

ReplicateArtifacts run_replicate(const RunConfig& cfg, std::size_t rep) {
  cfg.validate();
  if (rep >= cfg.reps) throw ContractError("run_replicate: replicate index out of range");

  sim::GenConfig g = cfg.gen;
  g.seed = data_seed(cfg.seed, rep);
  PanelDataset data = sim::generate_dataset(g);

  ReplicateArtifacts art;
  art.rep = rep;
  art.seed = g.seed;

  const auto& methods = cfg.estimate.methods;
  const bool wants_tdciv = std::find(methods.begin(), methods.end(), "tdciv") != methods.end();
  vae::LatentPath latents;
  if (wants_tdciv) {
    vae::TdcivModel model = vae::TdcivModel::init(resolve_model_config(cfg, data),
                                                  init_seed(cfg.seed, rep));
    vae::TrainConfig tc = cfg.train;
    tc.seed = optim_seed(cfg.seed, rep);
    art.trace = vae::train(model, data, tc);
    latents = vae::extract_representations(model, data);
  }

  for (const auto& method : methods) {
    MethodOutcome mo = estimate_method(method, data, wants_tdciv ? &latents : nullptr,
                                       cfg.estimate);
    mo.report.seed = g.seed;
    if (data.true_ace) mo.report = est::evaluate(std::move(mo.report), *data.true_ace);
    art.methods.emplace(method, std::move(mo));
  }
  return art;
}

EvaluationResult run_evaluation(const RunConfig& cfg) {
  cfg.validate();
  EvaluationResult result;
  result.replicates.resize(cfg.reps);
  std::vector<std::exception_ptr> errors(cfg.reps);

  const std::size_t workers = std::min(cfg.jobs, cfg.reps);
  if (workers <= 1) {
    for (std::size_t rep = 0; rep < cfg.reps; ++rep)
      result.replicates[rep] = run_replicate(cfg, rep);
  } else {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (;;) {
        const std::size_t rep = next.fetch_add(1);
        if (rep >= cfg.reps) return;
        try {
          result.replicates[rep] = run_replicate(cfg, rep);
        } catch (...) {
          errors[rep] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
  }

  for (const auto& method : cfg.estimate.methods) {
    // The naive baseline covers t = 1..T; the instrument methods start at
    // t = 2 (they condition on the previous treatment).
    const std::size_t full_grid = method == "naive" ? cfg.gen.horizon : cfg.gen.horizon - 1;
    std::vector<est::AceReport> complete;
    std::size_t dropped = 0;
    for (const auto& art : result.replicates) {
      const MethodOutcome& mo = art.methods.at(method);
      dropped += mo.dropped_t.size();
      if (mo.report.steps.size() == full_grid) complete.push_back(mo.report);
    }
    result.replicates_excluded[method] = cfg.reps - complete.size();
    result.steps_dropped[method] = dropped;
    result.aggregates[method] =
        complete.empty() ? std::vector<est::AggregateRow>{} : est::aggregate(complete);
  }
  return result;
}

void write_loss_trace_csv(const vae::TrainTrace& trace, const std::string& path) {
  std::ostringstream out;
  out << "epoch,loss,neg_elbo,recon_ll,kl_s,kl_z,treat_ll,outcome_ll\n";
  for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
    const vae::EpochStats& s = trace.epochs[e];
    out << (e + 1) << ',' << format_g17(s.loss) << ',' << format_g17(s.neg_elbo) << ','
        << format_g17(s.recon_ll) << ',' << format_g17(s.kl_s) << ',' << format_g17(s.kl_z) << ','
        << format_g17(s.treat_ll) << ',' << format_g17(s.outcome_ll) << '\n';
  }
  write_text(path, out.str());
}

void write_evaluation_outputs(const EvaluationResult& result, const RunConfig& cfg,
                              const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const fs::path base(out_dir);

  write_text((base / "config.json").string(), render_run_config(cfg));

  json manifest;
  manifest["kind"] = "tdciv-evaluation";
  manifest["version"] = 1;
  manifest["seed"] = cfg.seed;
  manifest["reps"] = cfg.reps;
  manifest["config_hash"] = config_hash(cfg);
  {
    std::vector<std::uint64_t> seeds;
    for (const auto& art : result.replicates) seeds.push_back(art.seed);
    manifest["replicate_seeds"] = seeds;
  }
  write_text((base / "manifest.json").string(), manifest.dump(2) + "\n");

  for (const auto& art : result.replicates) {
    const fs::path dir = base / rep_dir_name(art.rep);
    fs::create_directories(dir);
    for (const auto& [method, mo] : art.methods)
      est::write_report_csv(mo.report, (dir / ("report_" + method + ".csv")).string());
    if (!art.trace.epochs.empty())
      write_loss_trace_csv(art.trace, (dir / "loss_trace.csv").string());
  }

  for (const auto& [method, rows] : result.aggregates)
    est::write_aggregate_csv(rows, (base / ("aggregate_" + method + ".csv")).string());

  json failures;
  failures["methods"] = json::object();
  for (const auto& method : cfg.estimate.methods) {
    json entry;
    entry["replicates_excluded"] = result.replicates_excluded.at(method);
    entry["steps_dropped"] = result.steps_dropped.at(method);
    json drops = json::array();
    for (const auto& art : result.replicates) {
      const MethodOutcome& mo = art.methods.at(method);
      if (!mo.dropped_t.empty()) drops.push_back({{"rep", art.rep}, {"t", mo.dropped_t}});
    }
    entry["dropped"] = drops;
    failures["methods"][method] = entry;
  }
  write_text((base / "failures.json").string(), failures.dump(2) + "\n");
}

}  // namespace tdciv::pipe

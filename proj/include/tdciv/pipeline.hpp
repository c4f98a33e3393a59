#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tdciv/generator.hpp"
#include "tdciv/model.hpp"
#include "tdciv/regress.hpp"

namespace tdciv::pipe {

struct EstimateOptions {
  std::vector<std::string> methods = {"tdciv", "naive", "oracle"};
  std::string estimator = "2sls";  // "2sls" or "ratio"
  double weak_tolerance = 1e-3;
  // Learned instruments whose first-stage F falls below this are skipped for
  // that step rather than producing a noise-amplified estimate.
  double min_first_stage_f = 10.0;

  void validate() const;
};

// One experiment: a generator setting, model/training settings, estimator
// choices, and a replicate count, all derived from a single master seed.
// `jobs` is a runtime knob (set from the command line, not the config file)
// and does not participate in the canonical rendering or the hash.
struct RunConfig {
  sim::GenConfig gen;        // gen.seed is ignored; replicate seeds derive from `seed`
  vae::ModelConfig model;    // model.dim_x always follows the data; dim_z 0 = data width
  vae::TrainConfig train;    // train.seed derives from `seed`
  EstimateOptions estimate;
  std::size_t reps = 30;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;

  void validate() const;
};

// Strict parse: unknown keys anywhere are rejected with the offending name.
RunConfig parse_run_config(const std::string& text);
RunConfig read_run_config(const std::string& path);

// Canonical JSON echo of the resolved config (alphabetical keys, no `jobs`).
std::string render_run_config(const RunConfig& cfg);
// FNV-1a over the canonical rendering, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Three seed streams per replicate: the data draw, the weight
// initialization, and the training loop (shuffle/reparam/dropout).
std::uint64_t replicate_seed(const RunConfig& cfg, std::size_t rep);
std::uint64_t model_init_seed(const RunConfig& cfg, std::size_t rep);
std::uint64_t train_loop_seed(const RunConfig& cfg, std::size_t rep);
// Model/config resolution against a concrete dataset (fills auto dims).
vae::ModelConfig resolve_model_config(const RunConfig& cfg, const PanelDataset& data);

// 2SLS steps built from learned representations: the instrument is the
// z-scored S posterior mean; controls are the z-scored Z posterior means plus
// the full measured history [Y_2..Y_t, W_1..W_{t-1}] (outcome lags pin the
// accumulated confounder combinations, treatment lags close the feedback
// loop). Constant learned columns are dropped. Steps run t = 2..T; steps
// whose first-stage F is below `min_first_stage_f` land in `skipped_t`.
struct LearnedSteps {
  std::vector<est::CivStep> steps;
  std::vector<int> skipped_t;
  std::vector<double> first_stage_f;  // aligned with steps
};
LearnedSteps learned_civ_steps(const PanelDataset& data, const vae::LatentPath& latents,
                               double min_first_stage_f);

// Report labelled with the requested method name; steps that failed loudly
// (weak instrument, rank) are dropped and recorded in `dropped_t`.
struct MethodOutcome {
  est::AceReport report;
  std::vector<int> dropped_t;
};
// method ∈ {"tdciv", "naive", "oracle"}; `learned` required for "tdciv".
MethodOutcome estimate_method(const std::string& method, const PanelDataset& data,
                              const vae::LatentPath* learned, const EstimateOptions& opts);

struct ReplicateArtifacts {
  std::size_t rep = 0;
  std::uint64_t seed = 0;
  std::map<std::string, MethodOutcome> methods;
  vae::TrainTrace trace;  // empty unless "tdciv" was requested
};
// generate → (train when needed) → estimate for one replicate, in memory.
ReplicateArtifacts run_replicate(const RunConfig& cfg, std::size_t rep);

struct EvaluationResult {
  std::vector<ReplicateArtifacts> replicates;
  // Aggregates cover only replicates whose report has the full step grid.
  std::map<std::string, std::vector<est::AggregateRow>> aggregates;
  std::map<std::string, std::size_t> replicates_excluded;
  std::map<std::string, std::size_t> steps_dropped;
};
// Runs every replicate (fanned out over cfg.jobs workers), evaluates against
// the stamped truth, and aggregates per method.
EvaluationResult run_evaluation(const RunConfig& cfg);

void write_loss_trace_csv(const vae::TrainTrace& trace, const std::string& path);

// Writes config.json, manifest.json, per-replicate report/trace files, one
// aggregate CSV per method, and failures.json under `out_dir`.
void write_evaluation_outputs(const EvaluationResult& result, const RunConfig& cfg,
                              const std::string& out_dir);

}  // namespace tdciv::pipe

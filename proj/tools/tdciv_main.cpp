#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tdciv/dag.hpp"
#include "tdciv/errors.hpp"
#include "tdciv/generator.hpp"
#include "tdciv/model.hpp"
#include "tdciv/panel.hpp"
#include "tdciv/pipeline.hpp"
#include "tdciv/regress.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tdciv;

namespace {

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw ContractError("write to '" + path + "' failed");
}

std::string rep_csv_name(std::size_t rep) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rep_%03zu.csv", rep);
  return buf;
}

pipe::RunConfig load_config(const std::string& path, std::uint64_t seed, bool seed_given) {
  pipe::RunConfig cfg = pipe::read_run_config(path);
  if (seed_given) cfg.seed = seed;
  return cfg;
}

int run_generate(const pipe::RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const fs::path base(out_dir);

  std::vector<std::uint64_t> seeds(cfg.reps);
  const std::size_t workers = std::min(cfg.jobs, cfg.reps);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(cfg.reps);
  auto work = [&] {
    for (;;) {
      const std::size_t rep = next.fetch_add(1);
      if (rep >= cfg.reps) return;
      try {
        sim::GenConfig g = cfg.gen;
        g.seed = pipe::replicate_seed(cfg, rep);
        seeds[rep] = g.seed;
        write_panel(sim::generate_dataset(g), (base / rep_csv_name(rep)).string());
      } catch (...) {
        errors[rep] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);

  write_text((base / "config.json").string(), pipe::render_run_config(cfg));
  json manifest;
  manifest["kind"] = "tdciv-generate";
  manifest["version"] = 1;
  manifest["seed"] = cfg.seed;
  manifest["reps"] = cfg.reps;
  manifest["config_hash"] = pipe::config_hash(cfg);
  manifest["replicate_seeds"] = seeds;
  {
    std::vector<std::string> files;
    for (std::size_t rep = 0; rep < cfg.reps; ++rep) files.push_back(rep_csv_name(rep));
    manifest["files"] = files;
  }
  write_text((base / "manifest.json").string(), manifest.dump(2) + "\n");
  std::printf("generate: wrote %zu replicate(s) to %s\n", cfg.reps, out_dir.c_str());
  return 0;
}

int run_train(const pipe::RunConfig& cfg, const std::string& data_path, std::size_t rep,
              const std::string& out_dir) {
  PanelDataset data = read_panel(data_path);
  vae::TdcivModel model =
      vae::TdcivModel::init(pipe::resolve_model_config(cfg, data), pipe::model_init_seed(cfg, rep));
  vae::TrainConfig tc = cfg.train;
  tc.seed = pipe::train_loop_seed(cfg, rep);
  vae::TrainTrace trace = vae::train(model, data, tc);

  fs::create_directories(out_dir);
  const fs::path base(out_dir);
  vae::save_model(model, (base / "checkpoint.json").string());
  pipe::write_loss_trace_csv(trace, (base / "loss_trace.csv").string());
  write_text((base / "config.json").string(), pipe::render_run_config(cfg));
  json manifest;
  manifest["kind"] = "tdciv-train";
  manifest["version"] = 1;
  manifest["seed"] = cfg.seed;
  manifest["rep"] = rep;
  manifest["config_hash"] = pipe::config_hash(cfg);
  manifest["data"] = data_path;
  manifest["saturated_labels"] = trace.saturated_labels;
  write_text((base / "manifest.json").string(), manifest.dump(2) + "\n");
  if (!trace.epochs.empty())
    std::printf("train: %zu epochs, final loss %.6f -> %s\n", trace.epochs.size(),
                trace.epochs.back().loss, out_dir.c_str());
  return 0;
}

int run_estimate(const pipe::RunConfig& cfg, const std::string& data_path,
                 const std::string& checkpoint_path, bool oracle_latents,
                 const std::string& out_dir) {
  PanelDataset data = read_panel(data_path);

  std::vector<std::string> methods;
  for (const auto& m : cfg.estimate.methods) {
    std::string use = (oracle_latents && m == "tdciv") ? "oracle" : m;
    if (std::find(methods.begin(), methods.end(), use) == methods.end()) methods.push_back(use);
  }
  const bool wants_tdciv = std::find(methods.begin(), methods.end(), "tdciv") != methods.end();
  if (wants_tdciv && checkpoint_path.empty())
    throw ParseError("estimate: methods include 'tdciv'; give --checkpoint or --oracle");

  vae::LatentPath latents;
  if (wants_tdciv) {
    vae::TdcivModel model = vae::load_model(checkpoint_path);
    latents = vae::extract_representations(model, data);
  }

  fs::create_directories(out_dir);
  const fs::path base(out_dir);
  json summary;
  summary["kind"] = "tdciv-estimate";
  summary["version"] = 1;
  summary["seed"] = cfg.seed;
  summary["config_hash"] = pipe::config_hash(cfg);
  summary["data"] = data_path;
  summary["methods"] = json::object();
  for (const auto& method : methods) {
    pipe::MethodOutcome mo =
        pipe::estimate_method(method, data, wants_tdciv ? &latents : nullptr, cfg.estimate);
    mo.report.seed = cfg.seed;
    if (data.true_ace) mo.report = est::evaluate(std::move(mo.report), *data.true_ace);
    est::write_report_csv(mo.report, (base / ("report_" + method + ".csv")).string());
    summary["methods"][method] = {{"steps", mo.report.steps.size()}, {"dropped_t", mo.dropped_t}};
    std::printf("estimate: %s -> %zu step(s), %zu dropped\n", method.c_str(),
                mo.report.steps.size(), mo.dropped_t.size());
  }
  write_text((base / "config.json").string(), pipe::render_run_config(cfg));
  write_text((base / "estimate.json").string(), summary.dump(2) + "\n");
  return 0;
}

int run_evaluate(const pipe::RunConfig& cfg, const std::string& out_dir) {
  pipe::EvaluationResult result = pipe::run_evaluation(cfg);
  pipe::write_evaluation_outputs(result, cfg, out_dir);
  for (const auto& [method, rows] : result.aggregates) {
    double mean = 0.0;
    for (const auto& row : rows) mean += row.mean_abs_error;
    if (!rows.empty()) mean /= static_cast<double>(rows.size());
    std::printf("evaluate: %s aggregated over %zu replicate(s), %zu excluded, %zu step(s) "
                "dropped, mean |error| %.6f\n",
                method.c_str(), cfg.reps - result.replicates_excluded.at(method),
                result.replicates_excluded.at(method), result.steps_dropped.at(method), mean);
  }
  std::printf("evaluate: outputs in %s\n", out_dir.c_str());
  return 0;
}

int run_civ_check(const std::string& dag_path, int paper_horizon, bool with_proxy, int t,
                  std::string s_text, std::string w_text, std::string y_text,
                  std::vector<std::string> cond_texts, const std::string& out_path) {
  if (dag_path.empty() == (paper_horizon == 0))
    throw ParseError("civ-check: give exactly one of --dag or --paper-dag");

  dag::FullTimeDag graph;
  if (!dag_path.empty()) {
    graph = dag::read_dag_file(dag_path);
    if (s_text.empty() || w_text.empty() || y_text.empty())
      throw ParseError("civ-check: --dag mode needs explicit --s, --w, and --y");
  } else {
    graph = dag::build_paper_dag(paper_horizon, with_proxy);
    if (t == 0 && (s_text.empty() || w_text.empty() || y_text.empty() || cond_texts.empty()))
      throw ParseError("civ-check: --paper-dag mode needs --t (or explicit --s/--w/--y/--cond)");
    if (t != 0) {
      if (s_text.empty()) s_text = "S[" + std::to_string(t) + "]";
      if (w_text.empty()) w_text = "W[" + std::to_string(t) + "]";
      if (y_text.empty()) y_text = "Y[" + std::to_string(t + 1) + "]";
    }
  }

  std::vector<dag::NodeRef> cond;
  if (cond_texts.size() == 1 && cond_texts[0] == "none") {
    // explicit empty conditioning set
  } else if (!cond_texts.empty()) {
    for (const auto& text : cond_texts) cond.push_back(dag::parse_node(text));
  } else if (t != 0 && dag_path.empty()) {
    cond = dag::paper_civ_conditioning(t);
  }

  dag::CivVerdict verdict = dag::check_civ(graph, dag::parse_node(s_text),
                                           dag::parse_node(w_text), dag::parse_node(y_text), cond);
  json j;
  j["s"] = s_text;
  j["w"] = w_text;
  j["y"] = y_text;
  {
    std::vector<std::string> names;
    for (const auto& node : cond) names.push_back(dag::to_string(node));
    j["conditioning"] = names;
  }
  j["relevance"] = verdict.relevance;
  j["exclusion"] = verdict.exclusion;
  j["non_descendant"] = verdict.non_descendant;
  j["ok"] = verdict.all_ok();
  {
    std::vector<std::string> names;
    for (const auto& node : verdict.witness_path) names.push_back(dag::to_string(node));
    j["witness_path"] = names;
  }
  j["witness_note"] = verdict.witness_note;
  const std::string text = j.dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!out_path.empty()) write_text(out_path, text);
  return verdict.all_ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tdciv: time-varying conditional instrumental variables workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_path, checkpoint_path, dag_path;
  std::string s_text, w_text, y_text;
  std::vector<std::string> cond_texts;
  std::uint64_t seed = 0;
  std::size_t jobs = 1, rep = 0;
  int paper_horizon = 0, t_step = 0;
  bool with_proxy = false, oracle_latents = false;
  int exit_code = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--config", config_path, "JSON run configuration")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "override the config's master seed");
    if (needs_out) cmd->add_option("--out", out_dir, "output directory")->required();
  };

  CLI::App* gen_cmd = app.add_subcommand("generate", "write replicate panel CSVs and a manifest");
  add_common(gen_cmd, true);
  gen_cmd->add_option("--jobs", jobs, "worker threads for replicate fan-out");
  gen_cmd->callback([&] {
    pipe::RunConfig cfg = load_config(config_path, seed, gen_cmd->count("--seed") > 0);
    cfg.jobs = jobs;
    exit_code = run_generate(cfg, out_dir);
  });

  CLI::App* train_cmd = app.add_subcommand("train", "fit the sequence model on one panel CSV");
  add_common(train_cmd, true);
  train_cmd->add_option("--data", data_path, "panel CSV to fit")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--rep", rep, "replicate index for the seed streams (default 0)");
  train_cmd->callback([&] {
    pipe::RunConfig cfg = load_config(config_path, seed, train_cmd->count("--seed") > 0);
    exit_code = run_train(cfg, data_path, rep, out_dir);
  });

  CLI::App* est_cmd =
      app.add_subcommand("estimate", "per-step treatment-effect estimates for one panel CSV");
  add_common(est_cmd, true);
  est_cmd->add_option("--data", data_path, "panel CSV to estimate on")
      ->required()
      ->check(CLI::ExistingFile);
  est_cmd->add_option("--checkpoint", checkpoint_path, "trained model for the tdciv method")
      ->check(CLI::ExistingFile);
  est_cmd->add_flag("--oracle", oracle_latents,
                    "use the stored ground-truth latents instead of a checkpoint");
  est_cmd->callback([&] {
    pipe::RunConfig cfg = load_config(config_path, seed, est_cmd->count("--seed") > 0);
    exit_code = run_estimate(cfg, data_path, checkpoint_path, oracle_latents, out_dir);
  });

  CLI::App* eval_cmd = app.add_subcommand(
      "evaluate", "replicate loop: generate, train, estimate, aggregate against truth");
  add_common(eval_cmd, true);
  eval_cmd->add_option("--jobs", jobs, "worker threads for replicate fan-out");
  eval_cmd->callback([&] {
    pipe::RunConfig cfg = load_config(config_path, seed, eval_cmd->count("--seed") > 0);
    cfg.jobs = jobs;
    exit_code = run_evaluate(cfg, out_dir);
  });

  CLI::App* civ_cmd =
      app.add_subcommand("civ-check", "verify the conditional-instrument conditions on a DAG");
  civ_cmd->add_option("--dag", dag_path, "edge-list DAG file")->check(CLI::ExistingFile);
  civ_cmd->add_option("--paper-dag", paper_horizon, "build the benchmark DAG with this horizon");
  civ_cmd->add_flag("--proxy", with_proxy, "include the proxy channel in the benchmark DAG");
  civ_cmd->add_option("--t", t_step, "step: defaults s=S[t], w=W[t], y=Y[t+1], benchmark conditioning");
  civ_cmd->add_option("--s", s_text, "candidate instrument node, e.g. S[3]");
  civ_cmd->add_option("--w", w_text, "treatment node");
  civ_cmd->add_option("--y", y_text, "outcome node");
  civ_cmd->add_option("--cond", cond_texts, "conditioning nodes ('none' for the empty set)")
      ->delimiter(',');
  civ_cmd->add_option("--out", out_dir, "also write the verdict JSON here");
  civ_cmd->callback([&] {
    exit_code = run_civ_check(dag_path, paper_horizon, with_proxy, t_step, s_text, w_text, y_text,
                              cond_texts, out_dir);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const LookupError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return exit_code;
}

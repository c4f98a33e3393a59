#include <cmath>
#include <numeric>
#include <string>

#include "tdciv/errors.hpp"
#include "tdciv/model.hpp"
#include "tdciv/optimizer.hpp"

namespace tdciv::vae {
namespace {

// In-place Fisher-Yates; avoids std::shuffle so the permutation depends only
// on our own engine draws.
void shuffle_rows(std::vector<std::size_t>& rows, Rng& rng) {
  for (std::size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[rng.below(i)]);
}

}  // namespace

TrainTrace train(TdcivModel& model, const PanelDataset& data, const TrainConfig& config) {
  model.validate();
  if (data.n == 0) throw ContractError("train: empty dataset");
  if (config.batch_size == 0) throw ContractError("train: batch_size must be >= 1");
  if (!(config.learning_rate >= 0.0)) throw ContractError("train: learning_rate must be >= 0");

  Rng shuffle_rng(derive_seed(config.seed, 0));
  Rng reparam_rng(derive_seed(config.seed, 1));
  Rng dropout_rng(derive_seed(config.seed, 2));

  const std::vector<ad::Array*> params = model.parameters();
  ad::AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  ad::AdamState adam(params, adam_cfg);

  std::vector<std::size_t> order(data.n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainTrace trace;
  ad::Tape tape;
  Rng* dropout = model.config.keep_prob < 1.0 ? &dropout_rng : nullptr;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rows(order, shuffle_rng);
    EpochStats stats;

    for (std::size_t start = 0; start < data.n; start += config.batch_size) {
      const std::size_t stop = std::min(start + config.batch_size, data.n);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);

      tape.clear();
      const BatchGraph g =
          build_loss_graph(tape, model, data, rows, &reparam_rng, dropout);
      const double loss = tape.value(g.loss)[0];
      if (!std::isfinite(loss))
        throw NonFiniteError("train: loss " + std::to_string(loss) + " at epoch " +
                             std::to_string(epoch + 1) + ", batch starting at row " +
                             std::to_string(start));
      tape.backward(g.loss);

      std::vector<const ad::Array*> grads;
      grads.reserve(g.params.size());
      for (ad::Tape::Id id : g.params) grads.push_back(&tape.grad(id));
      adam.step(params, grads);

      const double weight = static_cast<double>(rows.size());
      stats.loss += loss * weight;
      stats.neg_elbo += tape.value(g.neg_elbo)[0] * weight;
      stats.recon_ll += g.recon_ll * weight;
      stats.kl_s += g.kl_s * weight;
      stats.kl_z += g.kl_z * weight;
      stats.treat_ll += g.treat_ll * weight;
      stats.outcome_ll += g.outcome_ll * weight;
      trace.saturated_labels += g.saturated_labels;
    }

    const double inv_n = 1.0 / static_cast<double>(data.n);
    stats.loss *= inv_n;
    stats.neg_elbo *= inv_n;
    stats.recon_ll *= inv_n;
    stats.kl_s *= inv_n;
    stats.kl_z *= inv_n;
    stats.treat_ll *= inv_n;
    stats.outcome_ll *= inv_n;
    trace.epochs.push_back(stats);
  }
  return trace;
}

LatentPath extract_representations(const TdcivModel& model, const PanelDataset& data) {
  model.validate();
  if (data.n == 0) throw ContractError("extract: empty dataset");

  const ModelConfig& cfg = model.config;
  LatentPath path;
  path.n = data.n;
  path.horizon = data.horizon;
  path.dim_s = cfg.dim_s;
  path.dim_z = cfg.dim_z;
  path.hidden = cfg.hidden;
  path.s_mean.resize(data.n * data.horizon * cfg.dim_s);
  path.s_log_var.resize(path.s_mean.size());
  path.z_mean.resize(data.n * data.horizon * cfg.dim_z);
  path.z_log_var.resize(path.z_mean.size());
  path.h.resize(data.n * data.horizon * cfg.hidden);

  constexpr std::size_t kBatch = 256;
  ad::Tape tape;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.n; start += kBatch) {
    const std::size_t stop = std::min(start + kBatch, data.n);
    rows.resize(stop - start);
    std::iota(rows.begin(), rows.end(), start);

    tape.clear();
    const BatchGraph g = build_loss_graph(tape, model, data, rows, nullptr, nullptr);
    for (std::size_t t = 1; t <= data.horizon; ++t) {
      const ad::Array& mu_s = tape.value(g.mu_s[t - 1]);
      const ad::Array& lv_s = tape.value(g.lv_s[t - 1]);
      const ad::Array& mu_z = tape.value(g.mu_z[t - 1]);
      const ad::Array& lv_z = tape.value(g.lv_z[t - 1]);
      const ad::Array& h = tape.value(g.h_states[t - 1]);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t i = rows[r];
        for (std::size_t d = 0; d < cfg.dim_s; ++d) {
          path.s_mean[(i * data.horizon + (t - 1)) * cfg.dim_s + d] = mu_s.at(r, d);
          path.s_log_var[(i * data.horizon + (t - 1)) * cfg.dim_s + d] = lv_s.at(r, d);
        }
        for (std::size_t d = 0; d < cfg.dim_z; ++d) {
          path.z_mean[(i * data.horizon + (t - 1)) * cfg.dim_z + d] = mu_z.at(r, d);
          path.z_log_var[(i * data.horizon + (t - 1)) * cfg.dim_z + d] = lv_z.at(r, d);
        }
        for (std::size_t k = 0; k < cfg.hidden; ++k)
          path.h[(i * data.horizon + (t - 1)) * cfg.hidden + k] = h.at(r, k);
      }
    }
  }
  return path;
}

}  // namespace tdciv::vae

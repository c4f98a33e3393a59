#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tdciv/array.hpp"
#include "tdciv/panel.hpp"
#include "tdciv/rng.hpp"
#include "tdciv/tape.hpp"

namespace tdciv::vae {

// Diagonal Gaussian in mean / log-variance form.
struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> log_variance;

  std::size_t dim() const { return mean.size(); }
  void validate() const;  // equal lengths, finite entries
};

// Closed-form KL(q ‖ p) between diagonal Gaussians, summed over coordinates.
double kl_gaussian(const GaussianParams& q, const GaussianParams& p);

// sample = mean + exp(log_variance / 2) ⊙ standard-normal draw.
std::vector<double> sample_reparam(const GaussianParams& params, Rng& rng);

// log p(w) for w ∈ {0,1} under Bern(sigmoid(logit)), evaluated in logit space
// so the result is finite for every finite logit.
double bernoulli_log_likelihood(double logit, double w);

// log N(y | mean, variance).
double gaussian_log_likelihood(double y, double mean, double variance);

struct ModelConfig {
  std::size_t dim_x = 3;      // measured covariate channels per step
  std::size_t dim_s = 1;      // width of the learned instrument
  std::size_t dim_z = 3;      // width of the learned conditioning block
  std::size_t hidden = 128;   // recurrent state width
  std::size_t fc_hidden = 128;
  double alpha = 1.0;         // treatment-predictor weight
  double beta = 1.0;          // outcome-predictor weight
  // KL weight on the instrument channel. Values below 1 make S the cheapest
  // place to store information, steering the high-variance instrument signal
  // into S rather than the conditioning block (whose conditional prior would
  // otherwise hoard it and poison the downstream controls).
  double kl_s_weight = 1.0;
  double keep_prob = 0.8;     // dropout keep-probability on FC hidden layers
  bool binary_outcome = false;
  double init_sd = 0.01;      // weight initialization scale
  // Fit per-channel location/scale on the training data and feed the network
  // z-scored inputs. Raw channels differ in scale by orders of magnitude
  // (outcomes and random walks grow with t), which saturates the tanh units
  // and lets the reconstruction term fixate on whichever channel happens to
  // be largest. The fitted transform is stored in the model and replayed
  // identically at extraction time.
  bool standardize_inputs = true;

  std::size_t input_dim() const { return dim_x + 2; }  // [X_t, W_{t-1}, Y_t]

  void validate() const;
};

// Sequential VAE over panel rows. One recurrent cell summarizes the measured
// history; per step, two encoders posit diagonal Gaussians for the latent
// instrument S_t and conditioning block Z_t, a conditional prior ties Z_t to
// the history state, one decoder reconstructs the step input, and two
// predictor heads score the observed treatment and next outcome.
//
// Parameter conventions: encoders, the prior, and the decoder emit
// [mean | log-variance] pairs, with the log-variance soft-clamped to (-8, 8)
// by 8·tanh(raw/8) so downstream exponentials cannot overflow; the clamp is
// the identity at the origin. The continuous outcome head emits
// [mean | raw variance] with variance = softplus(raw) + 1e-6.
struct TdcivModel {
  struct Mlp {
    ad::Array w1, b1, w2, b2;
  };

  ModelConfig config;
  ad::Array lstm_w;  // [input_dim + hidden, 4·hidden], gate blocks [i|f|g|o]
  ad::Array lstm_b;  // [4·hidden]
  ad::Array h0, c0;  // [hidden] trained initial state
  Mlp enc_s;         // [hidden + dim_s] -> 2·dim_s
  Mlp enc_z;         // [hidden + dim_z] -> 2·dim_z
  Mlp prior_z;       // [hidden] -> 2·dim_z
  Mlp decoder;       // [dim_s + dim_z] -> 2·input_dim
  Mlp treat;         // [dim_z + dim_s + hidden] -> 1 (logit)
  Mlp outcome;       // [dim_z + hidden] -> 2, or 1 logit when binary

  // Input normalization constants, one pair per input channel; every step
  // input row is mapped to (value - loc) / scale before entering the network.
  // init() sets the identity transform; train() fits them to the training
  // data when the config asks for standardized inputs. They are data
  // statistics, not trained parameters, so they are excluded from
  // parameters() but carried by the checkpoint.
  ad::Array input_loc;    // [input_dim]
  ad::Array input_scale;  // [input_dim], strictly positive

  // All weights N(0, init_sd²), biases zero, initial state drawn like weights.
  static TdcivModel init(const ModelConfig& config, std::uint64_t seed);

  // Fixed enumeration order; the checkpoint and optimizer rely on it.
  std::vector<ad::Array*> parameters();
  std::vector<const ad::Array*> parameters() const;
  std::vector<std::pair<std::string, const ad::Array*>> named_parameters() const;
  std::size_t n_parameters() const;

  void validate() const;
};

// Hidden state H_t for one panel row: runs the recurrent cell over steps
// 1..t with inputs [X_k, W_{k-1}, Y_k] (the t = 1 lags are zeros).
std::vector<double> encode_history(const TdcivModel& model, const PanelDataset& data,
                                   std::size_t row, std::size_t t);

// Posterior parameters for (S_t, Z_t) given the hidden state and the previous
// latent draws. Dropout is off; this is the deterministic evaluation path.
std::pair<GaussianParams, GaussianParams> encode_latents(const TdcivModel& model,
                                                         std::span<const double> h_t,
                                                         std::span<const double> prev_s,
                                                         std::span<const double> prev_z);

// Per-batch loss graph. Values are dataset-level diagnostics (batch means);
// `loss` is the minimized scalar. When alpha (resp. beta) is zero, the
// corresponding predictor subgraph is not built at all, so with both at zero
// and kl_s_weight at one the loss node is exactly the negated ELBO.
struct BatchGraph {
  ad::Tape::Id loss = 0;
  ad::Tape::Id neg_elbo = 0;
  std::vector<ad::Tape::Id> params;    // leaves aligned with model.parameters()
  std::vector<ad::Tape::Id> h_states;  // per t: [batch, hidden]
  std::vector<ad::Tape::Id> mu_s, lv_s, mu_z, lv_z;  // per t: [batch, dim]
  double recon_ll = 0.0;   // batch-mean reconstruction log-likelihood
  double kl_s = 0.0;       // batch-mean KL of the S posterior
  double kl_z = 0.0;       // batch-mean KL of the Z posterior
  double treat_ll = 0.0;   // batch-mean treatment log-likelihood (0 if skipped)
  double outcome_ll = 0.0; // batch-mean outcome log-likelihood (0 if skipped)
  std::size_t saturated_labels = 0;  // |logit| past the 1e-7 probability band
                                     // with a mismatched treatment label
};

// `reparam_rng` null: latent samples are posterior means (evaluation path).
// `dropout_rng` null or keep_prob = 1: no dropout. Both generators are
// consumed in a fixed order, so a fixed seed reproduces the graph exactly.
BatchGraph build_loss_graph(ad::Tape& tape, const TdcivModel& model, const PanelDataset& data,
                            std::span<const std::size_t> rows, Rng* reparam_rng,
                            Rng* dropout_rng);

// Fit the model's input location/scale to the per-channel mean and standard
// deviation of the assembled step inputs over every (row, t) of `data`
// (population moments; near-constant channels keep unit scale). With
// standardize_inputs unset this resets the identity transform. train() calls
// this before the first epoch; it is exposed so the effect of the transform
// can be tested in isolation.
void fit_input_scaling(TdcivModel& model, const PanelDataset& data);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct EpochStats {
  double loss = 0.0;  // dataset-mean of the minimized objective
  double neg_elbo = 0.0;
  double recon_ll = 0.0;
  double kl_s = 0.0;
  double kl_z = 0.0;
  double treat_ll = 0.0;
  double outcome_ll = 0.0;
};

struct TrainTrace {
  std::vector<EpochStats> epochs;
  std::size_t saturated_labels = 0;  // summed over the whole run
};

// Minibatch Adam on the total loss. Deterministic under (model, data, config);
// throws NonFiniteError with epoch/batch coordinates if the loss leaves the
// finite range, ContractError on an empty dataset or bad config.
TrainTrace train(TdcivModel& model, const PanelDataset& data, const TrainConfig& config);

// Per-(row, t) posterior means, log-variances, and hidden states, extracted
// with dropout off and no sampling: repeated calls are bit-identical.
struct LatentPath {
  std::size_t n = 0;
  std::size_t horizon = 0;
  std::size_t dim_s = 0;
  std::size_t dim_z = 0;
  std::size_t hidden = 0;
  std::vector<double> s_mean, s_log_var;  // [n * horizon * dim_s]
  std::vector<double> z_mean, z_log_var;  // [n * horizon * dim_z]
  std::vector<double> h;                  // [n * horizon * hidden]

  double s_mean_at(std::size_t i, std::size_t t, std::size_t d) const {
    return s_mean[(i * horizon + (t - 1)) * dim_s + d];
  }
  double z_mean_at(std::size_t i, std::size_t t, std::size_t d) const {
    return z_mean[(i * horizon + (t - 1)) * dim_z + d];
  }
  double h_at(std::size_t i, std::size_t t, std::size_t k) const {
    return h[(i * horizon + (t - 1)) * hidden + k];
  }
};

LatentPath extract_representations(const TdcivModel& model, const PanelDataset& data);

// Checkpoint: JSON document with a mandatory version field, the config echo,
// and every parameter array with its shape. Load rejects unknown versions,
// shape mismatches, and non-finite entries.
void save_model(const TdcivModel& model, const std::string& path);
TdcivModel load_model(const std::string& path);

}  // namespace tdciv::vae

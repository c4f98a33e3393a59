#include "tdciv/model.hpp"

#include <cmath>
#include <string>
#include <tuple>

#include "tdciv/errors.hpp"

namespace tdciv::vae {
namespace {

constexpr double kLn2Pi = 1.8378770664093454836;
constexpr double kLogVarCap = 8.0;
constexpr double kSaturationLogit = 16.11809565095832;  // -ln(1e-7)

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

bool all_finite(const ad::Array& a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i])) return false;
  return true;
}

void check_param_shape(const std::string& name, const ad::Array& a, std::size_t rows,
                       std::size_t cols) {
  const bool ok = cols == 0 ? (a.rank() == 1 && a.size() == rows)
                            : (a.rank() == 2 && a.rows() == rows && a.cols() == cols);
  if (!ok)
    throw ContractError("model: parameter '" + name + "' has shape " + a.shape_str() +
                        ", expected " +
                        (cols == 0 ? "[" + std::to_string(rows) + "]"
                                   : "[" + std::to_string(rows) + "," + std::to_string(cols) + "]"));
  if (!all_finite(a)) throw ContractError("model: parameter '" + name + "' has non-finite entries");
}

}  // namespace

void GaussianParams::validate() const {
  if (mean.size() != log_variance.size())
    throw ShapeError("gaussian params: mean length " + std::to_string(mean.size()) +
                     " != log-variance length " + std::to_string(log_variance.size()));
  if (mean.empty()) throw ShapeError("gaussian params: empty");
  for (double v : mean)
    if (!std::isfinite(v)) throw ContractError("gaussian params: non-finite mean entry");
  for (double v : log_variance)
    if (!std::isfinite(v)) throw ContractError("gaussian params: non-finite log-variance entry");
}

double kl_gaussian(const GaussianParams& q, const GaussianParams& p) {
  q.validate();
  p.validate();
  if (q.dim() != p.dim())
    throw ShapeError("kl_gaussian: dims differ, " + std::to_string(q.dim()) + " vs " +
                     std::to_string(p.dim()));
  double total = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double dlv = q.log_variance[i] - p.log_variance[i];
    const double dmu = q.mean[i] - p.mean[i];
    total += 0.5 * (-dlv + std::exp(dlv) + dmu * dmu * std::exp(-p.log_variance[i]) - 1.0);
  }
  return total;
}

std::vector<double> sample_reparam(const GaussianParams& params, Rng& rng) {
  params.validate();
  std::vector<double> out(params.dim());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = params.mean[i] + std::exp(0.5 * params.log_variance[i]) * rng.normal();
  return out;
}

double bernoulli_log_likelihood(double logit, double w) {
  if (w != 0.0 && w != 1.0)
    throw DomainError("bernoulli log-likelihood: label " + std::to_string(w) + " not in {0,1}");
  return w * logit - stable_softplus(logit);
}

double gaussian_log_likelihood(double y, double mean, double variance) {
  if (!(variance > 0.0))
    throw DomainError("gaussian log-likelihood: variance " + std::to_string(variance) +
                      " not positive");
  const double d = y - mean;
  return -0.5 * (kLn2Pi + std::log(variance) + d * d / variance);
}

void ModelConfig::validate() const {
  if (dim_x == 0 || dim_s == 0 || dim_z == 0 || hidden == 0 || fc_hidden == 0)
    throw ContractError("model config: all dims must be >= 1");
  if (!(alpha >= 0.0) || !(beta >= 0.0))
    throw ContractError("model config: alpha and beta must be >= 0");
  if (!(kl_s_weight > 0.0))
    throw ContractError("model config: kl_s_weight must be positive");
  if (!(keep_prob > 0.0) || keep_prob > 1.0)
    throw ContractError("model config: keep_prob must be in (0, 1]");
  if (!(init_sd >= 0.0)) throw ContractError("model config: init_sd must be >= 0");
}

TdcivModel TdcivModel::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  TdcivModel m;
  m.config = config;
  const std::size_t din = config.input_dim(), hid = config.hidden, fc = config.fc_hidden;
  const std::size_t ds = config.dim_s, dz = config.dim_z;
  const std::size_t out_w = config.binary_outcome ? 1 : 2;

  Rng rng(seed);
  auto weights = [&](std::size_t r, std::size_t c) {
    ad::Array a = ad::Array::zeros(r, c);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal(0.0, config.init_sd);
    return a;
  };
  auto state = [&](std::size_t len) {
    ad::Array a = ad::Array::zeros(len);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal(0.0, config.init_sd);
    return a;
  };
  auto mlp = [&](std::size_t in, std::size_t out) {
    Mlp p;
    p.w1 = weights(in, fc);
    p.b1 = ad::Array::zeros(fc);
    p.w2 = weights(fc, out);
    p.b2 = ad::Array::zeros(out);
    return p;
  };

  m.lstm_w = weights(din + hid, 4 * hid);
  m.lstm_b = ad::Array::zeros(4 * hid);
  m.h0 = state(hid);
  m.c0 = state(hid);
  m.enc_s = mlp(hid + ds, 2 * ds);
  m.enc_z = mlp(hid + dz, 2 * dz);
  m.prior_z = mlp(hid, 2 * dz);
  m.decoder = mlp(ds + dz, 2 * din);
  m.treat = mlp(dz + ds + hid, 1);
  m.outcome = mlp(dz + hid, out_w);
  return m;
}

std::vector<ad::Array*> TdcivModel::parameters() {
  std::vector<ad::Array*> out = {&lstm_w, &lstm_b, &h0, &c0};
  for (Mlp* p : {&enc_s, &enc_z, &prior_z, &decoder, &treat, &outcome}) {
    out.push_back(&p->w1);
    out.push_back(&p->b1);
    out.push_back(&p->w2);
    out.push_back(&p->b2);
  }
  return out;
}

std::vector<const ad::Array*> TdcivModel::parameters() const {
  auto mutable_list = const_cast<TdcivModel*>(this)->parameters();
  return {mutable_list.begin(), mutable_list.end()};
}

std::vector<std::pair<std::string, const ad::Array*>> TdcivModel::named_parameters() const {
  std::vector<std::pair<std::string, const ad::Array*>> out = {
      {"lstm.w", &lstm_w}, {"lstm.b", &lstm_b}, {"lstm.h0", &h0}, {"lstm.c0", &c0}};
  const std::pair<std::string, const Mlp*> blocks[] = {
      {"enc_s", &enc_s},     {"enc_z", &enc_z}, {"prior_z", &prior_z},
      {"decoder", &decoder}, {"treat", &treat}, {"outcome", &outcome}};
  for (const auto& [name, p] : blocks) {
    out.emplace_back(name + ".w1", &p->w1);
    out.emplace_back(name + ".b1", &p->b1);
    out.emplace_back(name + ".w2", &p->w2);
    out.emplace_back(name + ".b2", &p->b2);
  }
  return out;
}

std::size_t TdcivModel::n_parameters() const {
  std::size_t total = 0;
  for (const ad::Array* a : parameters()) total += a->size();
  return total;
}

void TdcivModel::validate() const {
  config.validate();
  const std::size_t din = config.input_dim(), hid = config.hidden, fc = config.fc_hidden;
  const std::size_t ds = config.dim_s, dz = config.dim_z;
  const std::size_t out_w = config.binary_outcome ? 1 : 2;

  check_param_shape("lstm.w", lstm_w, din + hid, 4 * hid);
  check_param_shape("lstm.b", lstm_b, 4 * hid, 0);
  check_param_shape("lstm.h0", h0, hid, 0);
  check_param_shape("lstm.c0", c0, hid, 0);
  const struct {
    const char* name;
    const Mlp* p;
    std::size_t in, out;
  } blocks[] = {{"enc_s", &enc_s, hid + ds, 2 * ds},     {"enc_z", &enc_z, hid + dz, 2 * dz},
                {"prior_z", &prior_z, hid, 2 * dz},      {"decoder", &decoder, ds + dz, 2 * din},
                {"treat", &treat, dz + ds + hid, 1},     {"outcome", &outcome, dz + hid, out_w}};
  for (const auto& b : blocks) {
    const std::string base(b.name);
    check_param_shape(base + ".w1", b.p->w1, b.in, fc);
    check_param_shape(base + ".b1", b.p->b1, fc, 0);
    check_param_shape(base + ".w2", b.p->w2, fc, b.out);
    check_param_shape(base + ".b2", b.p->b2, b.out, 0);
  }
}

namespace {

using Tape = ad::Tape;
using Id = Tape::Id;

// Parameter leaves in TdcivModel::parameters() order, named for graph code.
struct ParamIds {
  Id lstm_w, lstm_b, h0, c0;
  struct MlpIds {
    Id w1, b1, w2, b2;
  };
  MlpIds enc_s, enc_z, prior_z, decoder, treat, outcome;
  std::vector<Id> flat;
};

ParamIds push_params(Tape& t, const TdcivModel& m) {
  ParamIds p;
  for (const ad::Array* a : m.parameters()) p.flat.push_back(t.input(*a));
  std::size_t k = 0;
  p.lstm_w = p.flat[k++];
  p.lstm_b = p.flat[k++];
  p.h0 = p.flat[k++];
  p.c0 = p.flat[k++];
  for (ParamIds::MlpIds* b : {&p.enc_s, &p.enc_z, &p.prior_z, &p.decoder, &p.treat, &p.outcome}) {
    b->w1 = p.flat[k++];
    b->b1 = p.flat[k++];
    b->w2 = p.flat[k++];
    b->b2 = p.flat[k++];
  }
  return p;
}

// One recurrent update; returns the new (h, c).
std::pair<Id, Id> lstm_step(Tape& t, Id in, Id h_prev, Id c_prev, const ParamIds& p,
                            std::size_t hid) {
  const Id gates = t.affine(t.concat_cols(in, h_prev), p.lstm_w, p.lstm_b);
  const Id gi = t.sigmoid(t.slice_cols(gates, 0, hid));
  const Id gf = t.sigmoid(t.slice_cols(gates, hid, 2 * hid));
  const Id gg = t.tanh(t.slice_cols(gates, 2 * hid, 3 * hid));
  const Id go = t.sigmoid(t.slice_cols(gates, 3 * hid, 4 * hid));
  const Id c = t.add(t.mul(gf, c_prev), t.mul(gi, gg));
  const Id h = t.mul(go, t.tanh(c));
  return {h, c};
}

// tanh MLP with optional inverted dropout on the hidden activation.
Id mlp_forward(Tape& t, const ParamIds::MlpIds& p, Id in, Rng* dropout_rng, double keep) {
  Id hid = t.tanh(t.affine(in, p.w1, p.b1));
  if (dropout_rng != nullptr && keep < 1.0) {
    const ad::Array& hv = t.value(hid);
    ad::Array mask = ad::Array::zeros(hv.rows(), hv.cols());
    for (std::size_t i = 0; i < mask.size(); ++i)
      mask[i] = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
    hid = t.mul(hid, t.input(std::move(mask)));
  }
  return t.affine(hid, p.w2, p.b2);
}

// Soft bound keeping log-variances inside (-cap, cap); identity at the origin.
Id clamp_log_var(Tape& t, Id raw) {
  return t.scale(t.tanh(t.scale(raw, 1.0 / kLogVarCap)), kLogVarCap);
}

// Standard-normal draws shaped like a [rows, cols] matrix.
Id noise_leaf(Tape& t, std::size_t rows, std::size_t cols, Rng& rng) {
  ad::Array eps = ad::Array::zeros(rows, cols);
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
  return t.input(std::move(eps));
}

Id reparam_node(Tape& t, Id mu, Id lv, Rng* rng) {
  if (rng == nullptr) return mu;
  const ad::Array& mv = t.value(mu);
  const Id eps = noise_leaf(t, mv.rows(), mv.cols(), *rng);
  return t.add(mu, t.mul(t.exp(t.scale(lv, 0.5)), eps));
}

// Step-t input rows [X_t, W_{t-1}, Y_t]; the t = 1 lags are zeros.
ad::Array step_input(const PanelDataset& d, std::span<const std::size_t> rows, std::size_t t) {
  const std::size_t din = d.dim_x + 2;
  ad::Array in = ad::Array::zeros(rows.size(), din);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t i = rows[r];
    for (std::size_t j = 0; j < d.dim_x; ++j) in.at(r, j) = d.x_at(i, t, j);
    in.at(r, d.dim_x) = t > 1 ? d.w_at(i, t - 1) : 0.0;
    in.at(r, d.dim_x + 1) = t > 1 ? d.y_at(i, t - 1) : 0.0;
  }
  return in;
}

ad::Array column(const PanelDataset& d, std::span<const std::size_t> rows, std::size_t t,
                 bool treatment) {
  ad::Array col = ad::Array::zeros(rows.size(), 1);
  for (std::size_t r = 0; r < rows.size(); ++r)
    col[r] = treatment ? d.w_at(rows[r], t) : d.y_at(rows[r], t);
  return col;
}

// Gaussian log-density summed over every entry, in log-variance form:
// -0.5 * sum(ln 2π + lv + (x - mu)² e^{-lv}).
Id gaussian_ll_sum(Tape& t, Id target, Id mu, Id lv) {
  const Id quad = t.mul(t.square(t.sub(target, mu)), t.exp(t.neg(lv)));
  return t.scale(t.sum(t.add_const(t.add(lv, quad), kLn2Pi)), -0.5);
}

// Bernoulli log-likelihood summed over the batch, in logit form.
Id bernoulli_ll_sum(Tape& t, Id label, Id logit) {
  return t.sum(t.sub(t.mul(label, logit), t.softplus(logit)));
}

}  // namespace

BatchGraph build_loss_graph(Tape& tape, const TdcivModel& model, const PanelDataset& data,
                            std::span<const std::size_t> rows, Rng* reparam_rng,
                            Rng* dropout_rng) {
  model.validate();
  if (data.dim_x != model.config.dim_x)
    throw ContractError("loss graph: dataset has dim_x " + std::to_string(data.dim_x) +
                        " but the model expects " + std::to_string(model.config.dim_x));
  if (rows.empty()) throw ContractError("loss graph: empty row batch");
  if (data.horizon == 0) throw ContractError("loss graph: dataset horizon is zero");
  for (std::size_t i : rows)
    if (i >= data.n)
      throw ContractError("loss graph: row " + std::to_string(i) + " out of range (n = " +
                          std::to_string(data.n) + ")");

  const ModelConfig& cfg = model.config;
  const std::size_t B = rows.size(), T = data.horizon, hid = cfg.hidden;
  const std::size_t ds = cfg.dim_s, dz = cfg.dim_z;
  const double keep = cfg.keep_prob;

  BatchGraph g;
  const ParamIds p = push_params(tape, model);
  g.params = p.flat;

  Id h = tape.tile_rows(p.h0, B);
  Id c = tape.tile_rows(p.c0, B);
  Id prev_s = tape.input(ad::Array::zeros(B, ds));
  Id prev_z = tape.input(ad::Array::zeros(B, dz));

  Id sum_recon = 0, sum_kl_s = 0, sum_kl_z = 0, sum_treat = 0, sum_out = 0;
  bool first = true;
  auto fold = [&](Id& acc, Id term) { acc = first ? term : tape.add(acc, term); };

  for (std::size_t t = 1; t <= T; ++t) {
    const Id in = tape.input(step_input(data, rows, t));
    std::tie(h, c) = lstm_step(tape, in, h, c, p, hid);
    g.h_states.push_back(h);

    const Id es = mlp_forward(tape, p.enc_s, tape.concat_cols(h, prev_s), dropout_rng, keep);
    const Id mu_s = tape.slice_cols(es, 0, ds);
    const Id lv_s = clamp_log_var(tape, tape.slice_cols(es, ds, 2 * ds));
    const Id ez = mlp_forward(tape, p.enc_z, tape.concat_cols(h, prev_z), dropout_rng, keep);
    const Id mu_z = tape.slice_cols(ez, 0, dz);
    const Id lv_z = clamp_log_var(tape, tape.slice_cols(ez, dz, 2 * dz));
    const Id pz = mlp_forward(tape, p.prior_z, h, dropout_rng, keep);
    const Id pmu_z = tape.slice_cols(pz, 0, dz);
    const Id plv_z = clamp_log_var(tape, tape.slice_cols(pz, dz, 2 * dz));
    g.mu_s.push_back(mu_s);
    g.lv_s.push_back(lv_s);
    g.mu_z.push_back(mu_z);
    g.lv_z.push_back(lv_z);

    const Id s_samp = reparam_node(tape, mu_s, lv_s, reparam_rng);
    const Id z_samp = reparam_node(tape, mu_z, lv_z, reparam_rng);

    const Id dec = mlp_forward(tape, p.decoder, tape.concat_cols(z_samp, s_samp), dropout_rng,
                               keep);
    const Id dec_mu = tape.slice_cols(dec, 0, cfg.input_dim());
    const Id dec_lv = clamp_log_var(tape, tape.slice_cols(dec, cfg.input_dim(),
                                                          2 * cfg.input_dim()));
    fold(sum_recon, gaussian_ll_sum(tape, in, dec_mu, dec_lv));

    // KL against the standard-normal S prior: 0.5 Σ (e^{lv} - lv + μ² - 1).
    const Id kl_s_expr =
        tape.add_const(tape.add(tape.sub(tape.exp(lv_s), lv_s), tape.square(mu_s)), -1.0);
    fold(sum_kl_s, tape.scale(tape.sum(kl_s_expr), 0.5));

    // KL against the conditional Z prior:
    // 0.5 Σ (plv - lv + e^{lv - plv} + (μ - pμ)² e^{-plv} - 1).
    const Id kl_z_expr = tape.add_const(
        tape.add(tape.add(tape.sub(plv_z, lv_z), tape.exp(tape.sub(lv_z, plv_z))),
                 tape.mul(tape.square(tape.sub(mu_z, pmu_z)), tape.exp(tape.neg(plv_z)))),
        -1.0);
    fold(sum_kl_z, tape.scale(tape.sum(kl_z_expr), 0.5));

    if (cfg.alpha > 0.0) {
      const Id w = tape.input(column(data, rows, t, true));
      const Id logit = mlp_forward(
          tape, p.treat, tape.concat_cols(tape.concat_cols(z_samp, s_samp), h), dropout_rng,
          keep);
      fold(sum_treat, bernoulli_ll_sum(tape, w, logit));
      const ad::Array& lv = tape.value(logit);
      const ad::Array& wv = tape.value(w);
      for (std::size_t r = 0; r < B; ++r)
        if (std::abs(lv[r]) > kSaturationLogit && (lv[r] > 0.0) != (wv[r] == 1.0))
          ++g.saturated_labels;
    }

    if (cfg.beta > 0.0) {
      const Id y = tape.input(column(data, rows, t, false));
      const Id head = mlp_forward(tape, p.outcome, tape.concat_cols(z_samp, h), dropout_rng,
                                  keep);
      if (cfg.binary_outcome) {
        fold(sum_out, bernoulli_ll_sum(tape, y, head));
      } else {
        const Id out_mu = tape.slice_cols(head, 0, 1);
        const Id var = tape.add_const(tape.softplus(tape.slice_cols(head, 1, 2)), 1e-6);
        const Id quad = tape.mul(tape.square(tape.sub(y, out_mu)), tape.reciprocal(var));
        fold(sum_out,
             tape.scale(tape.sum(tape.add_const(tape.add(tape.log(var), quad), kLn2Pi)), -0.5));
      }
    }

    prev_s = s_samp;
    prev_z = z_samp;
    first = false;
  }

  const double inv_b = 1.0 / static_cast<double>(B);
  g.neg_elbo = tape.scale(tape.sub(tape.add(sum_kl_s, sum_kl_z), sum_recon), inv_b);
  // The minimized objective discounts the instrument channel's KL when
  // kl_s_weight < 1 (free capacity against posterior collapse); with the
  // weight at 1 and both predictor weights at 0 the loss node is the negated
  // ELBO itself.
  Id loss = g.neg_elbo;
  if (cfg.kl_s_weight != 1.0)
    loss = tape.sub(loss, tape.scale(sum_kl_s, (1.0 - cfg.kl_s_weight) * inv_b));
  if (cfg.alpha > 0.0) loss = tape.sub(loss, tape.scale(sum_treat, cfg.alpha * inv_b));
  if (cfg.beta > 0.0) loss = tape.sub(loss, tape.scale(sum_out, cfg.beta * inv_b));
  g.loss = loss;

  g.recon_ll = tape.value(sum_recon)[0] * inv_b;
  g.kl_s = tape.value(sum_kl_s)[0] * inv_b;
  g.kl_z = tape.value(sum_kl_z)[0] * inv_b;
  g.treat_ll = cfg.alpha > 0.0 ? tape.value(sum_treat)[0] * inv_b : 0.0;
  g.outcome_ll = cfg.beta > 0.0 ? tape.value(sum_out)[0] * inv_b : 0.0;
  return g;
}

std::vector<double> encode_history(const TdcivModel& model, const PanelDataset& data,
                                   std::size_t row, std::size_t t) {
  model.validate();
  if (data.dim_x != model.config.dim_x)
    throw ContractError("encode_history: dataset dim_x " + std::to_string(data.dim_x) +
                        " != model dim_x " + std::to_string(model.config.dim_x));
  if (row >= data.n) throw ContractError("encode_history: row out of range");
  if (t < 1 || t > data.horizon)
    throw ContractError("encode_history: t = " + std::to_string(t) + " outside [1, " +
                        std::to_string(data.horizon) + "]");

  Tape tape;
  const ParamIds p = push_params(tape, model);
  const std::size_t rows_arr[] = {row};
  Id h = tape.tile_rows(p.h0, 1);
  Id c = tape.tile_rows(p.c0, 1);
  for (std::size_t k = 1; k <= t; ++k) {
    const Id in = tape.input(step_input(data, rows_arr, k));
    std::tie(h, c) = lstm_step(tape, in, h, c, p, model.config.hidden);
  }
  const ad::Array& hv = tape.value(h);
  return {hv.data(), hv.data() + hv.size()};
}

std::pair<GaussianParams, GaussianParams> encode_latents(const TdcivModel& model,
                                                         std::span<const double> h_t,
                                                         std::span<const double> prev_s,
                                                         std::span<const double> prev_z) {
  model.validate();
  const ModelConfig& cfg = model.config;
  if (h_t.size() != cfg.hidden)
    throw ShapeError("encode_latents: hidden state length " + std::to_string(h_t.size()) +
                     " != " + std::to_string(cfg.hidden));
  if (prev_s.size() != cfg.dim_s || prev_z.size() != cfg.dim_z)
    throw ShapeError("encode_latents: previous latent lengths (" + std::to_string(prev_s.size()) +
                     ", " + std::to_string(prev_z.size()) + ") != (" + std::to_string(cfg.dim_s) +
                     ", " + std::to_string(cfg.dim_z) + ")");

  Tape tape;
  const ParamIds p = push_params(tape, model);
  auto as_row = [&](std::span<const double> v) {
    return tape.input(ad::Array::from_matrix(1, v.size(), {v.begin(), v.end()}));
  };
  const Id h = as_row(h_t);
  const Id es = mlp_forward(tape, p.enc_s, tape.concat_cols(h, as_row(prev_s)), nullptr, 1.0);
  const Id ez = mlp_forward(tape, p.enc_z, tape.concat_cols(h, as_row(prev_z)), nullptr, 1.0);

  auto split = [&](Id raw, std::size_t d) {
    // Build every node before taking value references: pushes can reallocate.
    const Id mu_id = tape.slice_cols(raw, 0, d);
    const Id lv_id = clamp_log_var(tape, tape.slice_cols(raw, d, 2 * d));
    GaussianParams out;
    const ad::Array& mu = tape.value(mu_id);
    const ad::Array& lv = tape.value(lv_id);
    out.mean = {mu.data(), mu.data() + d};
    out.log_variance = {lv.data(), lv.data() + d};
    return out;
  };
  return {split(es, cfg.dim_s), split(ez, cfg.dim_z)};
}

}  // namespace tdciv::vae

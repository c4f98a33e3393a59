#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tdciv/errors.hpp"
#include "tdciv/generator.hpp"
#include "tdciv/gradcheck.hpp"
#include "tdciv/model.hpp"
#include "tdciv/rng.hpp"

using namespace tdciv;
using namespace tdciv::vae;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("tdciv_seqvae_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void zero_parameters(TdcivModel& model) {
  for (ad::Array* p : model.parameters()) std::fill(p->data(), p->data() + p->size(), 0.0);
}

// Hand-rolled panel: one row, dim_x = 1, horizon 2.
PanelDataset tiny_panel() {
  PanelDataset d;
  d.n = 1;
  d.horizon = 2;
  d.dim_x = 1;
  d.x = {0.7, -0.4};
  d.w = {1.0, 0.0};
  d.y = {0.3, 1.1};
  d.validate();
  return d;
}

PanelDataset toy_panel(std::uint64_t seed, std::size_t n, std::size_t horizon) {
  sim::GenConfig gc;
  gc.n_samples = n;
  gc.horizon = horizon;
  gc.dim_x = 2;
  gc.dim_u = 2;
  gc.seed = seed;
  gc.keep_latents = false;
  return sim::generate_dataset(gc);
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST_CASE("divergence and likelihood helpers match their closed forms") {
  GaussianParams std1{{0.0}, {0.0}};
  CHECK(kl_gaussian(std1, std1) == 0.0);

  GaussianParams shifted{{1.0}, {0.0}};
  CHECK(kl_gaussian(shifted, std1) == doctest::Approx(0.5).epsilon(1e-14));

  // KL(N(0,4) || N(0,1)) = 0.5 (log(1/4) + 4 - 1) = 1.5 - log 2.
  GaussianParams wide{{0.0}, {std::log(4.0)}};
  CHECK(kl_gaussian(wide, std1) ==
        doctest::Approx(1.5 - std::log(2.0)).epsilon(1e-12));
  CHECK(kl_gaussian(wide, std1) == doctest::Approx(0.8068528194400546).epsilon(1e-14));

  // Multi-coordinate form sums per-coordinate terms.
  GaussianParams q{{0.3, -0.8}, {0.4, -0.7}};
  GaussianParams p{{-0.5, 0.2}, {-0.2, 0.9}};
  double by_parts = kl_gaussian({{0.3}, {0.4}}, {{-0.5}, {-0.2}}) +
                    kl_gaussian({{-0.8}, {-0.7}}, {{0.2}, {0.9}});
  CHECK(kl_gaussian(q, p) == doctest::Approx(by_parts).epsilon(1e-14));

  CHECK(bernoulli_log_likelihood(0.0, 1.0) == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
  CHECK(bernoulli_log_likelihood(0.0, 0.0) == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
  CHECK(bernoulli_log_likelihood(3.0, 1.0) ==
        doctest::Approx(-std::log1p(std::exp(-3.0))).epsilon(1e-12));
  // Far into saturation with the wrong label: finite, roughly -|logit|.
  CHECK(std::isfinite(bernoulli_log_likelihood(200.0, 0.0)));
  CHECK(bernoulli_log_likelihood(200.0, 0.0) == doctest::Approx(-200.0).epsilon(1e-12));
  CHECK_THROWS_AS(bernoulli_log_likelihood(0.0, 0.5), DomainError);

  CHECK(gaussian_log_likelihood(0.0, 0.0, 1.0) ==
        doctest::Approx(-0.5 * std::log(2.0 * 3.14159265358979323846)).epsilon(1e-14));
  CHECK(gaussian_log_likelihood(2.0, 1.0, 4.0) ==
        doctest::Approx(-0.5 * (std::log(2.0 * 3.14159265358979323846 * 4.0) + 0.25))
            .epsilon(1e-14));
}

TEST_CASE("closed-form divergence agrees with a Monte Carlo estimate") {
  GaussianParams q{{0.3, -0.8}, {0.4, -0.7}};
  GaussianParams p{{-0.5, 0.2}, {-0.2, 0.9}};
  const double analytic = kl_gaussian(q, p);

  Rng rng(91);
  const std::size_t draws = 200000;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    std::vector<double> z = sample_reparam(q, rng);
    double diff = 0.0;
    for (std::size_t d = 0; d < z.size(); ++d)
      diff += gaussian_log_likelihood(z[d], q.mean[d], std::exp(q.log_variance[d])) -
              gaussian_log_likelihood(z[d], p.mean[d], std::exp(p.log_variance[d]));
    sum += diff;
    sum_sq += diff * diff;
  }
  const double mc = sum / draws;
  const double var = (sum_sq / draws - mc * mc) / draws;
  const double se = std::sqrt(var);
  CHECK(std::abs(analytic - mc) <= 3.0 * se + 1e-12);
}

TEST_CASE("reparameterized sampling has the stated moments") {
  GaussianParams params{{1.5}, {std::log(0.25)}};
  Rng rng(17);
  const std::size_t draws = 200000;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double z = sample_reparam(params, rng)[0];
    sum += z;
    sum_sq += z * z;
  }
  const double mean = sum / draws;
  const double var = sum_sq / draws - mean * mean;
  CHECK(mean == doctest::Approx(1.5).epsilon(0.005));
  CHECK(var / 0.25 == doctest::Approx(1.0).epsilon(0.02));

  // Collapsed variance: the draw is the mean.
  GaussianParams spike{{-2.0}, {-50.0}};
  CHECK(sample_reparam(spike, rng)[0] == doctest::Approx(-2.0).epsilon(1e-10));
}

TEST_CASE("hidden state: zero parameters give a zero state; information flows forward only") {
  ModelConfig mc;
  mc.dim_x = 1;
  mc.dim_s = 1;
  mc.dim_z = 2;
  mc.hidden = 4;
  mc.fc_hidden = 4;
  mc.init_sd = 0.5;

  PanelDataset d;
  d.n = 1;
  d.horizon = 3;
  d.dim_x = 1;
  d.x = {0.7, -0.4, 1.2};
  d.w = {1.0, 0.0, 1.0};
  d.y = {0.3, 1.1, -0.6};
  d.validate();

  TdcivModel zero = TdcivModel::init(mc, 5);
  zero_parameters(zero);
  for (std::size_t t = 1; t <= 3; ++t) {
    const auto h = encode_history(zero, d, 0, t);
    REQUIRE(h.size() == mc.hidden);
    for (double v : h) CHECK(v == 0.0);
  }

  TdcivModel model = TdcivModel::init(mc, 5);
  const auto h2 = encode_history(model, d, 0, 2);

  PanelDataset future = d;
  future.x_at(0, 3, 0) += 1.0;  // later input; must not reach H_2
  const auto h2_future = encode_history(model, future, 0, 2);
  CHECK(h2 == h2_future);

  PanelDataset past = d;
  past.x_at(0, 1, 0) += 1.0;  // earlier input; must reach H_3
  const auto h3 = encode_history(model, d, 0, 3);
  const auto h3_past = encode_history(model, past, 0, 3);
  CHECK(h3 != h3_past);
}

TEST_CASE("one recurrent step reproduces the gate equations computed by hand") {
  ModelConfig mc;
  mc.dim_x = 1;  // input_dim = 3
  mc.dim_s = 1;
  mc.dim_z = 1;
  mc.hidden = 1;
  mc.fc_hidden = 2;
  TdcivModel model = TdcivModel::init(mc, 1);

  // lstm_w is [input_dim + hidden, 4] with gate columns [i | f | g | o].
  std::vector<double> w = {0.10, -0.20, 0.30,  0.40,   // x row
                           0.05, 0.15,  -0.25, 0.35,   // w_prev row
                           -0.30, 0.20, 0.10,  -0.15,  // y_prev row
                           0.25, -0.10, 0.45,  0.05};  // h_prev row
  model.lstm_w = ad::Array::from_matrix(4, 4, w);
  model.lstm_b = ad::Array::from_vector({0.01, -0.02, 0.03, 0.04});
  model.h0 = ad::Array::from_vector({0.2});
  model.c0 = ad::Array::from_vector({-0.3});

  const PanelDataset d = tiny_panel();

  auto step = [&](const std::vector<double>& in, double h_prev, double c_prev) {
    double pre[4];
    for (int gate = 0; gate < 4; ++gate)
      pre[gate] = in[0] * w[0 * 4 + gate] + in[1] * w[1 * 4 + gate] + in[2] * w[2 * 4 + gate] +
                  h_prev * w[3 * 4 + gate] + model.lstm_b.storage()[gate];
    const double i = sigmoid(pre[0]);
    const double f = sigmoid(pre[1]);
    const double g = std::tanh(pre[2]);
    const double o = sigmoid(pre[3]);
    const double c = f * c_prev + i * g;
    return std::pair<double, double>{o * std::tanh(c), c};
  };

  // t = 1: lag slots are zero.
  auto [h1, c1] = step({0.7, 0.0, 0.0}, 0.2, -0.3);
  CHECK(encode_history(model, d, 0, 1)[0] == doctest::Approx(h1).epsilon(1e-15));

  // t = 2 consumes [x_2, w_1, y_1] and the step-1 state.
  auto [h2, c2] = step({-0.4, 1.0, 0.3}, h1, c1);
  CHECK(encode_history(model, d, 0, 2)[0] == doctest::Approx(h2).epsilon(1e-15));
}

TEST_CASE("latent encoders with zero weights emit standard-normal posteriors") {
  ModelConfig mc;
  mc.dim_x = 2;
  mc.dim_s = 1;
  mc.dim_z = 2;
  mc.hidden = 3;
  mc.fc_hidden = 4;
  TdcivModel model = TdcivModel::init(mc, 11);
  zero_parameters(model);

  std::vector<double> h = {0.4, -0.9, 2.0};
  std::vector<double> prev_s = {1.7};
  std::vector<double> prev_z = {-0.3, 0.8};
  auto [s_post, z_post] = encode_latents(model, h, prev_s, prev_z);
  REQUIRE(s_post.dim() == 1);
  REQUIRE(z_post.dim() == 2);
  for (double v : s_post.mean) CHECK(v == 0.0);
  for (double v : s_post.log_variance) CHECK(v == 0.0);
  for (double v : z_post.mean) CHECK(v == 0.0);
  for (double v : z_post.log_variance) CHECK(v == 0.0);
}

TEST_CASE("loss graph: predictor terms compose and vanish exactly when weighted zero") {
  PanelDataset d = toy_panel(21, 12, 3);
  std::vector<std::size_t> rows(d.n);
  std::iota(rows.begin(), rows.end(), 0);

  ModelConfig mc;
  mc.dim_x = d.dim_x;
  mc.dim_s = 1;
  mc.dim_z = 2;
  mc.hidden = 5;
  mc.fc_hidden = 6;
  mc.init_sd = 0.2;

  // alpha = beta = 0: the loss node IS the negated evidence bound.
  {
    mc.alpha = 0.0;
    mc.beta = 0.0;
    TdcivModel model = TdcivModel::init(mc, 3);
    ad::Tape tape;
    Rng reparam(5), dropout(6);
    BatchGraph g = build_loss_graph(tape, model, d, rows, &reparam, &dropout);
    CHECK(g.loss == g.neg_elbo);
    CHECK(std::isfinite(tape.value(g.loss).storage()[0]));
    CHECK(g.treat_ll == 0.0);
    CHECK(g.outcome_ll == 0.0);
  }

  // Weighted case: loss = neg_elbo - alpha * treat_ll - beta * outcome_ll.
  {
    mc.alpha = 2.5;
    mc.beta = 0.75;
    TdcivModel model = TdcivModel::init(mc, 3);
    ad::Tape tape;
    Rng reparam(5), dropout(6);
    BatchGraph g = build_loss_graph(tape, model, d, rows, &reparam, &dropout);
    const double loss = tape.value(g.loss).storage()[0];
    const double neg_elbo = tape.value(g.neg_elbo).storage()[0];
    CHECK(loss ==
          doctest::Approx(neg_elbo - 2.5 * g.treat_ll - 0.75 * g.outcome_ll).epsilon(1e-12));
    CHECK(neg_elbo == doctest::Approx(g.kl_s + g.kl_z - g.recon_ll).epsilon(1e-12));
  }
}

TEST_CASE("loss graph rejects mismatched data and bad rows") {
  PanelDataset d = toy_panel(22, 6, 3);
  std::vector<std::size_t> rows = {0, 1};

  ModelConfig mc;
  mc.dim_x = d.dim_x + 1;  // wrong width
  TdcivModel model = TdcivModel::init(mc, 1);
  ad::Tape tape;
  CHECK_THROWS_AS(build_loss_graph(tape, model, d, rows, nullptr, nullptr), ContractError);

  mc.dim_x = d.dim_x;
  TdcivModel ok = TdcivModel::init(mc, 1);
  std::vector<std::size_t> bad = {0, d.n};
  CHECK_THROWS_AS(build_loss_graph(tape, ok, d, bad, nullptr, nullptr), ContractError);
  CHECK_THROWS_AS(
      build_loss_graph(tape, ok, d, std::vector<std::size_t>{}, nullptr, nullptr),
      ContractError);
}

TEST_CASE("saturated treatment logits are counted, not clamped") {
  PanelDataset d = tiny_panel();
  ModelConfig mc;
  mc.dim_x = 1;
  mc.dim_s = 1;
  mc.dim_z = 1;
  mc.hidden = 2;
  mc.fc_hidden = 2;
  mc.alpha = 1.0;
  mc.beta = 0.0;
  TdcivModel model = TdcivModel::init(mc, 2);
  zero_parameters(model);
  // Treatment head emits a constant huge logit; the panel has w = 0 at t = 2,
  // which is a confidently wrong prediction past the saturation band.
  model.treat.b2 = ad::Array::from_vector({50.0});

  ad::Tape tape;
  std::vector<std::size_t> rows = {0};
  BatchGraph g = build_loss_graph(tape, model, d, rows, nullptr, nullptr);
  CHECK(g.saturated_labels == 1);  // t = 2 only; t = 1 has w = 1 (matching side)
  CHECK(std::isfinite(g.treat_ll));
  // Row total over steps: t = 1 contributes ~0 (confident and right), t = 2
  // pays the full logit (confident and wrong).
  CHECK(g.treat_ll == doctest::Approx(-50.0).epsilon(1e-6));
}

TEST_CASE("dropout masks change the graph; keep-probability one is a no-op") {
  PanelDataset d = toy_panel(23, 8, 3);
  std::vector<std::size_t> rows(d.n);
  std::iota(rows.begin(), rows.end(), 0);

  ModelConfig mc;
  mc.dim_x = d.dim_x;
  mc.dim_z = 2;
  mc.hidden = 4;
  mc.fc_hidden = 4;
  mc.init_sd = 0.2;
  mc.keep_prob = 0.5;
  TdcivModel model = TdcivModel::init(mc, 9);

  auto loss_with = [&](double keep, bool use_rng) {
    TdcivModel m = model;
    m.config.keep_prob = keep;
    ad::Tape tape;
    Rng reparam(41), dropout(42);
    BatchGraph g =
        build_loss_graph(tape, m, d, rows, &reparam, use_rng ? &dropout : nullptr);
    return tape.value(g.loss).storage()[0];
  };

  CHECK(loss_with(0.5, true) != loss_with(0.5, false));
  CHECK(loss_with(1.0, true) == loss_with(1.0, false));
}

TEST_CASE("loss gradient agrees with central finite differences") {
  PanelDataset d = toy_panel(25, 2, 2);

  ModelConfig mc;
  mc.dim_x = d.dim_x;
  mc.dim_s = 1;
  mc.dim_z = 2;
  mc.hidden = 3;
  mc.fc_hidden = 4;
  mc.alpha = 1.3;
  mc.beta = 0.7;
  mc.keep_prob = 0.8;
  mc.init_sd = 0.3;
  const TdcivModel reference = TdcivModel::init(mc, 77);

  std::vector<double> point;
  for (const ad::Array* p : reference.parameters())
    point.insert(point.end(), p->storage().begin(), p->storage().end());

  std::vector<std::size_t> rows = {0, 1};
  auto build = [&](ad::Tape& tape, std::span<const double> coords) {
    TdcivModel model = reference;
    std::size_t offset = 0;
    for (ad::Array* p : model.parameters()) {
      std::copy(coords.begin() + offset, coords.begin() + offset + p->size(), p->data());
      offset += p->size();
    }
    Rng reparam(7), dropout(9);  // same draws every evaluation
    BatchGraph g = build_loss_graph(tape, model, d, rows, &reparam, &dropout);
    return ad::BuiltFunction{g.loss, g.params};
  };

  const auto result = ad::grad_check(build, point, 1e-5);
  CHECK(result.max_rel_error <= 1e-4);
}

TEST_CASE("training is deterministic, reduces the toy loss, and respects zero step size") {
  PanelDataset d = toy_panel(31, 64, 4);

  ModelConfig mc;
  mc.dim_x = d.dim_x;
  mc.dim_z = 3;
  mc.hidden = 16;
  mc.fc_hidden = 16;
  mc.init_sd = 0.05;

  TrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 16;
  tc.learning_rate = 1e-3;
  tc.seed = 3;

  TdcivModel a = TdcivModel::init(mc, 13);
  TdcivModel b = TdcivModel::init(mc, 13);
  TrainTrace trace_a = train(a, d, tc);
  TrainTrace trace_b = train(b, d, tc);

  REQUIRE(trace_a.epochs.size() == 8);
  CHECK(trace_a.epochs.back().loss < trace_a.epochs.front().loss);

  REQUIRE(trace_b.epochs.size() == trace_a.epochs.size());
  for (std::size_t e = 0; e < trace_a.epochs.size(); ++e) {
    CHECK(trace_a.epochs[e].loss == trace_b.epochs[e].loss);
    CHECK(trace_a.epochs[e].neg_elbo == trace_b.epochs[e].neg_elbo);
    CHECK(trace_a.epochs[e].recon_ll == trace_b.epochs[e].recon_ll);
  }
  {
    auto pa = a.parameters();
    auto pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->storage() == pb[i]->storage());
  }

  // Zero learning rate: statistics are computed but parameters never move.
  TdcivModel frozen = TdcivModel::init(mc, 13);
  const TdcivModel before = frozen;
  TrainConfig still = tc;
  still.learning_rate = 0.0;
  train(frozen, d, still);
  auto pf = frozen.parameters();
  auto p0 = before.parameters();
  for (std::size_t i = 0; i < pf.size(); ++i) CHECK(pf[i]->storage() == p0[i]->storage());

  CHECK_THROWS_AS(train(frozen, PanelDataset{}, tc), ContractError);
}

TEST_CASE("representation extraction is deterministic and matches the single-row path") {
  PanelDataset d = toy_panel(37, 20, 4);

  ModelConfig mc;
  mc.dim_x = d.dim_x;
  mc.dim_s = 1;
  mc.dim_z = 2;
  mc.hidden = 6;
  mc.fc_hidden = 6;
  mc.init_sd = 0.2;
  TdcivModel model = TdcivModel::init(mc, 41);

  LatentPath one = extract_representations(model, d);
  LatentPath two = extract_representations(model, d);
  CHECK(one.s_mean == two.s_mean);
  CHECK(one.z_mean == two.z_mean);
  CHECK(one.h == two.h);
  REQUIRE(one.n == d.n);
  REQUIRE(one.horizon == d.horizon);
  REQUIRE(one.s_mean.size() == d.n * d.horizon * mc.dim_s);
  REQUIRE(one.z_mean.size() == d.n * d.horizon * mc.dim_z);
  REQUIRE(one.h.size() == d.n * d.horizon * mc.hidden);

  // Row 3, t = 2 against the one-row encoders (batched and single-row paths
  // may round differently, hence the tolerance instead of bit equality).
  const std::size_t row = 3, t = 2;
  const auto h = encode_history(model, d, row, t);
  for (std::size_t k = 0; k < mc.hidden; ++k)
    CHECK(one.h_at(row, t, k) == doctest::Approx(h[k]).epsilon(1e-12));

  const auto h_prev = encode_history(model, d, row, t - 1);
  std::vector<double> prev_s(mc.dim_s), prev_z(mc.dim_z);
  {
    auto [s1, z1] = encode_latents(model, encode_history(model, d, row, 1),
                                   std::vector<double>(mc.dim_s, 0.0),
                                   std::vector<double>(mc.dim_z, 0.0));
    prev_s = s1.mean;
    prev_z = z1.mean;
  }
  auto [s2, z2] = encode_latents(model, h, prev_s, prev_z);
  for (std::size_t dd = 0; dd < mc.dim_s; ++dd)
    CHECK(one.s_mean_at(row, t, dd) == doctest::Approx(s2.mean[dd]).epsilon(1e-12));
  for (std::size_t dd = 0; dd < mc.dim_z; ++dd)
    CHECK(one.z_mean_at(row, t, dd) == doctest::Approx(z2.mean[dd]).epsilon(1e-12));
}

TEST_CASE("checkpoints round-trip exactly and reject tampering") {
  PanelDataset d = toy_panel(43, 6, 3);
  ModelConfig mc;
  mc.dim_x = d.dim_x;
  mc.dim_z = 2;
  mc.hidden = 4;
  mc.fc_hidden = 5;
  mc.alpha = 2.0;
  mc.beta = 0.5;
  mc.keep_prob = 0.9;
  mc.init_sd = 0.15;
  TdcivModel model = TdcivModel::init(mc, 55);

  const std::string path = temp_path("ckpt.json");
  save_model(model, path);
  TdcivModel loaded = load_model(path);

  CHECK(loaded.config.dim_x == mc.dim_x);
  CHECK(loaded.config.alpha == mc.alpha);
  CHECK(loaded.config.keep_prob == mc.keep_prob);
  auto pa = model.parameters();
  auto pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->storage() == pb[i]->storage());

  LatentPath from_original = extract_representations(model, d);
  LatentPath from_loaded = extract_representations(loaded, d);
  CHECK(from_original.s_mean == from_loaded.s_mean);
  CHECK(from_original.h == from_loaded.h);

  using nlohmann::json;
  const json doc = json::parse(slurp(path));

  {
    json bad = doc;
    bad["version"] = 999;
    const std::string p = temp_path("ckpt_version.json");
    std::ofstream(p) << bad.dump();
    CHECK_THROWS_AS(load_model(p), ParseError);
  }
  {
    json bad = doc;
    bad["kind"] = "something-else";
    const std::string p = temp_path("ckpt_kind.json");
    std::ofstream(p) << bad.dump();
    CHECK_THROWS_AS(load_model(p), ParseError);
  }
  {
    json bad = doc;
    bad["params"]["lstm.b"]["data"].erase(0);  // truncated array
    const std::string p = temp_path("ckpt_shape.json");
    std::ofstream(p) << bad.dump();
    CHECK_THROWS_AS(load_model(p), ParseError);
  }
  {
    const std::string p = temp_path("ckpt_garbage.json");
    std::ofstream(p) << "not json at all";
    CHECK_THROWS_AS(load_model(p), ParseError);
  }
  CHECK_THROWS_AS(load_model(temp_path("ckpt_missing.json")), ParseError);
}

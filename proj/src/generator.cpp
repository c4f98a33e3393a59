#include "tdciv/generator.hpp"

#include <cmath>
#include <string>

#include "tdciv/errors.hpp"

namespace tdciv::sim {
namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// One autoregressive step for a [dim]-vector series with self and treatment
// lag coefficients; zero pre-history.
void ar_step(const Grid3& series, const Grid2& w, const std::vector<std::vector<double>>& self_k,
             const std::vector<std::vector<double>>& treat_k, std::size_t p, std::size_t i,
             std::size_t t, double* out) {
  const std::size_t d = series.dim;
  for (std::size_t j = 0; j < d; ++j) out[j] = 0.0;
  for (std::size_t lag = 1; lag <= p; ++lag) {
    if (t < lag + 1) continue;  // t - lag < 1: zero history
    const std::size_t tp = t - lag;
    const double wv = w.n ? w.at(i, tp) : 0.0;
    for (std::size_t j = 0; j < d; ++j)
      out[j] += self_k[lag - 1][j] * series.at(i, tp, j) + treat_k[lag - 1][j] * wv;
  }
  const double inv_p = 1.0 / static_cast<double>(p);
  for (std::size_t j = 0; j < d; ++j) out[j] *= inv_p;
}

}  // namespace

void GenConfig::validate() const {
  if (n_samples == 0) throw ContractError("gen: n_samples must be positive");
  if (horizon < 2) throw ContractError("gen: horizon must be at least 2");
  if (p_order == 0) throw ContractError("gen: p_order must be at least 1");
  if (p_order >= horizon)
    throw ContractError("gen: p_order " + std::to_string(p_order) +
                        " must be smaller than horizon " + std::to_string(horizon));
  if (dim_x == 0 || dim_u == 0) throw ContractError("gen: dim_x and dim_u must be positive");
  if (!(noise_sd_x > 0.0) || !(noise_sd_u > 0.0) || !(noise_sd_s > 0.0))
    throw ContractError("gen: noise standard deviations must be positive");
  if (proxy_injection && !(proxy_noise_sd > 0.0))
    throw ContractError("gen: proxy_noise_sd must be positive");
  if (init_sd < 0.0) throw ContractError("gen: init_sd must be non-negative");
}

SystemCoeffs SystemCoeffs::draw(const GenConfig& cfg, Rng& rng) {
  SystemCoeffs k = zeros(cfg);
  const double p = static_cast<double>(cfg.p_order);
  for (std::size_t i = 0; i < cfg.p_order; ++i) {
    const double frac = static_cast<double>(i + 1) / p;
    for (std::size_t j = 0; j < cfg.dim_x; ++j) k.alpha[i][j] = rng.normal(0.0, 0.5);
    for (std::size_t j = 0; j < cfg.dim_x; ++j) k.omega[i][j] = rng.normal(1.0 - frac, frac);
    for (std::size_t j = 0; j < cfg.dim_u; ++j) k.beta[i][j] = rng.normal(1.0 - frac, frac);
    for (std::size_t j = 0; j < cfg.dim_u; ++j) k.lambda[i][j] = rng.normal(0.0, 0.5);
  }
  for (std::size_t j = 0; j < cfg.dim_x; ++j) k.mu_x[j] = rng.normal();
  for (std::size_t j = 0; j < cfg.dim_u; ++j) k.mu_u[j] = rng.normal();
  k.mu_s = rng.normal();
  for (std::size_t j = 0; j < cfg.dim_z(); ++j) k.mu_z[j] = rng.normal();
  k.c = rng.normal();
  // Relevance guard: the instrument's leverage on the treatment scales with
  // |c·μ_S|. A draw near zero produces a dataset where the instrument is
  // structurally present but statistically vacuous — no estimator, oracle or
  // learned, can identify the effect there. Redraw the two gate coefficients
  // until the product clears a floor; roughly a third of raw draws repeat.
  while (std::abs(k.mu_s * k.c) < 0.25) {
    k.mu_s = rng.normal();
    k.c = rng.normal();
  }
  return k;
}

SystemCoeffs SystemCoeffs::zeros(const GenConfig& cfg) {
  SystemCoeffs k;
  k.alpha.assign(cfg.p_order, std::vector<double>(cfg.dim_x, 0.0));
  k.omega.assign(cfg.p_order, std::vector<double>(cfg.dim_x, 0.0));
  k.beta.assign(cfg.p_order, std::vector<double>(cfg.dim_u, 0.0));
  k.lambda.assign(cfg.p_order, std::vector<double>(cfg.dim_u, 0.0));
  k.mu_x.assign(cfg.dim_x, 0.0);
  k.mu_u.assign(cfg.dim_u, 0.0);
  k.mu_z.assign(cfg.dim_z(), 0.0);
  return k;
}

void generate_dynamics(const GenConfig& cfg, const SystemCoeffs& k, const Grid2& w, Rng& rng,
                       Grid3& x_out, Grid3& u_out, const Grid3* x_prefix, const Grid3* u_prefix) {
  const std::size_t n = cfg.n_samples, T = cfg.horizon;
  x_out = Grid3(n, T, cfg.dim_x);
  u_out = Grid3(n, T, cfg.dim_u);
  std::vector<double> buf(std::max(cfg.dim_x, cfg.dim_u));
  for (std::size_t t = 1; t <= T; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      if (x_prefix && t <= x_prefix->horizon) {
        for (std::size_t j = 0; j < cfg.dim_x; ++j) x_out.at(i, t, j) = x_prefix->at(i, t, j);
      } else {
        ar_step(x_out, w, k.alpha, k.omega, cfg.p_order, i, t, buf.data());
        for (std::size_t j = 0; j < cfg.dim_x; ++j) {
          double v = buf[j];
          if (t == 1) v += rng.normal(0.0, cfg.init_sd);
          x_out.at(i, t, j) = v + rng.normal(0.0, cfg.noise_sd_x);
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (u_prefix && t <= u_prefix->horizon) {
        for (std::size_t j = 0; j < cfg.dim_u; ++j) u_out.at(i, t, j) = u_prefix->at(i, t, j);
      } else {
        ar_step(u_out, w, k.beta, k.lambda, cfg.p_order, i, t, buf.data());
        for (std::size_t j = 0; j < cfg.dim_u; ++j) {
          double v = buf[j];
          if (t == 1) v += rng.normal(0.0, cfg.init_sd);
          u_out.at(i, t, j) = v + rng.normal(0.0, cfg.noise_sd_u);
        }
      }
    }
  }
}

Grid2 generate_civ_path(const GenConfig& cfg, Rng& rng, const Grid2* s_prefix) {
  const std::size_t n = cfg.n_samples, T = cfg.horizon;
  Grid2 s(n, T);
  const double inv_p = 1.0 / static_cast<double>(cfg.p_order);
  for (std::size_t t = 1; t <= T; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      if (s_prefix && t <= s_prefix->horizon) {
        s.at(i, t) = s_prefix->at(i, t);
        continue;
      }
      double acc = 0.0;
      for (std::size_t lag = 1; lag <= cfg.p_order; ++lag)
        if (t >= lag + 1) acc += s.at(i, t - lag);
      double v = acc * inv_p;
      if (t == 1) v += rng.normal(0.0, cfg.init_sd);
      s.at(i, t) = v + rng.normal(0.0, cfg.noise_sd_s);
    }
  return s;
}

Grid3 generate_conditioning(const GenConfig& cfg, const Grid3& x, Rng& rng) {
  const std::size_t n = cfg.n_samples, T = cfg.horizon, d = cfg.dim_z();
  Grid3 z(n, T, d);
  const double inv_p = 1.0 / static_cast<double>(cfg.p_order);
  for (std::size_t t = 1; t <= T; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t lag = 1; lag <= cfg.p_order; ++lag) {
          if (t >= lag + 1) acc += z.at(i, t - lag, j);
          acc += x.at(i, t, j);  // X enters at the current index p times
        }
        z.at(i, t, j) = acc * inv_p + rng.normal(0.0, cfg.noise_sd_u);
      }
  return z;
}

namespace {

// θ_t for one sample: loadings dotted with the last-p sums (current step
// included) of each component series.
double treatment_index(const GenConfig& cfg, const SystemCoeffs& k, const Grid3& x,
                       const Grid3& u, const Grid2& s, const Grid3& z, std::size_t i,
                       std::size_t t) {
  double theta = 0.0;
  for (std::size_t lag = 0; lag < cfg.p_order; ++lag) {
    if (t < lag + 1) continue;
    const std::size_t tp = t - lag;
    for (std::size_t j = 0; j < cfg.dim_x; ++j) theta += k.mu_x[j] * x.at(i, tp, j);
    for (std::size_t j = 0; j < cfg.dim_u; ++j) theta += k.mu_u[j] * u.at(i, tp, j);
    theta += k.mu_s * s.at(i, tp);
    for (std::size_t j = 0; j < cfg.dim_z(); ++j) theta += k.mu_z[j] * z.at(i, tp, j);
  }
  return theta;
}

// Cross-sample z-score in place; a (near-)constant column becomes zero.
void zscore(std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double m = 0.0;
  for (double x : v) m += x;
  m /= n;
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  const double sd = std::sqrt(var / n);
  if (sd < 1e-12) {
    for (double& x : v) x = 0.0;
  } else {
    for (double& x : v) x = (x - m) / sd;
  }
}

void draw_treatment_step(const GenConfig& cfg, const SystemCoeffs& k, const Grid3& x,
                         const Grid3& u, const Grid2& s, const Grid3& z, std::size_t t, Rng& rng,
                         Grid2& w_out) {
  const std::size_t n = cfg.n_samples;
  std::vector<double> theta(n, 0.0);
  if (!cfg.standardize_logits) {
    for (std::size_t i = 0; i < n; ++i) theta[i] = treatment_index(cfg, k, x, u, s, z, i, t);
  } else {
    // Standardize each component's lag-window sum across samples before the
    // loading is applied. The raw index lets the integrated Z path dominate
    // and dilute every other driver as t grows (the instrument's first-stage
    // strength would decay toward zero); per-component scaling keeps each
    // structural role time-stable. The summed index is standardized once
    // more so the logistic operates in its responsive range at every step.
    std::vector<double> comp(n);
    const auto fold = [&](double loading, auto&& window_sum) {
      for (std::size_t i = 0; i < n; ++i) comp[i] = window_sum(i);
      zscore(comp);
      for (std::size_t i = 0; i < n; ++i) theta[i] += loading * comp[i];
    };
    const auto lag_ok = [&](std::size_t lag) { return t >= lag + 1; };
    for (std::size_t j = 0; j < cfg.dim_x; ++j)
      fold(k.mu_x[j], [&](std::size_t i) {
        double acc = 0.0;
        for (std::size_t lag = 0; lag < cfg.p_order; ++lag)
          if (lag_ok(lag)) acc += x.at(i, t - lag, j);
        return acc;
      });
    for (std::size_t j = 0; j < cfg.dim_u; ++j)
      fold(k.mu_u[j], [&](std::size_t i) {
        double acc = 0.0;
        for (std::size_t lag = 0; lag < cfg.p_order; ++lag)
          if (lag_ok(lag)) acc += u.at(i, t - lag, j);
        return acc;
      });
    fold(k.mu_s, [&](std::size_t i) {
      double acc = 0.0;
      for (std::size_t lag = 0; lag < cfg.p_order; ++lag)
        if (lag_ok(lag)) acc += s.at(i, t - lag);
      return acc;
    });
    for (std::size_t j = 0; j < cfg.dim_z(); ++j)
      fold(k.mu_z[j], [&](std::size_t i) {
        double acc = 0.0;
        for (std::size_t lag = 0; lag < cfg.p_order; ++lag)
          if (lag_ok(lag)) acc += z.at(i, t - lag, j);
        return acc;
      });
    zscore(theta);
  }
  for (std::size_t i = 0; i < n; ++i)
    w_out.at(i, t) = rng.uniform() < sigmoid(k.c * theta[i]) ? 1.0 : 0.0;
}

}  // namespace

Grid2 generate_treatment(const GenConfig& cfg, const SystemCoeffs& k, const Grid3& x,
                         const Grid3& u, const Grid2& s, const Grid3& z, Rng& rng) {
  Grid2 w(cfg.n_samples, cfg.horizon);
  for (std::size_t t = 1; t <= cfg.horizon; ++t)
    draw_treatment_step(cfg, k, x, u, s, z, t, rng, w);
  return w;
}

Grid2 generate_outcome(const GenConfig& cfg, const Grid2& w, const Grid3& z, const Grid3& u) {
  Grid2 y(cfg.n_samples, cfg.horizon);
  for (std::size_t i = 0; i < cfg.n_samples; ++i)
    for (std::size_t t = 1; t <= cfg.horizon; ++t) {
      double zsum = 0.0, usum = 0.0;
      for (std::size_t j = 0; j < z.dim; ++j) zsum += z.at(i, t, j);
      for (std::size_t j = 0; j < u.dim; ++j) usum += u.at(i, t, j);
      y.at(i, t) = cfg.rho_w * w.at(i, t) + cfg.rho_z * zsum + cfg.rho_u * usum;
    }
  return y;
}

PanelDataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.n_samples, T = cfg.horizon;

  const SystemCoeffs k = SystemCoeffs::draw(cfg, rng);
  Grid3 x(n, T, cfg.dim_x), u(n, T, cfg.dim_u), z(n, T, cfg.dim_z());
  Grid2 s(n, T), w(n, T);
  std::vector<double> buf(std::max(cfg.dim_x, cfg.dim_u));
  const double inv_p = 1.0 / static_cast<double>(cfg.p_order);

  // Interleaved in t: the treatment drawn at t feeds X and U at t+1. RNG
  // consumption order per step: X block, U block, S block, Z block (each
  // sample-major, coordinate-minor), then the W uniforms.
  for (std::size_t t = 1; t <= T; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      ar_step(x, w, k.alpha, k.omega, cfg.p_order, i, t, buf.data());
      for (std::size_t j = 0; j < cfg.dim_x; ++j) {
        double v = buf[j];
        if (t == 1) v += rng.normal(0.0, cfg.init_sd);
        x.at(i, t, j) = v + rng.normal(0.0, cfg.noise_sd_x);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      ar_step(u, w, k.beta, k.lambda, cfg.p_order, i, t, buf.data());
      for (std::size_t j = 0; j < cfg.dim_u; ++j) {
        double v = buf[j];
        if (t == 1) v += rng.normal(0.0, cfg.init_sd);
        u.at(i, t, j) = v + rng.normal(0.0, cfg.noise_sd_u);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t lag = 1; lag <= cfg.p_order; ++lag)
        if (t >= lag + 1) acc += s.at(i, t - lag);
      double v = acc * inv_p;
      if (t == 1) v += rng.normal(0.0, cfg.init_sd);
      s.at(i, t) = v + rng.normal(0.0, cfg.noise_sd_s);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cfg.dim_z(); ++j) {
        double acc = 0.0;
        for (std::size_t lag = 1; lag <= cfg.p_order; ++lag) {
          if (t >= lag + 1) acc += z.at(i, t - lag, j);
          acc += x.at(i, t, j);
        }
        z.at(i, t, j) = acc * inv_p + rng.normal(0.0, cfg.noise_sd_u);
      }
    draw_treatment_step(cfg, k, x, u, s, z, t, rng, w);
  }
  const Grid2 y = generate_outcome(cfg, w, z, u);

  PanelDataset data;
  data.n = n;
  data.horizon = T;
  data.dim_x = cfg.dim_x + (cfg.proxy_injection ? 1 : 0);
  data.x.resize(n * T * data.dim_x);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 1; t <= T; ++t)
      for (std::size_t j = 0; j < cfg.dim_x; ++j) data.x_at(i, t, j) = x.at(i, t, j);
  if (cfg.proxy_injection) {
    const std::size_t jp = cfg.dim_x;
    for (std::size_t t = 1; t <= T; ++t)
      for (std::size_t i = 0; i < n; ++i)
        data.x_at(i, t, jp) = s.at(i, t) + rng.normal(0.0, cfg.proxy_noise_sd);
  }
  data.w = w.v;
  data.y = y.v;
  if (cfg.keep_latents) {
    data.dim_u = cfg.dim_u;
    data.u = u.v;
    data.s = s.v;
    data.dim_z = cfg.dim_z();
    data.z = z.v;
  }
  data.true_ace = cfg.rho_w;
  data.validate();
  return data;
}

}  // namespace tdciv::sim

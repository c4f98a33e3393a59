#pragma once

#include <cstdint>
#include <vector>

#include "tdciv/panel.hpp"
#include "tdciv/rng.hpp"

namespace tdciv::sim {

// Synthetic benchmark configuration. The dynamic system is a p-order
// autoregression:
//   X_t = (1/p)·Σ_{i=1..p}(α_i ⊙ X_{t−i} + ω_i W_{t−i}) + ε_X
//   U_t = (1/p)·Σ_{i=1..p}(β_i ⊙ U_{t−i} + λ_i W_{t−i}) + ε_U
//   S_t = (1/p)·Σ_{i=1..p} S_{t−i} + ε_S
//   Z_t = (1/p)·Σ_{i=1..p}(Z_{t−i} + X_t) + ε_Z
//   θ_t = μ_X·X̂_t + μ_U·Û_t + μ_S·Ŝ_t + μ_Z·Ẑ_t   (hats: sums over last p steps)
//   W_t ~ Bernoulli(σ(c·θ_t)),  Y_{t+1} = ρ_W·W_t + ρ_Z·ΣZ_t + ρ_U·ΣU_t
// with α_i, λ_i ~ N(0, 0.5²), ω_i, β_i ~ N(1−i/p, (i/p)²), μ·, c ~ N(0,1),
// ε_X ~ N(0, noise_sd_x²), ε_U, ε_Z ~ N(0, noise_sd_u²), ε_S ~ N(0, noise_sd_s²).
// Pre-history (t ≤ 0) is zero; the t = 1 state of X, U, S additionally draws
// N(0, init_sd²) so the series start with non-degenerate cross-sample
// variance. The CIV innovation keeps unit scale by default: the estimator
// conditions on the instrument's own lags, so the usable instrument variation
// at step t is exactly the fresh innovation ε_S,t — were it of noise scale,
// the instrument would be statically determined by its start value and the
// per-step analysis would be vacuous.
struct GenConfig {
  std::size_t n_samples = 1000;
  std::size_t horizon = 10;  // T
  std::size_t p_order = 1;
  std::size_t dim_x = 3;
  std::size_t dim_u = 3;
  std::uint64_t seed = 1;
  double rho_w = 0.5, rho_z = 0.5, rho_u = 0.5;
  double noise_sd_x = 0.01;
  double noise_sd_u = 0.01;
  double noise_sd_s = 1.0;
  double init_sd = 1.0;
  bool proxy_injection = true;
  double proxy_noise_sd = 0.1;
  // Standardize the treatment index before applying σ(c·θ): each component's
  // lag-window sum is z-scored across samples before its loading applies,
  // and the summed index is z-scored once more. Without this the integrated
  // Z path inflates Var(θ_t) with t, which both saturates the treatment
  // (positivity failure) and dilutes every other driver's first-stage
  // strength toward zero, including the instrument's. The scaling keeps each
  // structural role time-stable; set false for the raw-equation behaviour.
  bool standardize_logits = true;
  bool keep_latents = true;

  std::size_t dim_z() const { return dim_x; }  // Z inherits X's width
  // Throws ContractError on violations (p_order ≥ horizon, non-positive sds).
  void validate() const;
};

// One draw of the dataset-level dynamic system; index [lag][coordinate] with
// lag slot i holding the coefficient for delay i+1.
struct SystemCoeffs {
  std::vector<std::vector<double>> alpha, omega;  // X recursion [p][dim_x]
  std::vector<std::vector<double>> beta, lambda;  // U recursion [p][dim_u]
  std::vector<double> mu_x, mu_u, mu_z;
  double mu_s = 0.0;
  double c = 0.0;

  static SystemCoeffs draw(const GenConfig& cfg, Rng& rng);
  static SystemCoeffs zeros(const GenConfig& cfg);
};

// Dense [n, T] / [n, T, dim] helpers for the series-level operations.
struct Grid2 {
  std::size_t n = 0, horizon = 0;
  std::vector<double> v;
  Grid2() = default;
  Grid2(std::size_t n_, std::size_t t_) : n(n_), horizon(t_), v(n_ * t_, 0.0) {}
  double& at(std::size_t i, std::size_t t) { return v[i * horizon + (t - 1)]; }
  double at(std::size_t i, std::size_t t) const { return v[i * horizon + (t - 1)]; }
};
struct Grid3 {
  std::size_t n = 0, horizon = 0, dim = 0;
  std::vector<double> v;
  Grid3() = default;
  Grid3(std::size_t n_, std::size_t t_, std::size_t d_)
      : n(n_), horizon(t_), dim(d_), v(n_ * t_ * d_, 0.0) {}
  double& at(std::size_t i, std::size_t t, std::size_t j) {
    return v[(i * horizon + (t - 1)) * dim + j];
  }
  double at(std::size_t i, std::size_t t, std::size_t j) const {
    return v[(i * horizon + (t - 1)) * dim + j];
  }
};

// Covariate/confounder dynamics over a given treatment path. A non-null
// prefix pins the first prefix->horizon steps verbatim (no noise or init
// draws for those steps); used by tests to probe the recursion.
void generate_dynamics(const GenConfig& cfg, const SystemCoeffs& k, const Grid2& w, Rng& rng,
                       Grid3& x_out, Grid3& u_out, const Grid3* x_prefix = nullptr,
                       const Grid3* u_prefix = nullptr);

Grid2 generate_civ_path(const GenConfig& cfg, Rng& rng, const Grid2* s_prefix = nullptr);

Grid3 generate_conditioning(const GenConfig& cfg, const Grid3& x, Rng& rng);

Grid2 generate_treatment(const GenConfig& cfg, const SystemCoeffs& k, const Grid3& x,
                         const Grid3& u, const Grid2& s, const Grid3& z, Rng& rng);

Grid2 generate_outcome(const GenConfig& cfg, const Grid2& w, const Grid3& z, const Grid3& u);

// Full orchestration in time order (W_t feeds X_{t+1}, U_{t+1}); appends the
// proxy channel X_proxy,t = S_t + N(0, proxy_noise_sd²) as the last measured
// covariate when proxy_injection is set, and stamps true_ace = rho_w.
PanelDataset generate_dataset(const GenConfig& cfg);

}  // namespace tdciv::sim

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tdciv {

// N-by-T panel. Time indices run 1..horizon. The outcome slot at time t holds
// the outcome realized after treatment W_t (there is no outcome for t = 0, and
// the final outcome lands at horizon + 1 in the generator's indexing).
struct PanelDataset {
  std::size_t n = 0;
  std::size_t horizon = 0;
  std::size_t dim_x = 0;  // measured covariate channels, proxy included if injected
  std::size_t dim_u = 0;  // 0 when latents withheld
  std::size_t dim_z = 0;

  std::vector<double> x;  // [n * horizon * dim_x]
  std::vector<double> w;  // [n * horizon], entries in {0,1}
  std::vector<double> y;  // [n * horizon]
  std::vector<double> u;  // [n * horizon * dim_u] or empty
  std::vector<double> s;  // [n * horizon] or empty (scalar ground-truth CIV)
  std::vector<double> z;  // [n * horizon * dim_z] or empty
  std::optional<double> true_ace;

  bool has_u() const { return !u.empty(); }
  bool has_s() const { return !s.empty(); }
  bool has_z() const { return !z.empty(); }

  double x_at(std::size_t i, std::size_t t, std::size_t j) const {
    return x[(i * horizon + (t - 1)) * dim_x + j];
  }
  double& x_at(std::size_t i, std::size_t t, std::size_t j) {
    return x[(i * horizon + (t - 1)) * dim_x + j];
  }
  double w_at(std::size_t i, std::size_t t) const { return w[i * horizon + (t - 1)]; }
  double& w_at(std::size_t i, std::size_t t) { return w[i * horizon + (t - 1)]; }
  double y_at(std::size_t i, std::size_t t) const { return y[i * horizon + (t - 1)]; }
  double& y_at(std::size_t i, std::size_t t) { return y[i * horizon + (t - 1)]; }
  double u_at(std::size_t i, std::size_t t, std::size_t j) const {
    return u[(i * horizon + (t - 1)) * dim_u + j];
  }
  double& u_at(std::size_t i, std::size_t t, std::size_t j) {
    return u[(i * horizon + (t - 1)) * dim_u + j];
  }
  double s_at(std::size_t i, std::size_t t) const { return s[i * horizon + (t - 1)]; }
  double& s_at(std::size_t i, std::size_t t) { return s[i * horizon + (t - 1)]; }
  double z_at(std::size_t i, std::size_t t, std::size_t j) const {
    return z[(i * horizon + (t - 1)) * dim_z + j];
  }
  double& z_at(std::size_t i, std::size_t t, std::size_t j) {
    return z[(i * horizon + (t - 1)) * dim_z + j];
  }

  // Shape consistency, binary W, finiteness. Throws ContractError.
  void validate() const;

  bool operator==(const PanelDataset&) const = default;
};

// CSV layout: header `sample,t,x_0..x_{k-1},w,y[,u_0..,s_true,z_0..]`, rows
// sorted by (sample, t) with t running 1..horizon. Lines beginning with `#`
// before the header are metadata (`# true_ace=<v>`) and are written only when
// the field is populated, so a write/read round trip is lossless.
void write_panel(const PanelDataset& data, const std::string& path);
PanelDataset read_panel(const std::string& path);

// Shortest round-trippable decimal rendering used by every CSV writer.
std::string format_g17(double v);

}  // namespace tdciv

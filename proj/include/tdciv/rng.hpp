#pragma once

#include <cstdint>
#include <random>

namespace tdciv {

// Deterministic RNG used everywhere; one instance per independent stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal(double mean = 0.0, double sd = 1.0) {
    return mean + sd * normal_(gen_);
  }
  double uniform() { return uniform_(gen_); }
  bool bernoulli(double p) { return uniform_(gen_) < p; }
  std::uint64_t u64() { return gen_(); }
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// splitmix64 step; used to derive independent per-replicate seeds from a
// master seed so replicate k is reproducible in isolation.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t s = master;
  for (std::uint64_t i = 0; i <= stream; ++i) s = splitmix64(s);
  return s;
}

}  // namespace tdciv

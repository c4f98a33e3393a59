#pragma once

#include <cstdint>
#include <vector>

#include "tdciv/array.hpp"

namespace tdciv::ad {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers mirror the parameter shapes and
// step_count increments exactly once per step() call.
class AdamState {
 public:
  AdamState(const std::vector<Array*>& params, AdamConfig config = {});

  // Applies one update in place. Throws ShapeError on any shape mismatch and
  // NonFiniteError if a gradient entry is NaN or infinite.
  void step(const std::vector<Array*>& params, const std::vector<const Array*>& grads);

  std::uint64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Array>& first_moment() const { return m_; }
  const std::vector<Array>& second_moment() const { return v_; }

 private:
  AdamConfig config_;
  std::uint64_t step_count_ = 0;
  std::vector<Array> m_;
  std::vector<Array> v_;
};

}  // namespace tdciv::ad

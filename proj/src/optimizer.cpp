#include "tdciv/optimizer.hpp"

#include <cmath>
#include <string>

#include "tdciv/errors.hpp"

namespace tdciv::ad {

AdamState::AdamState(const std::vector<Array*>& params, AdamConfig config) : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Array* p : params) {
    Array z = *p;
    z.fill(0.0);
    m_.push_back(z);
    v_.push_back(std::move(z));
  }
}

void AdamState::step(const std::vector<Array*>& params, const std::vector<const Array*>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeError("adam: expected " + std::to_string(m_.size()) + " parameter tensors, got " +
                     std::to_string(params.size()) + " params / " + std::to_string(grads.size()) +
                     " grads");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->same_shape(m_[k]) || !grads[k]->same_shape(m_[k]))
      throw ShapeError("adam: shape mismatch at tensor " + std::to_string(k));
    const Array& g = *grads[k];
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NonFiniteError("adam: non-finite gradient in tensor " + std::to_string(k) +
                             " at index " + std::to_string(i));
  }

  ++step_count_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Array& p = *params[k];
    const Array& g = *grads[k];
    Array& m = m_[k];
    Array& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / corr1;
      const double vhat = v[i] / corr2;
      p[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

}  // namespace tdciv::ad

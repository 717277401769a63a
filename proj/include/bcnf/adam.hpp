#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "bcnf/error.hpp"

namespace bcnf {

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

/// One bias-corrected Adam update, in place on `state` and `theta`.
inline void adam_step(AdamState& state, std::span<double> theta, std::span<const double> grad,
                      double learning_rate) {
  require(theta.size() == grad.size(), "adam: gradient/parameter size mismatch");
  if (state.first_moment.empty()) {
    state.first_moment.assign(theta.size(), 0.0);
    state.second_moment.assign(theta.size(), 0.0);
  }
  require(state.first_moment.size() == theta.size(), "adam: state/parameter size mismatch");
  ++state.step_count;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double k = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(b1, k);
  const double correction2 = 1.0 - std::pow(b2, k);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = b1 * m + (1.0 - b1) * grad[i];
    v = b2 * v + (1.0 - b2) * grad[i] * grad[i];
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    theta[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

}  // namespace bcnf

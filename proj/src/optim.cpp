#include "revcal/optim.hpp"

#include <algorithm>
#include <cmath>

#include "revcal/error.hpp"

namespace revcal {

AdamState::AdamState(double lr, double b1, double b2, double eps)
    : learning_rate(lr), beta1(b1), beta2(b2), epsilon(eps) {
  if (!(lr > 0.0)) fail("adam: learning rate must be positive");
  if (!(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0)) fail("adam: betas must lie in (0,1)");
}

void adam_step(const ParamSet& params, AdamState& state) {
  if (!(state.learning_rate > 0.0)) fail("adam: learning rate must be positive");
  for (const auto& p : params)
    if (!p.tensor->grad || p.tensor->grad->size() != p.tensor->size())
      fail("adam_step: parameter '" + p.name + "' has no gradient");

  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor->size(), 0.0);
      state.second_moment.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) fail("adam_step: parameter set changed between steps");

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].tensor;
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.size()) fail("adam_step: moment shape mismatch for '" + params[k].name + "'");
    auto& g = *p.grad;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.data[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
    std::fill(g.begin(), g.end(), 0.0);
  }
}

}  // namespace revcal

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "revcal/tensor.hpp"

namespace revcal {

struct NamedParam {
  std::string name;
  Tensor* tensor;
};
using ParamSet = std::vector<NamedParam>;

struct AdamState {
  std::uint64_t step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  AdamState() = default;
  explicit AdamState(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8);
};

// One bias-corrected Adam update in place. Grads are zeroed afterwards.
void adam_step(const ParamSet& params, AdamState& state);

}  // namespace revcal

#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "revcal/graph.hpp"
#include "revcal/model.hpp"
#include "revcal/tensor.hpp"

namespace revcal {

struct InputRange {
  double lo = 0.0;
  double hi = 1.0;

  static InputRange unbounded() {
    return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }
};

double identity_value(MergeMode mode);

// additive: x + delta, multiplicative: x * delta; then clamped to `range`.
Tensor merge(const Tensor& x, const Tensor& delta, MergeMode mode, InputRange range = {});
NodeId merge(Graph& g, NodeId x, NodeId delta, MergeMode mode, InputRange range = {});

enum class AttackDirection { adversarial, reverse };

struct AttackConfig {
  MergeMode merge_mode = MergeMode::additive;
  AttackDirection direction = AttackDirection::reverse;
  double step_size = 0.012;  // 2 * bound / iterations
  std::size_t iterations = 50;
  double bound = 0.3;        // L-inf on delta (additive) or on log(delta) (multiplicative)
  InputRange input_range{};
};

void validate(const AttackConfig& cfg);

struct AttackResult {
  Tensor perturbed;
  Tensor delta;
  // Mean true-class softmax probability after each iteration (index 0 is clean).
  std::vector<double> mean_true_prob;
};

// Iterative signed-gradient attack on the cross-entropy of the true class.
// The reverse direction descends the loss, the adversarial one ascends it.
// `model` must be frozen; its parameters are never touched.
AttackResult iterative_attack(Model& model, const Tensor& x, const Tensor& y_onehot, const AttackConfig& cfg);

// Writes an 8-bit PGM of a pure perturbation. The identity value maps to 128;
// deviations are scaled by `scale` (or by the largest deviation when scale <= 0)
// to span [1, 255]. Multiplicative deltas are shown in log space.
// delta: [H,W], [C,H,W] or [1,C,H,W]; channels are averaged.
void visualize_perturbation(const Tensor& delta, MergeMode mode, const std::filesystem::path& path,
                            double scale = 0.0);
// Pixel values that visualize_perturbation would write, row-major [H*W].
std::vector<unsigned char> perturbation_pixels(const Tensor& delta, MergeMode mode, double scale = 0.0);

}  // namespace revcal

#include "revcal/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "revcal/error.hpp"

namespace revcal {

double identity_value(MergeMode mode) { return mode == MergeMode::additive ? 0.0 : 1.0; }

Tensor merge(const Tensor& x, const Tensor& delta, MergeMode mode, InputRange range) {
  if (x.shape != delta.shape) fail("merge: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(delta.shape));
  Tensor out(x.shape, x.data);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = mode == MergeMode::additive ? x.data[i] + delta.data[i] : x.data[i] * delta.data[i];
    out.data[i] = std::clamp(v, range.lo, range.hi);
  }
  return out;
}

NodeId merge(Graph& g, NodeId x, NodeId delta, MergeMode mode, InputRange range) {
  if (g.shape(x) != g.shape(delta))
    fail("merge: shape mismatch " + shape_str(g.shape(x)) + " vs " + shape_str(g.shape(delta)));
  const NodeId m = mode == MergeMode::additive ? g.add(x, delta) : g.mul(x, delta);
  if (std::isinf(range.lo) && std::isinf(range.hi)) return m;
  return g.clamp(m, range.lo, range.hi);
}

void validate(const AttackConfig& cfg) {
  if (!(cfg.step_size > 0.0)) fail("attack: step size must be > 0");
  if (cfg.iterations < 1) fail("attack: iterations must be >= 1");
  if (!(cfg.bound >= 0.0)) fail("attack: bound must be >= 0");
  if (!(cfg.input_range.lo < cfg.input_range.hi)) fail("attack: input range needs lo < hi");
}

namespace {

double mean_true_probability(const Tensor& logits, const Tensor& y) {
  const std::size_t n = logits.shape[0], c = logits.shape[1];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0, target = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double e = std::exp(row[k] - mx);
      z += e;
      target += e * y.data[i * c + k];
    }
    total += target / z;
  }
  return total / static_cast<double>(n);
}

}  // namespace

AttackResult iterative_attack(Model& model, const Tensor& x, const Tensor& y, const AttackConfig& cfg) {
  validate(cfg);
  if (!model.frozen()) fail("iterative_attack: model '" + model.name() + "' must be frozen");
  if (!model.spec().is_classifier()) fail("iterative_attack: model must be a classifier");
  if (y.rank() != 2 || y.shape[0] != x.shape.at(0) || y.shape[1] != model.spec().num_classes)
    fail("iterative_attack: labels " + shape_str(y.shape) + " do not match inputs/model");

  const double id = identity_value(cfg.merge_mode);
  Tensor delta(x.shape, id);
  AttackResult result;
  result.mean_true_prob.push_back(mean_true_probability(model.infer(x), y));
  if (cfg.bound == 0.0) {
    result.perturbed = Tensor(x.shape, x.data);
    result.delta = std::move(delta);
    for (std::size_t t = 0; t < cfg.iterations; ++t) result.mean_true_prob.push_back(result.mean_true_prob.front());
    return result;
  }

  const double lo = cfg.merge_mode == MergeMode::additive ? -cfg.bound : std::exp(-cfg.bound);
  const double hi = cfg.merge_mode == MergeMode::additive ? cfg.bound : std::exp(cfg.bound);
  const double sign = cfg.direction == AttackDirection::reverse ? -1.0 : 1.0;
  const Tensor onehot(y.shape, y.data);

  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    delta.requires_grad = true;
    delta.grad.reset();
    Graph g;
    const NodeId merged = merge(g, g.constant(Tensor(x.shape, x.data)), g.leaf(delta), cfg.merge_mode, cfg.input_range);
    const NodeId logits = model.forward(g, merged);
    // Summed (not averaged) so each example's gradient is independent of batch size.
    const NodeId ce = g.affine(g.sum(g.mul(g.log_softmax(logits, 1), g.constant(onehot))), -1.0, 0.0);
    g.backward(ce);
    const auto& grad = *delta.grad;
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
      delta.data[i] = std::clamp(delta.data[i] + sign * cfg.step_size * s, lo, hi);
    }
    result.mean_true_prob.push_back(mean_true_probability(model.infer(merge(x, delta, cfg.merge_mode, cfg.input_range)), y));
  }
  delta.requires_grad = false;
  delta.grad.reset();
  result.perturbed = merge(x, delta, cfg.merge_mode, cfg.input_range);
  result.delta = std::move(delta);
  return result;
}

std::vector<unsigned char> perturbation_pixels(const Tensor& delta, MergeMode mode, double scale) {
  std::size_t c = 1, h = 0, w = 0;
  if (delta.rank() == 2) {
    h = delta.shape[0];
    w = delta.shape[1];
  } else if (delta.rank() == 3 || (delta.rank() == 4 && delta.shape[0] == 1)) {
    const std::size_t off = delta.rank() - 3;
    c = delta.shape[off];
    h = delta.shape[off + 1];
    w = delta.shape[off + 2];
  } else {
    fail("visualize_perturbation: expected an image-shaped delta, got " + shape_str(delta.shape));
  }
  std::vector<double> dev(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) {
      const double v = delta.data[ch * h * w + p];
      if (mode == MergeMode::multiplicative && !(v > 0.0))
        fail("visualize_perturbation: multiplicative delta must be positive");
      dev[p] += (mode == MergeMode::additive ? v : std::log(v)) / static_cast<double>(c);
    }
  if (scale <= 0.0)
    for (double d : dev) scale = std::max(scale, std::abs(d));
  std::vector<unsigned char> px(h * w, 128);
  if (scale > 0.0)
    for (std::size_t p = 0; p < px.size(); ++p)
      px[p] = static_cast<unsigned char>(128 + std::lround(127.0 * std::clamp(dev[p] / scale, -1.0, 1.0)));
  return px;
}

void visualize_perturbation(const Tensor& delta, MergeMode mode, const std::filesystem::path& path, double scale) {
  const auto px = perturbation_pixels(delta, mode, scale);
  const std::size_t w = delta.shape.back(), h = delta.shape[delta.rank() - 2];
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace revcal

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "revcal/model.hpp"
#include "revcal/tensor.hpp"

namespace revcal {

enum class QuantMethod { codebook_kmeans, uniform_affine };

std::string to_string(QuantMethod m);
QuantMethod parse_quant_method(const std::string& s);

struct QuantConfig {
  int bits = 8;
  QuantMethod method = QuantMethod::codebook_kmeans;
  bool per_layer = true;
  std::size_t kmeans_iters = 25;
  std::uint64_t seed = 0;

  void validate() const;
};

struct QuantizedLayer {
  Tensor values;                  // dequantized, same shape as the input
  std::vector<double> codebook;   // ascending
};

QuantizedLayer quantize_layer(const Tensor& weights, const QuantConfig& cfg);

// Quantizes every ".weight" tensor; biases keep full precision. The result is
// a frozen copy carrying a QuantRecord.
Model quantize_model(const Model& model, const QuantConfig& cfg);

std::size_t distinct_values(const Tensor& t);

}  // namespace revcal

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "revcal/tensor.hpp"
#include "json.hpp"

namespace revcal {

enum class TransformKind { rotation, brightness, contrast, saturation, crop_resize, hflip };

std::string to_string(TransformKind k);
TransformKind parse_transform_kind(const std::string& s);

// Sub-rectangle in pixel units of the source image.
struct CropRect {
  double top = 0, left = 0, height = 0, width = 0;
};

// `value` is degrees for rotation and the factor for brightness, contrast and
// saturation; crop_resize reads `crop`; hflip ignores both.
struct TransformParam {
  double value = 0.0;
  CropRect crop{};
};

// image [C,H,W] with values in [0,1]; result has the same shape, clamped to [0,1].
Tensor apply_transform(const Tensor& image, TransformKind kind, const TransformParam& param);

// One randomized step of a scenario.
//   rotation:            angle ~ U(lo, hi) degrees
//   brightness/contrast/
//   saturation:          factor ~ U(lo, hi)
//   crop_resize:         area fraction ~ U(lo, hi), aspect ratio log-uniform in [3/4, 4/3]
//   hflip:               applied with probability lo
struct TransformRange {
  TransformKind kind;
  double lo = 0.0;
  double hi = 0.0;
};

struct Scenario {
  std::string id;
  std::vector<TransformRange> transforms;
};

// Factor range for "maximum change s": [max(0, 1 - s), 1 + s].
TransformRange jitter(TransformKind kind, double strength);

// "identity", "A" (crop-resize then flip), "B1", "B2" (rotation then
// brightness/contrast/saturation jitter).
Scenario named_scenario(const std::string& id);
// Either {"name": "B2"} or {"id": ..., "transforms": [{"kind":..,"lo":..,"hi":..}, ...]}.
Scenario scenario_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Scenario& s);

// Samples every transform of one image in listed order from `rng`.
Tensor scenario_sample(const Scenario& scenario, const Tensor& image, std::mt19937_64& rng);

// Batch form. Image i of the batch draws from an rng seeded by (seed, first_index + i),
// so results do not depend on how a dataset is split into batches or shards.
Tensor apply_scenario(const Scenario& scenario, const Tensor& batch, std::uint64_t seed, std::size_t first_index = 0);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace revcal

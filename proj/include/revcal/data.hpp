#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "revcal/tensor.hpp"

namespace revcal {

// inputs [N, ...feature shape]; labels one-hot [N, C].
struct Dataset {
  std::string id;
  Tensor inputs;
  Tensor labels;

  std::size_t size() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
  std::size_t num_classes() const { return labels.rank() == 2 ? labels.shape[1] : 0; }
  Shape feature_shape() const { return Shape(inputs.shape.begin() + 1, inputs.shape.end()); }
  std::vector<std::size_t> class_indices() const;
  std::string content_hash() const;

  Dataset subset(std::span<const std::size_t> rows, std::string new_id) const;
  Dataset head(std::size_t n) const;
};

// Validates the Dataset invariants: N agrees, labels one-hot.
void validate(const Dataset& d);

Tensor one_hot(std::span<const std::size_t> classes, std::size_t num_classes);
Dataset make_dataset(std::string id, Tensor inputs, std::span<const std::size_t> classes, std::size_t num_classes);

// Two concentric circles: class 0 at r_inner, class 1 at r_outer, n/2 each,
// isotropic Gaussian noise on both coordinates.
Dataset gen_circles(std::size_t n, double r_inner, double r_outer, double noise_sd, std::uint64_t seed);

struct Ellipse {
  double cx = 0, cy = 0;
  double a = 1, b = 1;      // semi-axes
  double angle_deg = 0;     // rotation of the a-axis
  bool contains(double x, double y) const;
};

struct EllipsePair {
  Ellipse first;   // class 0
  Ellipse second;  // class 1
  // Points fill the outer band of each ellipse between scale 1 - shell and 1;
  // shell = 1 fills the whole interior.
  double shell = 1.0;
};

// Default geometry: two equal ellipses side by side on the +x axis whose
// outer bands cross, so each class's overlap points sit on the far side of
// the overlap from that class's own non-overlap points.
EllipsePair default_ellipses();

struct EllipseSplit {
  Dataset overlap;      // points inside both ellipses
  Dataset non_overlap;  // points inside only their own ellipse
};

// n/2 points uniform in each ellipse's band, labelled by source ellipse and split by
// membership in the other one.
EllipseSplit gen_ellipses(std::size_t n, const EllipsePair& geometry, std::uint64_t seed);

// IDX files (big-endian header): images 0x00000803 (u8, N x rows x cols),
// labels 0x00000801 (u8, N).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t num_classes = 10);
void write_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels);

// Dataset cache container ("RVDS"): id, content hash, inputs, labels, CRC32.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Procedurally rendered 28x28 handwritten-style digits (strokes with random
// affine jitter, thickness and intensity). Balanced over the 10 classes.
Dataset gen_digits(std::size_t n, std::uint64_t seed, std::size_t size = 28);

}  // namespace revcal

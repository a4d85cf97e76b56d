#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "revcal/tensor.hpp"

namespace revcal::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = u(rng);
  return t;
}

// Fresh scratch directory under the build tree's temp location.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("revcal_tests_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace revcal::testing

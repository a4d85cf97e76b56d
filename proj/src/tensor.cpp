#include "revcal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "revcal/error.hpp"

namespace revcal {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {
  for (auto d : shape)
    if (d == 0) fail("tensor dimensions must be positive, got " + shape_str(shape));
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  for (auto d : shape)
    if (d == 0) fail("tensor dimensions must be positive, got " + shape_str(shape));
  if (numel(shape) != data.size())
    fail("tensor of shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
         " values, got " + std::to_string(data.size()));
}

double Tensor::item() const {
  if (data.size() != 1) fail("item() on tensor of shape " + shape_str(shape));
  return data[0];
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape.empty() || begin >= end || end > shape[0])
    fail("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
         shape_str(shape));
  const std::size_t stride = data.size() / shape[0];
  Shape s = shape;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                  data.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  if (shape.empty() || rows.empty()) fail("gather_rows needs a batched tensor and at least one row");
  const std::size_t stride = data.size() / shape[0];
  Shape s = shape;
  s[0] = rows.size();
  std::vector<double> out(rows.size() * stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= shape[0]) fail("gather_rows index out of range");
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return Tensor(std::move(s), std::move(out));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

bool identical(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         (a.data.empty() || std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

}  // namespace revcal

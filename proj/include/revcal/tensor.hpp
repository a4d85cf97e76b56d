#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace revcal {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. A Tensor is a plain value; gradients are
// written into `grad` by Graph::backward when `requires_grad` is set.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor ones_like(const Tensor& t) { return Tensor(t.shape, 1.0); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, 0.0); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  double item() const;

  std::span<double> values() noexcept { return data; }
  std::span<const double> values() const noexcept { return data; }

  // Rows of the leading dimension, e.g. one example of a batch.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  Tensor gather_rows(std::span<const std::size_t> rows) const;

  bool all_finite() const noexcept;
  void zero_grad();
};

// True if shapes and every element (bitwise, via ==) agree.
bool identical(const Tensor& a, const Tensor& b);

}  // namespace revcal

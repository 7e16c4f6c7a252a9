#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tlab {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 tensor (empty shape) is a scalar.
class Tensor {
 public:
  Tensor() = default;

  /// Zero-filled tensor of the given shape.
  explicit Tensor(Shape shape);

  /// Checked construction: size must match and every value must be finite.
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  /// 2-D tensor from nested rows, mostly for tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor vector(std::vector<double> values);

  /// Skips the finiteness scan; for results computed from already-valid tensors.
  static Tensor unchecked(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const double* data() const { return values_.data(); }
  double* data() { return values_.data(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  /// Value of a one-element tensor.
  double item() const;

  /// Same values, new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  /// Rows [begin, begin+count) along the first axis.
  Tensor rows(std::size_t begin, std::size_t count) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// FNV-1a over shape and raw value bytes; used as a cheap bitwise identity check.
std::uint64_t checksum(const Tensor& t);

/// Gathers the given rows (first-axis indices) into a new tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);

/// Concatenates along the first axis; trailing dims must agree.
Tensor concat_rows(std::span<const Tensor> parts);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);

}  // namespace tlab

#include "tlab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "tlab/error.hpp"

namespace tlab {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), values_(numel(shape_), 0.0) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  if (numel(shape_) != values_.size())
    throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(values_.size()) + " values");
  if (!all_finite()) throw DomainError("tensor values must be finite");
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.values_.begin(), t.values_.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> v;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(v));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::unchecked(Shape shape, std::vector<double> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.values_ = std::move(values);
  return t;
}

double Tensor::item() const {
  if (values_.size() != 1) throw RankError("item() on tensor of shape " + shape_str(shape_));
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (numel(shape) != values_.size())
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

Tensor Tensor::rows(std::size_t begin, std::size_t count) const {
  if (rank() == 0 || begin + count > shape_[0] || count == 0)
    throw DimensionError("row range out of bounds for " + shape_str(shape_));
  std::size_t stride = values_.size() / shape_[0];
  Shape s = shape_;
  s[0] = count;
  auto first = values_.begin() + static_cast<std::ptrdiff_t>(begin * stride);
  return unchecked(std::move(s),
                   std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * stride)));
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (auto d : t.shape()) {
    std::uint64_t d64 = d;
    mix(&d64, sizeof d64);
  }
  mix(t.data(), t.size() * sizeof(double));
  return h;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  if (t.rank() == 0 || indices.empty()) throw DimensionError("gather_rows needs a batch tensor");
  std::size_t stride = t.size() / t.dim(0);
  std::vector<double> out(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= t.dim(0)) throw DimensionError("gather_rows index out of range");
    std::memcpy(out.data() + i * stride, t.data() + indices[i] * stride, stride * sizeof(double));
  }
  Shape s = t.shape();
  s[0] = indices.size();
  return Tensor::unchecked(std::move(s), std::move(out));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Shape s = parts[0].shape();
  if (s.empty()) throw DimensionError("concat_rows needs rank >= 1");
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1))
      throw DimensionError("concat_rows trailing shape mismatch");
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  s[0] = rows;
  return Tensor::unchecked(std::move(s), std::move(out));
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("dot size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const Tensor& t) { return std::sqrt(dot(t, t)); }

}  // namespace tlab

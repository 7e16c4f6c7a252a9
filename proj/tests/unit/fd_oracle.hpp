#pragma once

// Test-only finite-difference oracles. Independent of the tape: they only ever
// evaluate forward values.

#include <cmath>
#include <functional>
#include <random>

#include "tlab/tensor.hpp"

namespace tlab::testing {

using ValueFn = std::function<double(const Tensor&)>;

inline Tensor central_difference(const ValueFn& f, const Tensor& x, double h = 1e-6) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double central_difference_at(const ValueFn& f, const Tensor& x, std::size_t i, double h) {
  Tensor probe = x;
  probe[i] = x[i] + h;
  const double up = f(probe);
  probe[i] = x[i] - h;
  const double down = f(probe);
  return (up - down) / (2.0 * h);
}

/// max_i |a_i - b_i| / max(1, max_i |b_i|): relative error with an absolute floor.
inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Random values whose magnitude stays at least `gap` away from zero (keeps relu off its kink).
inline Tensor random_off_kink(Shape shape, std::mt19937_64& rng, double gap = 0.05) {
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = sign(rng) ? u(rng) : -u(rng);
  return t;
}

}  // namespace tlab::testing

#include "tlab/perturb.hpp"

#include <algorithm>
#include <cmath>

#include "tlab/error.hpp"
#include "tlab/rng.hpp"

namespace tlab {

std::string_view norm_name(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

Norm parse_norm(std::string_view name) {
  if (name == "linf") return Norm::Linf;
  if (name == "l2") return Norm::L2;
  throw ValidationError("unknown norm '" + std::string(name) + "'");
}

namespace {
std::size_t row_size(const Tensor& t) { return t.rank() == 0 || t.dim(0) == 0 ? 0 : t.size() / t.dim(0); }
}  // namespace

std::vector<double> row_norms(const Tensor& t, Norm norm) {
  const std::size_t n = t.rank() ? t.dim(0) : 0, m = row_size(t);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = t.data() + i * m;
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s = norm == Norm::Linf ? std::max(s, std::abs(r[k])) : s + r[k] * r[k];
    out[i] = norm == Norm::Linf ? s : std::sqrt(s);
  }
  return out;
}

void project_rows(Tensor& delta, Norm norm, double eps) {
  if (eps < 0) throw DomainError("eps must be non-negative");
  const std::size_t m = row_size(delta);
  if (norm == Norm::Linf) {
    for (double& v : delta.values()) v = std::clamp(v, -eps, eps);
    return;
  }
  const auto norms = row_norms(delta, Norm::L2);
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (norms[i] <= eps) continue;
    const double f = eps / norms[i];
    for (std::size_t k = 0; k < m; ++k) delta[i * m + k] *= f;
  }
}

Tensor ascent_direction(const Tensor& g, Norm norm) {
  Tensor d = g;
  if (norm == Norm::Linf) {
    for (double& v : d.values()) v = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
    return d;
  }
  const std::size_t m = row_size(g);
  const auto norms = row_norms(g, Norm::L2);
  for (std::size_t i = 0; i < norms.size(); ++i)
    for (std::size_t k = 0; k < m; ++k) d[i * m + k] = norms[i] > 0 ? g[i * m + k] / norms[i] : 0.0;
  return d;
}

void clip_delta_to_unit_box(const Tensor& x, Tensor& delta) {
  if (x.shape() != delta.shape()) throw DimensionError("delta shape does not match x");
  for (std::size_t k = 0; k < x.size(); ++k) delta[k] = std::clamp(x[k] + delta[k], 0.0, 1.0) - x[k];
}

Tensor random_in_ball(const Shape& shape, Norm norm, double eps, std::uint64_t seed) {
  Tensor d(shape);
  const std::size_t n = shape.empty() ? 0 : shape[0], m = n ? d.size() / n : 0;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::substream(seed, stream::kAttack, i);
    double* r = d.data() + i * m;
    if (norm == Norm::Linf) {
      for (std::size_t k = 0; k < m; ++k) r[k] = rng.uniform(-eps, eps);
      continue;
    }
    // Gaussian direction, radius eps * u^(1/m).
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      r[k] = rng.normal();
      s += r[k] * r[k];
    }
    const double radius = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(m));
    const double f = s > 0 ? radius / std::sqrt(s) : 0.0;
    for (std::size_t k = 0; k < m; ++k) r[k] *= f;
  }
  return d;
}

}  // namespace tlab

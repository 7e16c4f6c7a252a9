#include "tlab/stats.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "tlab/error.hpp"
#include "tlab/rng.hpp"

namespace tlab {

namespace {

void check_pair(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DimensionError("correlation of series with different lengths");
  if (xs.size() < 3) throw ValidationError("correlation needs at least 3 points");
  for (double v : xs)
    if (!std::isfinite(v)) throw DomainError("correlation input must be finite");
  for (double v : ys)
    if (!std::isfinite(v)) throw DomainError("correlation input must be finite");
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

double pearson(std::span<const double> xs, std::span<const double> ys) {
  check_pair(xs, ys);
  const double mx = mean_of(xs), my = mean_of(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("correlation undefined for a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  check_pair(xs, ys);
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  return pearson(rx, ry);
}

double ols_r2(const std::vector<std::vector<double>>& columns, std::span<const double> y) {
  const std::size_t n = y.size(), k = columns.size();
  if (k == 0) throw ValidationError("regression needs at least one regressor");
  if (n <= k + 1) throw ValidationError("regression needs more than k + 1 rows");
  for (const auto& c : columns)
    if (c.size() != n) throw DimensionError("regressor length differs from response length");
  Eigen::MatrixXd x(n, k + 1);
  Eigen::VectorXd yv(n);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    for (std::size_t j = 0; j < k; ++j) x(i, j + 1) = columns[j][i];
    yv(i) = y[i];
  }
  if (!x.allFinite() || !yv.allFinite()) throw DomainError("regression input must be finite");
  const double my = yv.mean();
  const double sst = (yv.array() - my).square().sum();
  if (sst == 0.0) throw NumericError("R^2 undefined for a constant response");
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().array() += 1e-10;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) throw NumericError("singular regression design");
  const Eigen::VectorXd beta = ldlt.solve(x.transpose() * yv);
  if (!beta.allFinite()) throw NumericError("singular regression design");
  const double ssr = (yv - x * beta).squaredNorm();
  return 1.0 - ssr / sst;
}

double permutation_p_value(std::span<const double> xs, std::span<const double> ys, std::size_t permutations,
                           std::uint64_t seed) {
  if (permutations == 0) throw ValidationError("permutation test needs at least one permutation");
  const double observed = pearson(xs, ys);
  std::vector<double> perm(ys.begin(), ys.end());
  Rng rng = Rng::substream(seed, stream::kSample, 1);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    hits += pearson(xs, perm) >= observed - 1e-12;
  }
  return (1.0 + static_cast<double>(hits)) / (1.0 + static_cast<double>(permutations));
}

}  // namespace tlab

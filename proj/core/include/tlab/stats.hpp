#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tlab {

/// Sample Pearson correlation. Needs equal lengths >= 3; NumericError on constant input.
double pearson(std::span<const double> xs, std::span<const double> ys);

/// Ranks starting at 1, ties get their average rank.
std::vector<double> average_ranks(std::span<const double> xs);
double spearman(std::span<const double> xs, std::span<const double> ys);

/// R^2 of y = X b + b0 fitted by ridge-jittered (1e-10) normal equations.
/// `columns` holds the k regressors, each of length n; needs n > k + 1.
double ols_r2(const std::vector<std::vector<double>>& columns, std::span<const double> y);

/// One-sided permutation p-value for r(xs, ys) > 0: (1 + #{r_perm >= r_obs}) / (1 + permutations).
double permutation_p_value(std::span<const double> xs, std::span<const double> ys, std::size_t permutations,
                           std::uint64_t seed);

}  // namespace tlab

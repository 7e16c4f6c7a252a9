#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "tlab/tensor.hpp"

namespace tlab {

enum class Norm { Linf, L2 };

std::string_view norm_name(Norm n);
Norm parse_norm(std::string_view name);

/// Per-sample norm of each first-axis row.
std::vector<double> row_norms(const Tensor& t, Norm norm);

/// Projects every row of delta onto the eps-ball of the given norm, in place.
void project_rows(Tensor& delta, Norm norm, double eps);

/// Steepest-ascent unit direction per row: sign(g) for linf, g/|g|_2 for l2.
/// Rows with zero gradient give a zero direction.
Tensor ascent_direction(const Tensor& g, Norm norm);

/// Replaces delta by clip(x + delta, 0, 1) - x so the perturbed point stays a valid image.
void clip_delta_to_unit_box(const Tensor& x, Tensor& delta);

/// Uniform draw from each row's eps-ball; seeded per row by (seed, row index).
Tensor random_in_ball(const Shape& shape, Norm norm, double eps, std::uint64_t seed);

}  // namespace tlab

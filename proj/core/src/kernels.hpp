#pragma once

// Dense numeric kernels behind the taped primitives. Plain tensors in, plain tensors out.

#include <cstdint>
#include <vector>

#include "tlab/tensor.hpp"

namespace tlab::kernels {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t k);
Tensor flip_kernel(const Tensor& w);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor sum_to(const Tensor& a, const Shape& shape);
Tensor softmax_rows(const Tensor& logits);
bool broadcastable(const Shape& from, const Shape& to);

}  // namespace tlab::kernels

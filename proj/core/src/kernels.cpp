#include "kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "tlab/error.hpp"

namespace tlab::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;

// cols (Cin*k*k, H*W) for one image (Cin, H, W) with same-size zero padding.
void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            double* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < cin; ++c) {
    const double* plane = x + c * h * w;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b, ++row) {
        double* dst = cols + row * h * w;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(a) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(b) - pad;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = y + dy;
          double* drow = dst + y * W;
          if (sy < 0 || sy >= H) {
            std::fill(drow, drow + W, 0.0);
            continue;
          }
          const double* srow = plane + sy * W;
          for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t sx = xx + dx;
            drow[xx] = (sx < 0 || sx >= W) ? 0.0 : srow[sx];
          }
        }
      }
    }
  }
}

void check_conv_shapes(const Tensor& x, std::size_t cin, std::size_t k) {
  if (x.rank() != 4) throw DimensionError("conv2d input must be (N, C, H, W), got " + shape_str(x.shape()));
  if (x.dim(1) != cin)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs kernel Cin " +
                         std::to_string(cin));
  if (k % 2 == 0) throw DimensionError("conv2d kernel size must be odd");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapR(out.data(), m, n).noalias() = CMapR(a.data(), m, k) * CMapR(b.data(), k, n);
  return Tensor::unchecked({a.dim(0), b.dim(1)}, std::move(out));
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return Tensor::unchecked({c, r}, std::move(out));
}

Tensor conv2d(const Tensor& x, const Tensor& w) {
  if (w.rank() != 4 || w.dim(2) != w.dim(3))
    throw DimensionError("conv2d kernel must be (Cout, Cin, k, k), got " + shape_str(w.shape()));
  const std::size_t cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
  check_conv_shapes(x, cin, k);
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3), hw = h * wd, ckk = cin * k * k;
  std::vector<double> cols(ckk * hw);
  std::vector<double> out(n * cout * hw);
  CMapR wm(w.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ckk));
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.data() + i * cin * hw, cin, h, wd, k, cols.data());
    MapR(out.data() + i * cout * hw, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw))
        .noalias() = wm * CMapR(cols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(hw));
  }
  return Tensor::unchecked({n, cout, h, wd}, std::move(out));
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t k) {
  if (g.rank() != 4 || x.rank() != 4 || g.dim(0) != x.dim(0) || g.dim(2) != x.dim(2) || g.dim(3) != x.dim(3))
    throw DimensionError("conv2d_weight_grad shape mismatch: " + shape_str(x.shape()) + " vs " +
                         shape_str(g.shape()));
  const std::size_t cin = x.dim(1);
  check_conv_shapes(x, cin, k);
  const std::size_t n = x.dim(0), cout = g.dim(1), h = x.dim(2), wd = x.dim(3), hw = h * wd,
                    ckk = cin * k * k;
  std::vector<double> cols(ckk * hw);
  std::vector<double> out(cout * ckk, 0.0);
  MapR om(out.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ckk));
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.data() + i * cin * hw, cin, h, wd, k, cols.data());
    om.noalias() += CMapR(g.data() + i * cout * hw, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw)) *
                    CMapR(cols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(hw)).transpose();
  }
  return Tensor::unchecked({cout, cin, k, k}, std::move(out));
}

Tensor flip_kernel(const Tensor& w) {
  if (w.rank() != 4 || w.dim(2) != w.dim(3))
    throw DimensionError("flip_kernel needs (Cout, Cin, k, k), got " + shape_str(w.shape()));
  const std::size_t co = w.dim(0), ci = w.dim(1), k = w.dim(2);
  std::vector<double> out(w.size());
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b)
          out[((i * co + o) * k + (k - 1 - a)) * k + (k - 1 - b)] = w[((o * ci + i) * k + a) * k + b];
  return Tensor::unchecked({ci, co, k, k}, std::move(out));
}

bool broadcastable(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) return false;
  const std::size_t off = to.size() - from.size();
  for (std::size_t d = 0; d < from.size(); ++d)
    if (from[d] != 1 && from[d] != to[off + d]) return false;
  return true;
}

namespace {

// Strides of `small` aligned to the rank of `big`, with 0 on broadcast axes.
std::vector<std::size_t> aligned_strides(const Shape& small, const Shape& big) {
  const std::size_t off = big.size() - small.size();
  std::vector<std::size_t> strides(big.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = small.size(); d-- > 0;) {
    strides[off + d] = small[d] == 1 ? 0 : s;
    s *= small[d];
  }
  return strides;
}

template <typename F>
void for_each_broadcast(const Shape& small, const Shape& big, F&& f) {
  const auto strides = aligned_strides(small, big);
  const std::size_t total = numel(big);
  const std::size_t r = big.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t j = 0; j < total; ++j) {
    f(j, src);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < big[d]) break;
      src -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (!broadcastable(a.shape(), shape))
    throw DimensionError("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> out(numel(shape));
  for_each_broadcast(a.shape(), shape, [&](std::size_t j, std::size_t s) { out[j] = a[s]; });
  return Tensor::unchecked(shape, std::move(out));
}

Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (!broadcastable(shape, a.shape()))
    throw DimensionError("cannot sum " + shape_str(a.shape()) + " down to " + shape_str(shape));
  std::vector<double> out(numel(shape), 0.0);
  for_each_broadcast(shape, a.shape(), [&](std::size_t j, std::size_t s) { out[s] += a[j]; });
  return Tensor::unchecked(shape, std::move(out));
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax needs (N, C), got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data() + i * c;
    double* p = out.data() + i * c;
    const double m = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (p[j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < c; ++j) p[j] /= s;
  }
  return Tensor::unchecked(logits.shape(), std::move(out));
}

}  // namespace tlab::kernels

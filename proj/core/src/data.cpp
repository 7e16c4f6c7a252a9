#include "tlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tlab/error.hpp"
#include "tlab/io.hpp"

namespace tlab {

namespace {

constexpr std::size_t kSide = 16;
constexpr std::size_t kPixels = kSide * kSide;
constexpr std::size_t kClasses = 10;

void check_batch(const Tensor& images, const Tensor& labels) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != kSide || images.dim(3) != kSide)
    throw DimensionError("augmentations take (N,1,16,16) batches, got " + shape_str(images.shape()));
  if (images.dim(0) == 0) throw ValidationError("empty batch");
  if (labels.rank() != 2 || labels.dim(0) != images.dim(0))
    throw DimensionError("labels " + shape_str(labels.shape()) + " do not match batch " + shape_str(images.shape()));
}

void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError(std::string(what) + " probability must be in [0,1]");
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

struct Glyph {
  double cx, cy, angle, length, half_width, radius, amp, period;
};

// Coverage of a stroke whose centre line is `d` away from the pixel centre.
double stroke(double d, double half_width) { return std::clamp(half_width - d + 0.5, 0.0, 1.0); }

double glyph_pixel(int label, const Glyph& g, double px, double py) {
  const double ux = std::cos(g.angle), uy = std::sin(g.angle);
  auto bar = [&](double ax, double ay) {
    const double h = g.length / 2;
    return segment_distance(px, py, g.cx - h * ax, g.cy - h * ay, g.cx + h * ax, g.cy + h * ay);
  };
  switch (label) {
    case 0: case 1: case 2: case 3:
      return stroke(bar(ux, uy), g.half_width);
    case 4: case 5:
      return stroke(std::min(bar(ux, uy), bar(-uy, ux)), g.half_width);
    case 6: case 7:
      return stroke(std::abs(std::hypot(px - g.cx, py - g.cy) - g.radius), g.half_width);
    default: {
      // Checkerboard inside a square window, rotated by the class angle.
      const double rx = (px - g.cx) * ux + (py - g.cy) * uy;
      const double ry = -(px - g.cx) * uy + (py - g.cy) * ux;
      const double half = g.length / 2;
      if (std::abs(rx) > half || std::abs(ry) > half) return 0.0;
      const auto cell = static_cast<long>(std::floor(rx / g.period)) + static_cast<long>(std::floor(ry / g.period));
      return (cell % 2 == 0) ? 1.0 : 0.0;
    }
  }
}

// Class geometry: four bar orientations, two crosses, two ring radii, two checker orientations.
Glyph draw_glyph(int label, Rng& rng, const GlyphStyle& st) {
  constexpr double pi = std::numbers::pi;
  static constexpr double kAngle[kClasses] = {0, pi / 4, pi / 2, 3 * pi / 4, 0, pi / 4, 0, 0, 0, pi / 4};
  Glyph g{};
  g.cx = kSide / 2.0 + rng.uniform(-st.shift, st.shift);
  g.cy = kSide / 2.0 + rng.uniform(-st.shift, st.shift);
  g.angle = kAngle[label] + rng.uniform(-st.angle_jitter, st.angle_jitter);
  g.length = rng.uniform(st.length_lo, st.length_hi);
  g.half_width = rng.uniform(st.half_width_lo, st.half_width_hi);
  g.radius = label == 6 ? rng.uniform(2.5, 3.5) : rng.uniform(4.8, 6.0);
  g.amp = rng.uniform(st.amp_lo, st.amp_hi);
  g.period = rng.uniform(2.6, 3.4);
  return g;
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.images = gather_rows(images, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels.at(i));
  out.split = split;
  return out;
}

std::uint64_t Dataset::checksum() const {
  std::uint64_t h = tlab::checksum(images);
  for (int l : labels) h = (h ^ static_cast<std::uint64_t>(l)) * 1099511628211ULL;
  return h;
}

void SoftLabels::validate() const {
  if (probs.rank() != 2) throw DimensionError("soft labels must be (N, C)");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (probs[i * c + j] < 0.0) throw ValidationError("negative soft label in row " + std::to_string(i));
      s += probs[i * c + j];
    }
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("soft label row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor out({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw DomainError("label " + std::to_string(labels[i]) + " out of range");
    out[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return out;
}

Dataset glyphset_split(std::uint64_t seed, std::size_t n, Split split, const GlyphStyle& style) {
  if (n < 100) throw ValidationError("glyphset needs at least 100 samples per split, got " + std::to_string(n));
  if (n % kClasses != 0) throw ValidationError("glyphset split size must be a multiple of 10");
  const std::uint64_t tag = split == Split::Train ? stream::kDataTrain : stream::kDataTest;
  Dataset ds;
  ds.split = split;
  ds.images = Tensor({n, 1, kSide, kSide});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % kClasses);
    ds.labels[i] = label;
    Rng rng = Rng::substream(seed, tag, i);
    const Glyph g = draw_glyph(label, rng, style);
    double* img = ds.images.data() + i * kPixels;
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x) {
        const double v = g.amp * glyph_pixel(label, g, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
        img[y * kSide + x] = std::clamp(v + rng.uniform(-style.noise, style.noise), 0.0, 1.0);
      }
  }
  return ds;
}

std::pair<Dataset, Dataset> glyphset_generate(std::uint64_t seed, std::size_t n_train, std::size_t n_test,
                                              const GlyphStyle& style) {
  return {glyphset_split(seed, n_train, Split::Train, style), glyphset_split(seed, n_test, Split::Test, style)};
}

std::string_view mechanism_name(AugmentMechanism m) {
  switch (m) {
    case AugmentMechanism::None: return "none";
    case AugmentMechanism::Mixup: return "mu";
    case AugmentMechanism::CutMix: return "cm";
    case AugmentMechanism::Cutout: return "co";
    case AugmentMechanism::LabelSmooth: return "ls";
  }
  return "?";
}

double tau_to_params(AugmentMechanism mechanism, int tau) {
  if (tau < 1 || tau > 5) throw DomainError("tau must be in [1,5], got " + std::to_string(tau));
  switch (mechanism) {
    case AugmentMechanism::Mixup:
    case AugmentMechanism::CutMix: return 0.1 + 0.2 * (tau - 1);
    case AugmentMechanism::LabelSmooth: return 0.1 * tau;
    case AugmentMechanism::Cutout: return 2.0 + 2.0 * tau;
    case AugmentMechanism::None: break;
  }
  throw ValidationError("mechanism 'none' has no tau parameter");
}

std::pair<Tensor, Tensor> mixup_pair(const Tensor& xi, const Tensor& xj, const Tensor& yi, const Tensor& yj,
                                     double b) {
  if (xi.shape() != xj.shape() || yi.shape() != yj.shape()) throw DimensionError("mixup_pair shape mismatch");
  Tensor x = xi, y = yi;
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = b * xi[k] + (1 - b) * xj[k];
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = b * yi[k] + (1 - b) * yj[k];
  return {std::move(x), std::move(y)};
}

MixResult mixup(const Tensor& images, const Tensor& labels_onehot, double p, Rng& rng) {
  check_batch(images, labels_onehot);
  check_probability(p, "mixup");
  const std::size_t n = images.dim(0), c = labels_onehot.dim(1);
  MixResult out{images, {labels_onehot}, std::vector<MixRecord>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    if (!rng.bernoulli(p)) continue;
    const std::size_t j = rng.below(n);
    const double b = rng.uniform();
    out.records[i] = {true, j, b, 0};
    for (std::size_t k = 0; k < kPixels; ++k)
      out.images[i * kPixels + k] = b * images[i * kPixels + k] + (1 - b) * images[j * kPixels + k];
    for (std::size_t k = 0; k < c; ++k)
      out.labels.probs[i * c + k] = b * labels_onehot[i * c + k] + (1 - b) * labels_onehot[j * c + k];
  }
  return out;
}

MixResult cutmix(const Tensor& images, const Tensor& labels_onehot, double p, Rng& rng) {
  check_batch(images, labels_onehot);
  check_probability(p, "cutmix");
  const std::size_t n = images.dim(0), c = labels_onehot.dim(1);
  MixResult out{images, {labels_onehot}, std::vector<MixRecord>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    if (!rng.bernoulli(p)) continue;
    const std::size_t j = rng.below(n);
    const double b = rng.uniform();
    const auto side = static_cast<long>(std::lround(static_cast<double>(kSide) * std::sqrt(1.0 - b)));
    const auto cy = static_cast<long>(rng.below(kSide)), cx = static_cast<long>(rng.below(kSide));
    const long top = std::max(0L, cy - side / 2), bottom = std::min<long>(kSide, cy - side / 2 + side);
    const long left = std::max(0L, cx - side / 2), right = std::min<long>(kSide, cx - side / 2 + side);
    std::size_t area = 0;
    for (long y = top; y < bottom; ++y)
      for (long x = left; x < right; ++x) {
        const auto k = static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x);
        out.images[i * kPixels + k] = images[j * kPixels + k];
        ++area;
      }
    const double lambda = 1.0 - static_cast<double>(area) / static_cast<double>(kPixels);
    out.records[i] = {true, j, lambda, area};
    for (std::size_t k = 0; k < c; ++k)
      out.labels.probs[i * c + k] = lambda * labels_onehot[i * c + k] + (1 - lambda) * labels_onehot[j * c + k];
  }
  return out;
}

Tensor cutout(const Tensor& images, std::size_t m, Rng& rng) {
  if (images.rank() != 4 || images.dim(2) != kSide || images.dim(3) != kSide)
    throw DimensionError("cutout takes (N,1,16,16) batches, got " + shape_str(images.shape()));
  Tensor out = images;
  const std::size_t n = images.dim(0);
  const auto side = static_cast<long>(m);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cy = static_cast<long>(rng.below(kSide)), cx = static_cast<long>(rng.below(kSide));
    const long top = std::max(0L, cy - side / 2), bottom = std::min<long>(kSide, cy - side / 2 + side);
    const long left = std::max(0L, cx - side / 2), right = std::min<long>(kSide, cx - side / 2 + side);
    for (long y = top; y < bottom; ++y)
      for (long x = left; x < right; ++x) out[i * kPixels + static_cast<std::size_t>(y * 16 + x)] = 0.0;
  }
  return out;
}

SoftLabels label_smooth(std::span<const int> labels, double p, std::size_t m) {
  if (!(p >= 0.0 && p < 1.0)) throw DomainError("label smoothing p must be in [0,1)");
  if (m < 2) throw DomainError("label smoothing needs at least two classes");
  Tensor probs = Tensor::full({labels.size(), m}, p / static_cast<double>(m - 1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= m)
      throw DomainError("label " + std::to_string(labels[i]) + " out of range");
    probs[i * m + static_cast<std::size_t>(labels[i])] = 1.0 - p;
  }
  return {std::move(probs)};
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("mean_abs_diff shape mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

namespace {

std::uint32_t be32(io::ByteReader& r) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | r.u8();
  return v;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split) {
  const auto ib = io::read_file(images);
  const auto lb = io::read_file(labels);
  io::ByteReader ir(ib), lr(lb);
  if (be32(ir) != 0x00000803) throw FormatError(images.string() + ": not an IDX image file");
  if (be32(lr) != 0x00000801) throw FormatError(labels.string() + ": not an IDX label file");
  const std::size_t n = be32(ir), rows = be32(ir), cols = be32(ir);
  if (be32(lr) != n) throw FormatError("IDX image and label counts differ");
  if (rows < kSide || cols < kSide) throw DimensionError("IDX images smaller than 16x16");
  if (ir.remaining() != n * rows * cols || lr.remaining() != n) throw FormatError("IDX payload size mismatch");

  // Center-crop to a square, then box-filter onto the 16x16 grid.
  const std::size_t sq = std::min(rows, cols);
  const std::size_t r0 = (rows - sq) / 2, c0 = (cols - sq) / 2;
  const double scale = static_cast<double>(sq) / kSide;
  auto pixels = ir.raw(n * rows * cols);
  Dataset ds;
  ds.split = split;
  ds.images = Tensor({n, 1, kSide, kSide});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = lr.u8();
    if (label >= kClasses) throw FormatError("IDX label " + std::to_string(label) + " out of range");
    ds.labels[i] = label;
    const std::uint8_t* src = pixels.data() + i * rows * cols;
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x) {
        // Area-weighted average over the source footprint [y*scale, (y+1)*scale).
        const double y0 = y * scale, y1 = (y + 1) * scale, x0 = x * scale, x1 = (x + 1) * scale;
        double acc = 0.0;
        for (auto sy = static_cast<std::size_t>(y0); static_cast<double>(sy) < y1; ++sy) {
          const double wy = std::min<double>(sy + 1, y1) - std::max<double>(sy, y0);
          for (auto sx = static_cast<std::size_t>(x0); static_cast<double>(sx) < x1; ++sx) {
            const double wx = std::min<double>(sx + 1, x1) - std::max<double>(sx, x0);
            acc += wy * wx * src[(r0 + sy) * cols + c0 + sx];
          }
        }
        ds.images[i * kPixels + y * kSide + x] = acc / (scale * scale * 255.0);
      }
  }
  return ds;
}

}  // namespace tlab

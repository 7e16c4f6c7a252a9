#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "tlab/rng.hpp"
#include "tlab/tensor.hpp"

namespace tlab {

enum class Split { Train, Test };

struct Dataset {
  Tensor images;            // (N, 1, 16, 16), values in [0, 1]
  std::vector<int> labels;  // in [0, 10)
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  /// Subset by sample indices, preserving order.
  Dataset subset(std::span<const std::size_t> indices) const;
  std::uint64_t checksum() const;
};

/// Rows are probability distributions over the 10 classes.
struct SoftLabels {
  Tensor probs;  // (N, 10)

  /// Throws ValidationError unless every row is non-negative and sums to 1 within 1e-9.
  void validate() const;
};

Tensor one_hot(std::span<const int> labels, std::size_t classes = 10);

/// Drawing parameters of the glyph generator. Ranges are sampled uniformly per image.
struct GlyphStyle {
  double amp_lo = 0.3, amp_hi = 0.65;        // stroke intensity
  double shift = 1.5;                        // centre jitter in pixels
  double angle_jitter = 0.15;                // radians
  double length_lo = 9.0, length_hi = 13.0;
  double half_width_lo = 0.6, half_width_hi = 1.1;
  double noise = 0.15;                       // additive uniform noise amplitude
};

/// Procedural glyphs: bars, crosses, rings and checkers with class-specific
/// orientations, per-sample jitter, plus uniform noise of amplitude 0.15.
/// Each split holds exactly n/10 samples per class. Pure function of its arguments.
std::pair<Dataset, Dataset> glyphset_generate(std::uint64_t seed, std::size_t n_train, std::size_t n_test,
                                              const GlyphStyle& style = {});
Dataset glyphset_split(std::uint64_t seed, std::size_t n, Split split, const GlyphStyle& style = {});

enum class AugmentMechanism { None, Mixup, CutMix, Cutout, LabelSmooth };

std::string_view mechanism_name(AugmentMechanism m);

struct AugmentConfig {
  AugmentMechanism mechanism = AugmentMechanism::None;
  int tau = 1;
};

/// Magnitude parameter for a mechanism at strength tau in [1, 5]:
/// mixup/cutmix probability 0.1 + 0.2 (tau - 1), label-smoothing p = 0.1 tau,
/// cutout side M in {4, 6, 8, 10, 12}.
double tau_to_params(AugmentMechanism mechanism, int tau);

/// Per-sample outcome of a mixing augmentation.
struct MixRecord {
  bool applied = false;
  std::size_t partner = 0;
  double weight = 1.0;     // weight of the sample's own label
  std::size_t area = 0;    // cutmix: pasted pixel count
};

struct MixResult {
  Tensor images;
  SoftLabels labels;
  std::vector<MixRecord> records;
};

/// b*xi + (1-b)*xj and the matching label mix.
std::pair<Tensor, Tensor> mixup_pair(const Tensor& xi, const Tensor& xj, const Tensor& yi, const Tensor& yj,
                                     double b);

MixResult mixup(const Tensor& images, const Tensor& labels_onehot, double p, Rng& rng);
MixResult cutmix(const Tensor& images, const Tensor& labels_onehot, double p, Rng& rng);
/// Zeros an M x M box (clipped at the border) around a uniform random center in each image.
Tensor cutout(const Tensor& images, std::size_t m, Rng& rng);
/// 1 - p on the true class, p / (m - 1) elsewhere. Requires p in [0, 1).
SoftLabels label_smooth(std::span<const int> labels, double p, std::size_t m = 10);

/// Mean absolute per-pixel difference between two batches.
double mean_abs_diff(const Tensor& a, const Tensor& b);

/// IDX (big-endian) images 0x00000803 and labels 0x00000801; 28x28 inputs are
/// box-filtered down to 16x16 and scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split);

}  // namespace tlab

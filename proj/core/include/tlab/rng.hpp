#pragma once

#include <cstdint>
#include <random>

namespace tlab {

/// Mixes (seed, tag, index) into an independent substream seed (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0);

/// Deterministic random source. Distribution mappings are written out here so
/// draws are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng substream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
    return Rng(derive_seed(seed, tag, index));
  }

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::mt19937_64 engine_;
};

// Stream tags keep substreams of different purposes apart.
namespace stream {
inline constexpr std::uint64_t kInit = 0x1;
inline constexpr std::uint64_t kDataTrain = 0x2;
inline constexpr std::uint64_t kDataTest = 0x3;
inline constexpr std::uint64_t kShuffle = 0x4;
inline constexpr std::uint64_t kAugment = 0x5;
inline constexpr std::uint64_t kAdversarial = 0x6;
inline constexpr std::uint64_t kAttack = 0x7;
inline constexpr std::uint64_t kSample = 0x8;
inline constexpr std::uint64_t kPower = 0x9;
}  // namespace stream

}  // namespace tlab

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tlab/autodiff.hpp"
#include "tlab/tensor.hpp"

namespace tlab {

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kNumClasses = 10;

/// The four desk architectures. Values are the on-disk arch ids.
enum class Arch : std::uint8_t { MlpS = 0, MlpL = 1, CnnS = 2, CnnL = 3 };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);

struct LayerSpec {
  enum class Kind { Dense, Conv, Relu, Flatten };
  Kind kind;
  std::string name;  // parameter prefix; empty for parameter-free layers
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
};

/// Architecture registry: the frozen layer table of each arch.
const std::vector<LayerSpec>& layers(Arch arch);
/// Golden parameter count per arch.
std::size_t parameter_count(Arch arch);

struct ModelSpec {
  Arch arch = Arch::MlpS;
  Shape input_shape{1, kImageSide, kImageSide};
  std::size_t num_classes = kNumClasses;
};

struct Param {
  std::string name;
  Tensor tensor;
  friend bool operator==(const Param&, const Param&) = default;
};

/// Named parameters in declaration order.
struct ParamSet {
  Arch arch = Arch::MlpS;
  std::vector<Param> params;

  std::size_t size() const { return params.size(); }
  std::size_t total_count() const;
  const Tensor& at(std::string_view name) const;
  std::uint64_t checksum() const;
  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

/// Expected (name, shape) list for an architecture.
std::vector<std::pair<std::string, Shape>> parameter_layout(Arch arch);

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases; a pure function of (spec, seed).
ParamSet init(const ModelSpec& spec, std::uint64_t seed);
inline ParamSet init(Arch arch, std::uint64_t seed) { return init(ModelSpec{arch}, seed); }
/// All-zero parameters of an arch.
ParamSet zeros_like(Arch arch);

/// Records the parameters on a tape.
std::vector<Var> bind(Tape& tape, const ParamSet& params, bool requires_grad);

/// Logits (N, 10). x is (N, 1, 16, 16), or (N, 256) for MLPs.
Var forward(Arch arch, std::span<const Var> params, Var x);
Tensor forward(const ParamSet& params, const Tensor& x);

/// Row-wise argmax, ties to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);
std::vector<int> predict(const ParamSet& params, const Tensor& x);

/// Flat parameter vector helpers used by optimizers.
double squared_norm(std::span<const Tensor> tensors);

// Checkpoint I/O ("TLAB" v1, little-endian).
void save(const ParamSet& params, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize(const ParamSet& params);
/// `expected` rejects a checkpoint of another arch with DimensionError.
ParamSet load(const std::filesystem::path& path, std::optional<Arch> expected = std::nullopt);
ParamSet deserialize(std::span<const std::uint8_t> bytes, std::optional<Arch> expected = std::nullopt);

}  // namespace tlab

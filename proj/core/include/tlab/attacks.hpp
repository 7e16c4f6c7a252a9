#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tlab/autodiff.hpp"
#include "tlab/model.hpp"
#include "tlab/perturb.hpp"
#include "tlab/rng.hpp"

namespace tlab {

enum class TargetRule { FixedOffset, LeastLikely };

std::string_view target_rule_name(TargetRule r);
TargetRule parse_target_rule(std::string_view name);

struct AttackConfig {
  Norm norm = Norm::Linf;
  double eps = 8.0 / 255.0;
  int steps = 40;
  double step_size = -1.0;  // negative: 2.5 * eps / steps
  bool targeted = false;
  TargetRule target_rule = TargetRule::FixedOffset;
  double mu_decay = 0.0;
  double di_prob = 0.0;
  bool random_start = true;
  int restarts = 1;
  std::uint64_t seed = 0;

  void validate() const;
  double effective_step_size() const { return step_size < 0 ? 2.5 * eps / steps : step_size; }
  /// Canonical JSON echo of every field.
  std::string json() const;
};

struct AdvSet {
  Tensor clean;               // (N, 1, 16, 16)
  std::vector<int> labels;
  std::vector<int> targets;   // empty for untargeted attacks
  Tensor adv;
  std::vector<std::uint8_t> fooled;  // surrogate (ensemble) fooled on x_adv
  std::vector<int> zero_grad_steps;  // steps skipped because the gradient vanished

  std::size_t size() const { return labels.size(); }
  double fooling_rate() const;
};

/// Resize-and-pad plan for one image; side == 16 is the identity.
struct DiPlan {
  bool applied = false;
  std::size_t side = 16, top = 0, left = 0;
};

DiPlan draw_di_plan(double di_prob, Rng& rng);
/// Flat source index per output pixel of a 16x16 image, -1 for zero padding.
std::vector<std::int64_t> di_index(const DiPlan& plan);
/// Nearest-neighbour resize to a random side in [12, 16] then random zero padding, with probability di_prob.
Tensor di_transform(const Tensor& x, double di_prob, Rng& rng);

/// Target classes for a batch by rule, from clean ensemble logits.
std::vector<int> choose_targets(const Tensor& clean_logits, std::span<const int> labels, TargetRule rule);

/// Objective to be ascended: a sum of per-sample terms of the (possibly transformed) input.
using BatchObjective = std::function<Var(Tape&, Var)>;

/// Iterative sign/L2 ascent with projection and [0,1] clipping; applies input diversity to
/// the argument of the objective and MI momentum when mu_decay > 0. Returns x + delta.
Tensor perturb(const BatchObjective& objective, const Tensor& x, const AttackConfig& cfg,
               std::uint64_t restart = 0, std::vector<int>* zero_grad_steps = nullptr);

/// Ensemble-mean logits.
Tensor ensemble_logits(std::span<const ParamSet> models, const Tensor& x);

/// PGD / MI / DIM against one model or an ensemble (loss averaged over members).
/// For targeted attacks, `targets` overrides the configured rule.
AdvSet attack(std::span<const ParamSet> models, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
              std::optional<std::vector<int>> targets = std::nullopt);
AdvSet attack(const ParamSet& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg);

/// clean.bin / adv.bin (8-byte header: u32 N, u8 C, u8 H, u8 W, u8 0; then f64 LE values) and meta.json.
void save_advset(const AdvSet& set, const AttackConfig& cfg, const std::filesystem::path& dir);
AdvSet load_advset(const std::filesystem::path& dir);

std::vector<std::uint8_t> encode_images(const Tensor& images);
Tensor decode_images(std::span<const std::uint8_t> bytes);

}  // namespace tlab

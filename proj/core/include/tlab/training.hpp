#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tlab/autodiff.hpp"
#include "tlab/data.hpp"
#include "tlab/model.hpp"
#include "tlab/perturb.hpp"

namespace tlab {

enum class Mechanism { St, At, Mu, Cm, Co, Ls, Ir, Jr, Er, Sam, SamIr, SamJr };

std::string_view mechanism_name(Mechanism m);
Mechanism parse_mechanism(std::string_view name);
/// The augmentation a mechanism trains with, or None.
AugmentMechanism augmentation_of(Mechanism m);

struct TrainConfig {
  Mechanism mechanism = Mechanism::St;
  int epochs = 30;
  std::size_t batch_size = 64;
  double peak_lr = 0.05;
  double momentum = 0.9;
  int warmup_epochs = 3;
  std::uint64_t seed = 0;
  // at
  double eps_adv = 0.0;
  int at_steps = 7;
  double at_step_size = -1.0;  // negative: 0.25 * eps_adv
  Norm at_norm = Norm::L2;
  double lambda_ir = 0.0;
  double lambda_jr = 0.0;
  double lambda_er = 0.0;
  double rho = 0.0;  // sam, sam_ir, sam_jr
  int tau = 1;       // mu, cm, co, ls

  /// Throws ValidationError / DomainError on a malformed config.
  void validate() const;
  double effective_at_step_size() const { return at_step_size < 0 ? 0.25 * eps_adv : at_step_size; }
};

struct OptimizerState {
  std::vector<Tensor> velocity;
  std::size_t step = 0;

  static OptimizerState for_params(const ParamSet& params);
};

/// v <- momentum * v + g; theta <- theta - lr * v.
void sgd_step(ParamSet& params, std::span<const Tensor> grads, OptimizerState& state, double lr, double momentum);

/// Linear warmup 0 -> peak over warmup_steps, then cosine decay to 0 at total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak);

/// L2 (or linf) PGD ascent from zero on loss_at, which must be a sum of
/// per-sample losses so each row is maximized independently. Iterates stay in [0,1].
Tensor at_inner_max(const ScalarFn& loss_at, const Tensor& x, double eps, int steps, double step_size,
                    Norm norm = Norm::L2);
Tensor at_inner_max(const ParamSet& params, const Tensor& x, const Tensor& targets, double eps, int steps,
                    double step_size, Norm norm = Norm::L2);

/// A training batch; targets are rows of class probabilities.
struct Batch {
  Tensor x;
  Tensor targets;
};

/// Applies the config's augmentation (if any) to a clean batch.
Batch augment_batch(const TrainConfig& config, const Tensor& x, std::span<const int> labels, Rng& rng);

/// Scalar training objective on an already-augmented batch, recorded on params' tape.
/// For sam variants this is the base loss.
Var loss_for_mechanism(const TrainConfig& config, Arch arch, std::span<const Var> params, const Batch& batch);

/// loss + lambda/2 * sum_p |d loss / d p|^2, differentiable through the inner gradient.
Var with_gradient_penalty(Var loss, std::span<const Var> params, double lambda);

/// Parameter-space loss closure: (tape, bound params) -> scalar.
using ParamLossFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Loss value and gradient for every parameter.
std::pair<double, std::vector<Tensor>> loss_and_grad(const ParamSet& params, const ParamLossFn& loss);

/// One SAM update: gradient at theta + rho * g/|g| (global norm), applied to the
/// unperturbed theta. Falls back to a plain SGD step when |g| is zero. Returns the loss at theta.
double sam_step(ParamSet& params, const ParamLossFn& loss, double rho, OptimizerState& state, double lr,
                double momentum);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;

  std::string json() const;
};

struct TrainResult {
  ParamSet params;
  std::vector<EpochLog> log;
};

double accuracy(const ParamSet& params, const Dataset& data);

/// Deterministic given (arch, config, data). Throws NumericError if the loss turns non-finite.
TrainResult train(Arch arch, const TrainConfig& config, const Dataset& train_set, const Dataset* test_set = nullptr,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

struct SnapshotSet {
  std::vector<ParamSet> snapshots;
};

/// Constant-lr fine-tuning from params with the config's mechanism loss,
/// recording snapshots_per_epoch evenly spaced snapshots per epoch.
SnapshotSet lgv_collect(const ParamSet& params, const TrainConfig& config, const Dataset& data, double lr_const,
                        int epochs, int snapshots_per_epoch);

}  // namespace tlab

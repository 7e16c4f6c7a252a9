#include "tlab/training.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "tlab/error.hpp"

namespace tlab {

namespace {

struct MechanismInfo {
  Mechanism m;
  const char* name;
};

constexpr MechanismInfo kMechanisms[] = {
    {Mechanism::St, "st"}, {Mechanism::At, "at"}, {Mechanism::Mu, "mu"},   {Mechanism::Cm, "cm"},
    {Mechanism::Co, "co"}, {Mechanism::Ls, "ls"}, {Mechanism::Ir, "ir"},   {Mechanism::Jr, "jr"},
    {Mechanism::Er, "er"}, {Mechanism::Sam, "sam"}, {Mechanism::SamIr, "sam_ir"}, {Mechanism::SamJr, "sam_jr"},
};

bool is_sam(Mechanism m) { return m == Mechanism::Sam || m == Mechanism::SamIr || m == Mechanism::SamJr; }

void require_non_negative(double v, const char* what) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError(std::string(what) + " must be a finite value >= 0");
}

}  // namespace

std::string_view mechanism_name(Mechanism m) {
  for (const auto& info : kMechanisms)
    if (info.m == m) return info.name;
  return "?";
}

Mechanism parse_mechanism(std::string_view name) {
  for (const auto& info : kMechanisms)
    if (info.name == name) return info.m;
  throw ValidationError("unknown mechanism '" + std::string(name) + "'");
}

AugmentMechanism augmentation_of(Mechanism m) {
  switch (m) {
    case Mechanism::Mu: return AugmentMechanism::Mixup;
    case Mechanism::Cm: return AugmentMechanism::CutMix;
    case Mechanism::Co: return AugmentMechanism::Cutout;
    case Mechanism::Ls: return AugmentMechanism::LabelSmooth;
    default: return AugmentMechanism::None;
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ValidationError("warmup_epochs must be in [0, epochs]");
  require_non_negative(peak_lr, "peak_lr");
  require_non_negative(momentum, "momentum");
  require_non_negative(eps_adv, "eps_adv");
  require_non_negative(lambda_ir, "lambda_ir");
  require_non_negative(lambda_jr, "lambda_jr");
  require_non_negative(lambda_er, "lambda_er");
  require_non_negative(rho, "rho");
  if (at_step_size >= 0) require_non_negative(at_step_size, "at_step_size");
  if (mechanism == Mechanism::At && at_steps < 1) throw ValidationError("at_steps must be >= 1");
  if (augmentation_of(mechanism) != AugmentMechanism::None && (tau < 1 || tau > 5))
    throw DomainError("tau must be in [1,5]");
}

OptimizerState OptimizerState::for_params(const ParamSet& params) {
  OptimizerState s;
  for (const auto& p : params.params) s.velocity.emplace_back(p.tensor.shape());
  return s;
}

void sgd_step(ParamSet& params, std::span<const Tensor> grads, OptimizerState& state, double lr, double momentum) {
  if (grads.size() != params.size()) throw DimensionError("gradient count does not match parameters");
  if (state.velocity.empty()) state = OptimizerState::for_params(params);
  if (state.velocity.size() != params.size()) throw DimensionError("optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = params.params[i].tensor;
    Tensor& v = state.velocity[i];
    if (grads[i].shape() != theta.shape() || v.shape() != theta.shape())
      throw DimensionError("gradient shape " + shape_str(grads[i].shape()) + " does not match " +
                           params.params[i].name + shape_str(theta.shape()));
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = momentum * v[k] + grads[i][k];
      theta[k] -= lr * v[k];
    }
  }
  ++state.step;
}

double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak) {
  if (step > total_steps) throw DomainError("step beyond schedule end");
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return peak;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor at_inner_max(const ScalarFn& loss_at, const Tensor& x, double eps, int steps, double step_size, Norm norm) {
  require_non_negative(eps, "eps");
  Tensor delta(x.shape());
  if (eps == 0.0) return x;
  for (int s = 0; s < steps; ++s) {
    Tensor probe = x;
    for (std::size_t k = 0; k < x.size(); ++k) probe[k] += delta[k];
    Tape tape;
    Var xv = tape.leaf(probe);
    Tensor g = grad_value(loss_at(tape, xv), xv);
    Tensor dir = ascent_direction(g, norm);
    for (std::size_t k = 0; k < x.size(); ++k) delta[k] += step_size * dir[k];
    project_rows(delta, norm, eps);
    clip_delta_to_unit_box(x, delta);
  }
  Tensor out = x;
  for (std::size_t k = 0; k < x.size(); ++k) out[k] += delta[k];
  return out;
}

Tensor at_inner_max(const ParamSet& params, const Tensor& x, const Tensor& targets, double eps, int steps,
                    double step_size, Norm norm) {
  ScalarFn loss = [&](Tape& t, Var xv) {
    auto pv = bind(t, params, false);
    return softmax_cross_entropy(forward(params.arch, pv, xv), t.constant(targets), Reduction::Sum);
  };
  return at_inner_max(loss, x, eps, steps, step_size, norm);
}

Batch augment_batch(const TrainConfig& config, const Tensor& x, std::span<const int> labels, Rng& rng) {
  const AugmentMechanism aug = augmentation_of(config.mechanism);
  Tensor onehot = one_hot(labels);
  switch (aug) {
    case AugmentMechanism::Mixup: {
      auto r = mixup(x, onehot, tau_to_params(aug, config.tau), rng);
      return {std::move(r.images), std::move(r.labels.probs)};
    }
    case AugmentMechanism::CutMix: {
      auto r = cutmix(x, onehot, tau_to_params(aug, config.tau), rng);
      return {std::move(r.images), std::move(r.labels.probs)};
    }
    case AugmentMechanism::Cutout:
      return {cutout(x, static_cast<std::size_t>(tau_to_params(aug, config.tau)), rng), std::move(onehot)};
    case AugmentMechanism::LabelSmooth:
      return {x, label_smooth(labels, tau_to_params(aug, config.tau)).probs};
    case AugmentMechanism::None: break;
  }
  return {x, std::move(onehot)};
}

namespace {

// Mean over samples of |grad_x loss_i|_2; the per-sample gradients come from one pass on the summed loss.
Var input_gradient_penalty(Var xv, Var targets, Var logits) {
  Var ce_sum = softmax_cross_entropy(logits, targets, Reduction::Sum);
  Var gx = grad(ce_sum, std::span(&xv, 1), true)[0];
  return mean(row_norms(gx));
}

Var jacobian_penalty(Var xv, Var logits) {
  Tape& t = xv.tape();
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  Var sq;
  for (std::size_t k = 0; k < c; ++k) {
    Tensor e({n, c});
    for (std::size_t i = 0; i < n; ++i) e[i * c + k] = 1.0;
    Var gk = grad(sum(logits * t.constant(std::move(e))), std::span(&xv, 1), true)[0];
    Var rows = sum_to(square(reshape(gk, {n, gk.value().size() / n})), {n, 1});
    sq = k == 0 ? rows : add(sq, rows);
  }
  return mean(sqrt(sq));
}

}  // namespace

Var loss_for_mechanism(const TrainConfig& config, Arch arch, std::span<const Var> params, const Batch& batch) {
  if (params.empty()) throw ValidationError("no parameters bound");
  Tape& t = params[0].tape();
  Var targets = t.constant(batch.targets);
  const Mechanism m = config.mechanism;

  Tensor x = batch.x;
  if (m == Mechanism::At) {
    ParamSet current;
    current.arch = arch;
    const auto layout = parameter_layout(arch);
    for (std::size_t i = 0; i < params.size(); ++i) current.params.push_back({layout.at(i).first, params[i].value()});
    x = at_inner_max(current, batch.x, batch.targets, config.eps_adv, config.at_steps,
                     config.effective_at_step_size(), config.at_norm);
  }

  const bool ir = m == Mechanism::Ir || m == Mechanism::SamIr;
  const bool jr = m == Mechanism::Jr || m == Mechanism::SamJr;
  Var xv = t.leaf(x, ir || jr);
  Var logits = forward(arch, params, xv);
  Var loss = softmax_cross_entropy(logits, targets);
  if (ir) {
    require_non_negative(config.lambda_ir, "lambda_ir");
    if (config.lambda_ir > 0) loss = add(loss, scale(input_gradient_penalty(xv, targets, logits), config.lambda_ir));
  } else if (jr) {
    require_non_negative(config.lambda_jr, "lambda_jr");
    if (config.lambda_jr > 0) loss = add(loss, scale(jacobian_penalty(xv, logits), config.lambda_jr));
  } else if (m == Mechanism::Er) {
    require_non_negative(config.lambda_er, "lambda_er");
    if (config.lambda_er > 0) loss = with_gradient_penalty(loss, params, config.lambda_er);
  }
  return loss;
}

Var with_gradient_penalty(Var loss, std::span<const Var> params, double lambda) {
  require_non_negative(lambda, "lambda_er");
  auto gp = grad(loss, params, true);
  Var pen = sum(square(gp[0]));
  for (std::size_t i = 1; i < gp.size(); ++i) pen = add(pen, sum(square(gp[i])));
  return add(loss, scale(pen, 0.5 * lambda));
}

std::pair<double, std::vector<Tensor>> loss_and_grad(const ParamSet& params, const ParamLossFn& loss) {
  Tape tape;
  auto pv = bind(tape, params, true);
  Var l = loss(tape, pv);
  const double value = l.value().item();
  return {value, grad_values(l, pv)};
}

double sam_step(ParamSet& params, const ParamLossFn& loss, double rho, OptimizerState& state, double lr,
                double momentum) {
  require_non_negative(rho, "rho");
  auto [value, g1] = loss_and_grad(params, loss);
  const double gnorm = std::sqrt(squared_norm(g1));
  if (rho == 0.0 || gnorm == 0.0) {
    sgd_step(params, g1, state, lr, momentum);
    return value;
  }
  // The perturbed point lives in a copy; params never hold theta + e.
  ParamSet perturbed = params;
  const double f = rho / gnorm;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = perturbed.params[i].tensor;
    for (std::size_t k = 0; k < p.size(); ++k) p[k] += f * g1[i][k];
  }
  auto g2 = loss_and_grad(perturbed, loss).second;
  sgd_step(params, g2, state, lr, momentum);
  return value;
}

std::string EpochLog::json() const {
  std::ostringstream os;
  os.precision(17);
  os << "{\"epoch\":" << epoch << ",\"train_loss\":" << train_loss << ",\"test_acc\":" << test_acc
     << ",\"lr\":" << lr << "}";
  return os.str();
}

double accuracy(const ParamSet& params, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t b = 0; b < data.size(); b += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - b);
    const auto pred = predict(params, data.images.rows(b, n));
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == data.labels[b + i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

bool params_finite(const ParamSet& params) {
  for (const auto& p : params.params)
    if (!p.tensor.all_finite()) return false;
  return true;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = Rng::substream(seed, stream::kShuffle, epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Runs one optimization step on the given clean batch and returns its loss.
double train_step(ParamSet& params, const TrainConfig& config, const Dataset& data,
                  std::span<const std::size_t> indices, OptimizerState& state, double lr, std::uint64_t step) {
  Rng aug_rng = Rng::substream(config.seed, stream::kAugment, step);
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) labels.push_back(data.labels[i]);
  const Batch batch = augment_batch(config, gather_rows(data.images, indices), labels, aug_rng);
  const Arch arch = params.arch;
  ParamLossFn loss = [&](Tape&, std::span<const Var> pv) { return loss_for_mechanism(config, arch, pv, batch); };
  if (is_sam(config.mechanism)) return sam_step(params, loss, config.rho, state, lr, config.momentum);
  auto [value, grads] = loss_and_grad(params, loss);
  if (std::isfinite(value)) sgd_step(params, grads, state, lr, config.momentum);
  return value;
}

}  // namespace

TrainResult train(Arch arch, const TrainConfig& config, const Dataset& train_set, const Dataset* test_set,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (train_set.size() == 0) throw ValidationError("empty training set");
  TrainResult result{init(arch, config.seed), {}};
  OptimizerState state = OptimizerState::for_params(result.params);
  const std::size_t n = train_set.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * static_cast<std::size_t>(config.epochs);
  const std::size_t warmup = per_epoch * static_cast<std::size_t>(config.warmup_epochs);
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled_indices(n, config.seed, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t count = std::min(config.batch_size, n - begin);
      lr = cosine_lr(step + 1, total, warmup, config.peak_lr);
      double l = 0.0;
      try {
        l = train_step(result.params, config, train_set, std::span(order).subspan(begin, count), state, lr, step);
      } catch (const DomainError&) {
        // Overflow inside the forward or backward pass surfaces as a non-finite tensor.
        l = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(l) || !params_finite(result.params))
        throw NumericError("training diverged: loss " + std::to_string(l) + " at epoch " + std::to_string(epoch + 1) +
                           " step " + std::to_string(step) + " (" + std::string(mechanism_name(config.mechanism)) +
                           ", peak_lr " + std::to_string(config.peak_lr) + ")");
      loss_sum += l;
      ++step;
    }
    EpochLog entry{epoch + 1, loss_sum / static_cast<double>(per_epoch),
                   test_set ? accuracy(result.params, *test_set) : 0.0, lr};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

SnapshotSet lgv_collect(const ParamSet& params, const TrainConfig& config, const Dataset& data, double lr_const,
                        int epochs, int snapshots_per_epoch) {
  if (epochs < 1 || snapshots_per_epoch < 1) throw ValidationError("lgv_collect needs at least one snapshot");
  require_non_negative(lr_const, "lr_const");
  SnapshotSet out;
  ParamSet current = params;
  OptimizerState state = OptimizerState::for_params(current);
  const std::size_t n = data.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const auto spe = static_cast<std::size_t>(snapshots_per_epoch);
  if (spe > per_epoch) throw ValidationError("more snapshots per epoch than steps per epoch");
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    // Distinct shuffle stream from the original training run.
    const auto order = shuffled_indices(n, derive_seed(config.seed, stream::kSample), static_cast<std::uint64_t>(epoch));
    std::size_t next_snapshot = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t count = std::min(config.batch_size, n - begin);
      const double l = train_step(current, config, data, std::span(order).subspan(begin, count), state, lr_const,
                                  derive_seed(step, stream::kSample));
      if (!std::isfinite(l) || !params_finite(current)) throw NumericError("lgv fine-tuning diverged at step " + std::to_string(step));
      ++step;
      if ((b + 1) * spe >= (next_snapshot + 1) * per_epoch) {
        out.snapshots.push_back(current);
        ++next_snapshot;
      }
    }
  }
  return out;
}

}  // namespace tlab

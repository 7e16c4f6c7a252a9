#include "tlab/attacks.hpp"

#include <cmath>
#include <json.hpp>

#include "tlab/data.hpp"
#include "tlab/error.hpp"
#include "tlab/io.hpp"

namespace tlab {

using nlohmann::json;

namespace {
constexpr std::size_t kSide = 16;
constexpr std::size_t kPixels = kSide * kSide;
}  // namespace

std::string_view target_rule_name(TargetRule r) {
  return r == TargetRule::FixedOffset ? "fixed-offset" : "least-likely";
}

TargetRule parse_target_rule(std::string_view name) {
  if (name == "fixed-offset") return TargetRule::FixedOffset;
  if (name == "least-likely") return TargetRule::LeastLikely;
  throw ValidationError("unknown target rule '" + std::string(name) + "'");
}

void AttackConfig::validate() const {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw DomainError("attack eps must be >= 0");
  if (steps < 1) throw ValidationError("attack steps must be >= 1");
  if (!(di_prob >= 0.0 && di_prob <= 1.0)) throw DomainError("di_prob must be in [0,1]");
  if (!(mu_decay >= 0.0) || !std::isfinite(mu_decay)) throw DomainError("mu_decay must be >= 0");
  if (restarts < 1) throw ValidationError("restarts must be >= 1");
  if (step_size >= 0 && !std::isfinite(step_size)) throw DomainError("step_size must be finite");
}

std::string AttackConfig::json() const {
  nlohmann::ordered_json j;
  j["norm"] = norm_name(norm);
  j["eps"] = eps;
  j["steps"] = steps;
  j["step_size"] = effective_step_size();
  j["targeted"] = targeted;
  j["target_rule"] = target_rule_name(target_rule);
  j["mu_decay"] = mu_decay;
  j["di_prob"] = di_prob;
  j["random_start"] = random_start;
  j["restarts"] = restarts;
  j["seed"] = seed;
  return j.dump();
}

double AdvSet::fooling_rate() const {
  if (fooled.empty()) return 0.0;
  std::size_t k = 0;
  for (auto f : fooled) k += f;
  return static_cast<double>(k) / static_cast<double>(fooled.size());
}

DiPlan draw_di_plan(double di_prob, Rng& rng) {
  DiPlan plan;
  if (!rng.bernoulli(di_prob)) return plan;
  plan.applied = true;
  plan.side = 12 + rng.below(5);
  plan.top = rng.below(kSide - plan.side + 1);
  plan.left = rng.below(kSide - plan.side + 1);
  return plan;
}

std::vector<std::int64_t> di_index(const DiPlan& plan) {
  std::vector<std::int64_t> idx(kPixels, -1);
  for (std::size_t r = 0; r < plan.side; ++r)
    for (std::size_t c = 0; c < plan.side; ++c) {
      const std::size_t sr = r * kSide / plan.side, sc = c * kSide / plan.side;
      idx[(plan.top + r) * kSide + plan.left + c] = static_cast<std::int64_t>(sr * kSide + sc);
    }
  return idx;
}

Tensor di_transform(const Tensor& x, double di_prob, Rng& rng) {
  if (!(di_prob >= 0.0 && di_prob <= 1.0)) throw DomainError("di_prob must be in [0,1]");
  if (x.size() % kPixels != 0 || x.rank() < 2) throw DimensionError("di_transform takes 16x16 images");
  Tensor out = x;
  const std::size_t n = x.size() / kPixels;
  for (std::size_t i = 0; i < n; ++i) {
    const DiPlan plan = draw_di_plan(di_prob, rng);
    if (!plan.applied) continue;
    const auto idx = di_index(plan);
    for (std::size_t k = 0; k < kPixels; ++k)
      out[i * kPixels + k] = idx[k] < 0 ? 0.0 : x[i * kPixels + static_cast<std::size_t>(idx[k])];
  }
  return out;
}

std::vector<int> choose_targets(const Tensor& clean_logits, std::span<const int> labels, TargetRule rule) {
  const std::size_t n = labels.size(), c = clean_logits.dim(1);
  std::vector<int> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rule == TargetRule::FixedOffset) {
      t[i] = (labels[i] + 1) % static_cast<int>(c);
      continue;
    }
    std::size_t worst = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (clean_logits[i * c + j] < clean_logits[i * c + worst]) worst = j;
    // The true class can only be least likely if every logit ties; take the next class then.
    t[i] = static_cast<int>(worst) == labels[i] ? (labels[i] + 1) % static_cast<int>(c) : static_cast<int>(worst);
  }
  return t;
}

Tensor perturb(const BatchObjective& objective, const Tensor& x, const AttackConfig& cfg, std::uint64_t restart,
               std::vector<int>* zero_grad_steps) {
  cfg.validate();
  const std::size_t n = x.dim(0), m = x.size() / n;
  if (zero_grad_steps) zero_grad_steps->assign(n, 0);
  if (cfg.eps == 0.0) return x;

  Tensor delta = cfg.random_start ? random_in_ball(x.shape(), cfg.norm, cfg.eps, derive_seed(cfg.seed, stream::kAttack, restart))
                                  : Tensor(x.shape());
  clip_delta_to_unit_box(x, delta);
  Tensor acc(x.shape());
  std::vector<Rng> di_rngs;
  if (cfg.di_prob > 0)
    for (std::size_t i = 0; i < n; ++i)
      di_rngs.push_back(Rng::substream(derive_seed(cfg.seed, stream::kAugment, restart), stream::kAttack, i));
  const double alpha = cfg.effective_step_size();

  for (int t = 0; t < cfg.steps; ++t) {
    Tensor probe = x;
    for (std::size_t k = 0; k < x.size(); ++k) probe[k] += delta[k];
    Tape tape;
    Var xv = tape.leaf(probe);
    Var input = xv;
    if (cfg.di_prob > 0) {
      if (m != kPixels) throw DimensionError("input diversity needs 16x16 single-channel images");
      std::vector<std::int64_t> idx(x.size());
      for (std::size_t i = 0; i < n; ++i) {
        const auto plan_idx = di_index(draw_di_plan(cfg.di_prob, di_rngs[i]));
        for (std::size_t k = 0; k < kPixels; ++k)
          idx[i * kPixels + k] = plan_idx[k] < 0 ? -1 : plan_idx[k] + static_cast<std::int64_t>(i * kPixels);
      }
      input = gather(xv, std::move(idx), x.shape());
    }
    Tensor g = grad_value(objective(tape, input), xv);
    const auto gnorm = row_norms(g, Norm::L2);
    Tensor dir;
    if (cfg.mu_decay > 0) {
      const std::vector<double> sums = [&] {
        std::vector<double> s(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < m; ++k) s[i] += std::abs(g[i * m + k]);
        return s;
      }();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < m; ++k)
          acc[i * m + k] = cfg.mu_decay * acc[i * m + k] + (sums[i] > 0 ? g[i * m + k] / sums[i] : 0.0);
      dir = ascent_direction(acc, cfg.norm);
    } else {
      dir = ascent_direction(g, cfg.norm);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (gnorm[i] == 0.0 && zero_grad_steps) ++(*zero_grad_steps)[i];
      for (std::size_t k = 0; k < m; ++k) delta[i * m + k] += alpha * dir[i * m + k];
    }
    project_rows(delta, cfg.norm, cfg.eps);
    clip_delta_to_unit_box(x, delta);
  }
  Tensor out = x;
  for (std::size_t k = 0; k < x.size(); ++k) out[k] += delta[k];
  return out;
}

Tensor ensemble_logits(std::span<const ParamSet> models, const Tensor& x) {
  if (models.empty()) throw ValidationError("empty model ensemble");
  Tensor sum = forward(models[0], x);
  for (std::size_t k = 1; k < models.size(); ++k) {
    Tensor z = forward(models[k], x);
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += z[j];
  }
  if (models.size() > 1)
    for (double& v : sum.values()) v /= static_cast<double>(models.size());
  return sum;
}

namespace {

Var ensemble_ce_sum(Tape& tape, std::span<const ParamSet> models, Var input, const Tensor& onehot) {
  Var targets = tape.constant(onehot);
  Var total;
  for (std::size_t k = 0; k < models.size(); ++k) {
    auto pv = bind(tape, models[k], false);
    Var ce = softmax_cross_entropy(forward(models[k].arch, pv, input), targets, Reduction::Sum);
    total = k == 0 ? ce : add(total, ce);
  }
  return models.size() > 1 ? scale(total, 1.0 / static_cast<double>(models.size())) : total;
}

// Mean-over-models cross-entropy per sample, used to rank restarts.
std::vector<double> per_sample_loss(std::span<const ParamSet> models, const Tensor& x, const Tensor& onehot) {
  const std::size_t n = x.dim(0), c = onehot.dim(1);
  std::vector<double> out(n, 0.0);
  for (const auto& model : models) {
    Tensor z = forward(model, x);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = z[i * c];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[i * c + j]);
      double se = 0.0, dotv = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        se += std::exp(z[i * c + j] - mx);
        dotv += onehot[i * c + j] * z[i * c + j];
      }
      out[i] += (mx + std::log(se) - dotv) / static_cast<double>(models.size());
    }
  }
  return out;
}

std::vector<std::uint8_t> fooled_flags(const Tensor& logits, std::span<const int> labels, std::span<const int> targets) {
  const auto pred = argmax_rows(logits);
  std::vector<std::uint8_t> f(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) f[i] = targets.empty() ? pred[i] != labels[i] : pred[i] == targets[i];
  return f;
}

}  // namespace

AdvSet attack(std::span<const ParamSet> models, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
              std::optional<std::vector<int>> targets) {
  cfg.validate();
  if (models.empty()) throw ValidationError("attack needs at least one model");
  if (x.rank() != 4 || x.dim(0) != labels.size()) throw DimensionError("attack batch and labels disagree");
  const std::size_t n = labels.size();

  AdvSet out;
  out.clean = x;
  out.labels.assign(labels.begin(), labels.end());
  for (int l : labels)
    if (l < 0 || l >= static_cast<int>(kNumClasses)) throw DomainError("label out of range");
  if (cfg.targeted) {
    if (targets) {
      if (targets->size() != n) throw DimensionError("one target per sample required");
      for (std::size_t i = 0; i < n; ++i)
        if ((*targets)[i] < 0 || (*targets)[i] >= static_cast<int>(kNumClasses) || (*targets)[i] == labels[i])
          throw ValidationError("invalid target class " + std::to_string((*targets)[i]) + " for sample " +
                                std::to_string(i));
      out.targets = *targets;
    } else {
      out.targets = choose_targets(ensemble_logits(models, x), labels, cfg.target_rule);
    }
  }

  const Tensor onehot = one_hot(cfg.targeted ? std::span<const int>(out.targets) : labels);
  const double sign = cfg.targeted ? -1.0 : 1.0;
  BatchObjective objective = [&](Tape& tape, Var input) {
    Var ce = ensemble_ce_sum(tape, models, input, onehot);
    return cfg.targeted ? scale(ce, sign) : ce;
  };

  std::vector<int> zero_steps;
  out.adv = perturb(objective, x, cfg, 0, &zero_steps);
  out.zero_grad_steps = zero_steps;
  out.fooled = fooled_flags(ensemble_logits(models, out.adv), out.labels, out.targets);
  if (cfg.restarts > 1) {
    auto best_loss = per_sample_loss(models, out.adv, onehot);
    for (int r = 1; r < cfg.restarts; ++r) {
      Tensor cand = perturb(objective, x, cfg, static_cast<std::uint64_t>(r), &zero_steps);
      auto cand_fooled = fooled_flags(ensemble_logits(models, cand), out.labels, out.targets);
      auto cand_loss = per_sample_loss(models, cand, onehot);
      for (std::size_t i = 0; i < n; ++i) {
        const double gain = sign * (cand_loss[i] - best_loss[i]);
        const bool better = cand_fooled[i] > out.fooled[i] || (cand_fooled[i] == out.fooled[i] && gain > 0);
        if (!better) continue;
        for (std::size_t k = 0; k < kPixels; ++k) out.adv[i * kPixels + k] = cand[i * kPixels + k];
        out.fooled[i] = cand_fooled[i];
        best_loss[i] = cand_loss[i];
        out.zero_grad_steps[i] = zero_steps[i];
      }
    }
  }
  return out;
}

AdvSet attack(const ParamSet& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  return attack(std::span(&model, 1), x, labels, cfg);
}

std::vector<std::uint8_t> encode_images(const Tensor& images) {
  if (images.rank() != 4) throw DimensionError("image batches are (N,C,H,W)");
  for (std::size_t a = 1; a < 4; ++a)
    if (images.dim(a) > 255) throw DimensionError("image dims must fit in one byte");
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(images.dim(0)));
  w.u8(static_cast<std::uint8_t>(images.dim(1)));
  w.u8(static_cast<std::uint8_t>(images.dim(2)));
  w.u8(static_cast<std::uint8_t>(images.dim(3)));
  w.u8(0);
  for (double v : images.values()) w.f64(v);
  return w.take();
}

Tensor decode_images(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  const std::size_t n = r.u32(), c = r.u8(), h = r.u8(), w = r.u8();
  if (r.u8() != 0) throw FormatError("image header reserved byte must be zero");
  std::vector<double> values(n * c * h * w);
  for (double& v : values) v = r.f64();
  if (!r.at_end()) throw FormatError("trailing bytes after image payload");
  return Tensor({n, c, h, w}, std::move(values));
}

void save_advset(const AdvSet& set, const AttackConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir / "clean.bin", encode_images(set.clean));
  io::write_file_atomic(dir / "adv.bin", encode_images(set.adv));
  nlohmann::ordered_json meta;
  meta["config"] = nlohmann::ordered_json::parse(cfg.json());
  meta["labels"] = set.labels;
  meta["targets"] = set.targets;
  meta["fooled"] = set.fooled;
  meta["zero_grad_steps"] = set.zero_grad_steps;
  io::write_text_atomic(dir / "meta.json", meta.dump(1) + "\n");
}

AdvSet load_advset(const std::filesystem::path& dir) {
  AdvSet set;
  set.clean = decode_images(io::read_file(dir / "clean.bin"));
  set.adv = decode_images(io::read_file(dir / "adv.bin"));
  json meta;
  try {
    meta = json::parse(io::read_text(dir / "meta.json"));
    set.labels = meta.at("labels").get<std::vector<int>>();
    set.targets = meta.at("targets").get<std::vector<int>>();
    set.fooled = meta.at("fooled").get<std::vector<std::uint8_t>>();
    set.zero_grad_steps = meta.at("zero_grad_steps").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/meta.json: " + e.what());
  }
  if (set.clean.shape() != set.adv.shape() || set.labels.size() != set.clean.dim(0) ||
      set.fooled.size() != set.labels.size())
    throw FormatError(dir.string() + ": advset files disagree on sample count");
  return set;
}

}  // namespace tlab

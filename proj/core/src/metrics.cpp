#include "tlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tlab/error.hpp"
#include "tlab/rng.hpp"

namespace tlab {

namespace {

constexpr double kFlat = 1e-14;
constexpr std::size_t kChunk = 32;

bool converged(double lambda, double prev, double tol) {
  return std::abs(lambda - prev) < tol * std::max(1.0, std::abs(lambda));
}

ScalarFn ce_sum_loss(const ParamSet& model, const Tensor& onehot) {
  return [&model, &onehot](Tape& tape, Var x) {
    auto pv = bind(tape, model, false);
    return softmax_cross_entropy(forward(model.arch, pv, x), tape.constant(onehot), Reduction::Sum);
  };
}

Tensor image_rows(const Tensor& images, std::span<const std::size_t> idx) { return gather_rows(images, idx); }

std::vector<int> label_rows(std::span<const int> labels, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels[i]);
  return out;
}

double log_sum_exp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

// Per-row cross-entropy at the label and the smallest cross-entropy over the wrong classes.
struct RowLosses {
  std::vector<double> at_label, min_wrong;
};

RowLosses row_losses(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  RowLosses out;
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> row(logits.data() + i * c, c);
    const double lse = log_sum_exp(row);
    double best_wrong = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k)
      if (static_cast<int>(k) != labels[i]) best_wrong = std::max(best_wrong, row[k]);
    out.at_label.push_back(lse - row[labels[i]]);
    out.min_wrong.push_back(lse - best_wrong);
  }
  return out;
}

std::vector<double> grad_row_norms(const Tensor& g) {
  const std::size_t n = g.dim(0), d = g.size() / n;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += g[i * d + k] * g[i * d + k];
    out[i] = std::sqrt(s);
  }
  return out;
}

void check_labels(const Tensor& x, std::span<const int> y) {
  if (x.rank() < 1 || x.dim(0) != y.size())
    throw DimensionError("expected one label per row, got " + std::to_string(y.size()) + " for " +
                         shape_str(x.shape()));
  for (int v : y)
    if (v < 0 || v >= static_cast<int>(kNumClasses)) throw ValidationError("label out of range");
}

}  // namespace

void PowerConfig::validate() const {
  if (max_iters < 1) throw ValidationError("power iteration needs max_iters >= 1");
  if (!(tol > 0.0) || !std::isfinite(tol)) throw DomainError("power iteration tol must be > 0");
}

double power_iteration(const std::function<Tensor(const Tensor&)>& apply, Tensor v, const PowerConfig& cfg) {
  cfg.validate();
  const double n0 = l2_norm(v);
  if (!(n0 > 0.0)) throw ValidationError("power iteration start vector is zero");
  for (auto& e : v.values()) e /= n0;
  double lambda = 0.0, prev = 0.0;
  for (int k = 0; k < cfg.max_iters; ++k) {
    Tensor w = apply(v);
    const double nw = l2_norm(w);
    if (nw < kFlat) return 0.0;
    lambda = dot(v, w);
    if (k > 0 && converged(lambda, prev, cfg.tol)) break;
    prev = lambda;
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / nw;
  }
  return std::abs(lambda);
}

std::vector<double> batched_power_iteration(const std::function<Tensor(const Tensor&)>& apply, Tensor v,
                                            const PowerConfig& cfg) {
  cfg.validate();
  const std::size_t n = v.dim(0), d = v.size() / n;
  auto row = [d](Tensor& t, std::size_t i) { return std::span<double>(t.data() + i * d, d); };
  for (std::size_t i = 0; i < n; ++i) {
    auto r = row(v, i);
    double s = 0.0;
    for (double e : r) s += e * e;
    if (!(s > 0.0)) throw ValidationError("power iteration start vector is zero");
    for (double& e : r) e /= std::sqrt(s);
  }
  std::vector<double> lambda(n, 0.0), prev(n, 0.0);
  std::vector<char> done(n, 0);
  std::size_t remaining = n;
  for (int k = 0; k < cfg.max_iters && remaining > 0; ++k) {
    Tensor w = apply(v);
    for (std::size_t i = 0; i < n; ++i) {
      if (done[i]) continue;
      auto vr = row(v, i), wr = row(w, i);
      double nw = 0.0, l = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        nw += wr[j] * wr[j];
        l += vr[j] * wr[j];
      }
      nw = std::sqrt(nw);
      if (nw < kFlat) {
        lambda[i] = 0.0;
        done[i] = 1;
        --remaining;
        continue;
      }
      lambda[i] = l;
      if (k > 0 && converged(l, prev[i], cfg.tol)) {
        done[i] = 1;
        --remaining;
        continue;
      }
      prev[i] = l;
      for (std::size_t j = 0; j < d; ++j) vr[j] = wr[j] / nw;
    }
  }
  for (double& l : lambda) l = std::abs(l);
  return lambda;
}

Tensor power_start(std::size_t dim, std::uint64_t seed, std::uint64_t index) {
  Rng rng = Rng::substream(seed, stream::kPower, index);
  std::vector<double> v(dim);
  double s = 0.0;
  for (double& e : v) {
    e = rng.normal();
    s += e * e;
  }
  for (double& e : v) e /= std::sqrt(s);
  return Tensor::unchecked({dim}, std::move(v));
}

std::vector<double> input_hessian_dominant_eigs(const ParamSet& model, const Tensor& x, std::span<const int> y,
                                                const PowerConfig& cfg, std::uint64_t seed,
                                                std::size_t first_index) {
  check_labels(x, y);
  const std::size_t n = x.dim(0), d = x.size() / n;
  const Tensor onehot = one_hot(y);
  HessianOperator h(ce_sum_loss(model, onehot), x);
  std::vector<double> v0(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor s = power_start(d, seed, first_index + i);
    std::copy(s.data(), s.data() + d, v0.begin() + i * d);
  }
  auto apply = [&](const Tensor& v) { return h.apply(v.reshaped(x.shape())).reshaped({n, d}); };
  return batched_power_iteration(apply, Tensor::unchecked({n, d}, std::move(v0)), cfg);
}

double input_hessian_dominant_eig(const ParamSet& model, const Tensor& x, int y, const PowerConfig& cfg,
                                  std::uint64_t seed) {
  if (x.rank() < 1 || x.dim(0) != 1) throw DimensionError("expected a single sample, got " + shape_str(x.shape()));
  const int labels[] = {y};
  return input_hessian_dominant_eigs(model, x, labels, cfg, seed, 0)[0];
}

std::vector<std::size_t> sample_indices(std::size_t total, std::size_t n, std::uint64_t seed) {
  if (n > total)
    throw ValidationError("cannot sample " + std::to_string(n) + " of " + std::to_string(total) + " items");
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng::substream(seed, stream::kSample);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(total - i)]);
  idx.resize(n);
  return idx;
}

SmoothnessEstimate summarize_smoothness(std::vector<double> values, const PowerConfig& power) {
  if (values.empty()) throw ValidationError("smoothness needs at least one sample");
  SmoothnessEstimate s;
  s.n_samples = values.size();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.max = *std::max_element(values.begin(), values.end());
  s.values = std::move(values);
  s.power = power;
  return s;
}

SmoothnessEstimate model_smoothness(const ParamSet& model, const Dataset& data, std::size_t n_samples,
                                    std::uint64_t seed, const PowerConfig& cfg) {
  const auto idx = sample_indices(data.size(), n_samples, seed);
  std::vector<double> values;
  values.reserve(idx.size());
  for (std::size_t b = 0; b < idx.size(); b += kChunk) {
    std::span<const std::size_t> part(idx.data() + b, std::min(kChunk, idx.size() - b));
    auto eigs = input_hessian_dominant_eigs(model, image_rows(data.images, part), label_rows(data.labels, part), cfg,
                                            seed, b);
    values.insert(values.end(), eigs.begin(), eigs.end());
  }
  return summarize_smoothness(std::move(values), cfg);
}

Tensor input_gradients(const ParamSet& model, const Tensor& x, std::span<const int> y) {
  check_labels(x, y);
  const std::size_t n = x.dim(0);
  const Tensor onehot = one_hot(y);
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var loss = ce_sum_loss(model, onehot)(tape, xv);
  return grad_value(loss, xv).reshaped({n, x.size() / n});
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na < kFlat || nb < kFlat) throw NumericError("similarity undefined for a vanishing gradient");
  return std::clamp(ab / (na * nb), -1.0, 1.0);
}

double gradient_similarity(const ParamSet& f, const ParamSet& g, const Tensor& x, int y) {
  if (x.rank() < 1 || x.dim(0) != 1) throw DimensionError("expected a single sample, got " + shape_str(x.shape()));
  const int labels[] = {y};
  return cosine_similarity(input_gradients(f, x, labels).values(), input_gradients(g, x, labels).values());
}

SimilarityEstimate similarity_estimate(const ParamSet& f, const ParamSet& g, const Dataset& data,
                                       std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw ValidationError("similarity needs at least one sample");
  const auto idx = sample_indices(data.size(), n_samples, seed);
  const Tensor x = image_rows(data.images, idx);
  const auto y = label_rows(data.labels, idx);
  const Tensor gf = input_gradients(f, x, y), gg = input_gradients(g, x, y);
  const std::size_t d = gf.dim(1);
  SimilarityEstimate s;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    try {
      s.values.push_back(cosine_similarity({gf.data() + i * d, d}, {gg.data() + i * d, d}));
    } catch (const NumericError&) {
      ++s.skipped;
    }
  }
  if (s.values.empty()) throw NumericError("similarity undefined on every sample");
  s.n_samples = s.values.size();
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / static_cast<double>(s.n_samples);
  s.min = *std::min_element(s.values.begin(), s.values.end());
  return s;
}

bool transfer_indicator(int y, int f_clean, int g_clean, int f_adv, int g_adv) {
  return f_clean == y && g_clean == y && f_adv != y && g_adv != y;
}

bool transfer_indicator_targeted(int y, int target, int f_clean, int g_clean, int f_adv, int g_adv) {
  return f_clean == y && g_clean == y && f_adv == target && g_adv == target;
}

Predictions predictions(const ParamSet& f, const ParamSet& g, const AdvSet& set) {
  return {predict(f, set.clean), predict(g, set.clean), predict(f, set.adv), predict(g, set.adv)};
}

TransferStats transfer_stats(std::span<const int> labels, std::span<const int> targets, const Predictions& p) {
  const std::size_t n = labels.size();
  if (n == 0) throw ValidationError("transfer rates of an empty set");
  if (p.f_clean.size() != n || p.g_clean.size() != n || p.f_adv.size() != n || p.g_adv.size() != n ||
      (!targets.empty() && targets.size() != n))
    throw DimensionError("prediction and label counts differ");
  std::size_t u = 0, t = 0, ef = 0, eg = 0, fooled = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    u += transfer_indicator(y, p.f_clean[i], p.g_clean[i], p.f_adv[i], p.g_adv[i]);
    if (!targets.empty()) t += transfer_indicator_targeted(y, targets[i], p.f_clean[i], p.g_clean[i], p.f_adv[i], p.g_adv[i]);
    ef += p.f_clean[i] != y;
    eg += p.g_clean[i] != y;
    fooled += p.f_adv[i] != y;
  }
  const double dn = static_cast<double>(n);
  TransferStats s;
  s.n = n;
  s.asr_untargeted = static_cast<double>(u) / dn;
  if (!targets.empty()) s.asr_targeted = static_cast<double>(t) / dn;
  s.gamma_f = static_cast<double>(ef) / dn;
  s.gamma_g = static_cast<double>(eg) / dn;
  s.fool_prob = static_cast<double>(fooled) / dn;
  return s;
}

TransferStats asr(const ParamSet& f, const ParamSet& g, const AdvSet& set) {
  return transfer_stats(set.labels, set.targets, predictions(f, g, set));
}

double bound_term(double margin_loss, double clean_loss, double sigma, double eps, double grad_norm, double sign) {
  if (!(grad_norm >= kFlat)) throw NumericError("bound term undefined for a vanishing gradient");
  return (margin_loss - clean_loss + sign * sigma * eps * eps / 2.0) / grad_norm;
}

BoundTerms bound_terms(const ParamSet& f, const ParamSet& g, const AdvSet& set, double sigma_f_max,
                       double sigma_g_max, double eps) {
  if (set.size() == 0) throw ValidationError("bound terms of an empty set");
  const auto lf_clean = row_losses(forward(f, set.clean), set.labels);
  const auto lg_clean = row_losses(forward(g, set.clean), set.labels);
  const auto lf_adv = row_losses(forward(f, set.adv), set.labels);
  const auto lg_adv = row_losses(forward(g, set.adv), set.labels);
  const auto nf = grad_row_norms(input_gradients(f, set.clean, set.labels));
  const auto ng = grad_row_norms(input_gradients(g, set.clean, set.labels));
  BoundTerms out;
  out.c_f = std::numeric_limits<double>::infinity();
  out.c_g = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (nf[i] < kFlat || ng[i] < kFlat) {
      ++out.skipped;
      continue;
    }
    out.c_f = std::min(out.c_f, bound_term(lf_adv.min_wrong[i], lf_clean.at_label[i], sigma_f_max, eps, nf[i], -1.0));
    out.c_g = std::max(out.c_g, bound_term(lg_adv.min_wrong[i], lg_clean.at_label[i], sigma_g_max, eps, ng[i], 1.0));
    ++out.used;
  }
  if (out.used == 0) throw NumericError("bound terms undefined on every sample");
  return out;
}

double max_l2_perturbation(const AdvSet& set) {
  Tensor delta = set.adv;
  for (std::size_t k = 0; k < delta.size(); ++k) delta[k] -= set.clean[k];
  const auto norms = row_norms(delta, Norm::L2);
  return norms.empty() ? 0.0 : *std::max_element(norms.begin(), norms.end());
}

double transfer_lower_bound(double alpha, double gamma_f, double gamma_g, double c_f, double c_g, double s_inf,
                            double eps) {
  for (double v : {alpha, gamma_f, gamma_g, c_f, c_g, s_inf, eps})
    if (!std::isfinite(v)) throw DomainError("transfer bound arguments must be finite");
  if (!(eps > c_g)) throw DomainError("transfer bound needs eps > c_g");
  if (s_inf < -1.0 || s_inf > 1.0) throw DomainError("similarity infimum must be in [-1, 1]");
  const double denom = eps - c_g;
  return (1.0 - alpha) - (gamma_f + gamma_g) - (eps * (1.0 + alpha) - c_f * (1.0 - alpha)) / denom -
         (eps * (1.0 - alpha) / denom) * std::sqrt(2.0 - 2.0 * s_inf);
}

bool BoundReport::sound() const {
  if (!bound || n == 0) return true;
  return *bound <= empirical_rate + 2.0 / std::sqrt(static_cast<double>(n));
}

double mean_input_jacobian_norm(const ParamSet& model, const Tensor& x) {
  const std::size_t n = x.dim(0), d = x.size() / n;
  Tape tape;
  Var xv = tape.leaf(x, true);
  auto pv = bind(tape, model, false);
  Var logits = forward(model.arch, pv, xv);
  std::vector<double> sq(n, 0.0);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    Tensor e({n, kNumClasses});
    for (std::size_t i = 0; i < n; ++i) e[i * kNumClasses + c] = 1.0;
    Tensor g = grad_value(dot(logits, tape.constant(std::move(e))), xv);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) sq[i] += g[i * d + k] * g[i * d + k];
  }
  double total = 0.0;
  for (double s : sq) total += std::sqrt(s);
  return total / static_cast<double>(n);
}

double mean_input_gradient_norm(const ParamSet& model, const Tensor& x, std::span<const int> y) {
  const auto norms = grad_row_norms(input_gradients(model, x, y));
  return std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(norms.size());
}

LemmaCheck check_cosine_lemma(std::size_t trials, std::uint64_t seed) {
  Rng rng(seed);
  LemmaCheck out;
  out.trials = trials;
  auto unit = [&rng](std::size_t d) {
    std::vector<double> v(d);
    double s = 0.0;
    for (double& e : v) {
      e = rng.normal();
      s += e * e;
    }
    for (double& e : v) e /= std::sqrt(s);
    return v;
  };
  auto dotv = [](const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  };
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = 2 + rng.below(9);
    const auto x = unit(d), y = unit(d);
    const double eps = rng.uniform(0.01, 2.0);
    auto delta = unit(d);
    const double r = eps * rng.uniform();
    for (double& e : delta) e *= r;
    const double slack = eps * std::sqrt(std::max(0.0, 2.0 - 2.0 * dotv(x, y)));
    const double c = dotv(delta, y) + slack + rng.uniform(-1.0, 1.0);
    if (dotv(delta, y) < c - slack) {
      ++out.premise_held;
      if (!(dotv(delta, x) < c)) ++out.counterexamples;
    }
  }
  return out;
}

LemmaCheck check_union_lemma(std::size_t trials, std::uint64_t seed) {
  Rng rng(seed);
  LemmaCheck out;
  out.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t m = 2 + rng.below(19);
    std::vector<double> p(m);
    double total = 0.0;
    for (double& e : p) total += (e = rng.uniform());
    double pa = 0.0, pb = 0.0, neither = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      const double w = p[k] / total;
      const bool a = rng.bernoulli(0.5), b = rng.bernoulli(0.5);
      pa += a ? w : 0.0;
      pb += b ? w : 0.0;
      neither += (!a && !b) ? w : 0.0;
    }
    ++out.premise_held;
    if (neither < 1.0 - pa - pb - 1e-12) ++out.counterexamples;
  }
  return out;
}

}  // namespace tlab

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tlab/attacks.hpp"
#include "tlab/data.hpp"
#include "tlab/model.hpp"

namespace tlab {

struct PowerConfig {
  int max_iters = 50;
  double tol = 1e-4;
  void validate() const;
};

/// Power iteration on a symmetric operator given by products. Stops when successive Rayleigh
/// quotients differ by less than tol * max(1, |lambda|); returns |lambda|, or 0 when the product
/// vanishes (norm < 1e-14).
double power_iteration(const std::function<Tensor(const Tensor&)>& apply, Tensor v0, const PowerConfig& cfg);

/// Power iteration on a block-diagonal operator, one independent block per row of v0 (N, d).
/// Rows stop updating once they converge; returns |lambda| per row.
std::vector<double> batched_power_iteration(const std::function<Tensor(const Tensor&)>& apply, Tensor v0,
                                            const PowerConfig& cfg);

/// Seeded random unit start vector for sample `index`.
Tensor power_start(std::size_t dim, std::uint64_t seed, std::uint64_t index);

/// Dominant |eigenvalue| of the input Hessian of the cross-entropy loss at one sample x (1, 1, 16, 16).
double input_hessian_dominant_eig(const ParamSet& model, const Tensor& x, int y, const PowerConfig& cfg = {},
                                  std::uint64_t seed = 0);
/// Per-row variant over a batch; row i uses the start vector of index first_index + i.
std::vector<double> input_hessian_dominant_eigs(const ParamSet& model, const Tensor& x, std::span<const int> y,
                                                const PowerConfig& cfg = {}, std::uint64_t seed = 0,
                                                std::size_t first_index = 0);

/// n distinct indices of [0, total), seeded.
std::vector<std::size_t> sample_indices(std::size_t total, std::size_t n, std::uint64_t seed);

struct SmoothnessEstimate {
  std::vector<double> values;
  double mean = 0.0;
  double max = 0.0;
  std::size_t n_samples = 0;
  PowerConfig power;
};

SmoothnessEstimate summarize_smoothness(std::vector<double> values, const PowerConfig& power = {});
SmoothnessEstimate model_smoothness(const ParamSet& model, const Dataset& data, std::size_t n_samples = 200,
                                    std::uint64_t seed = 0, const PowerConfig& cfg = {});

/// Input gradients of the per-sample cross-entropy, (N, 256).
Tensor input_gradients(const ParamSet& model, const Tensor& x, std::span<const int> y);

/// Cosine of two vectors; NumericError when either norm is below 1e-14.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double gradient_similarity(const ParamSet& f, const ParamSet& g, const Tensor& x, int y);

struct SimilarityEstimate {
  std::vector<double> values;
  double mean = 0.0;
  double min = 0.0;
  std::size_t n_samples = 0;
  std::size_t skipped = 0;  // samples with a vanishing gradient
};

SimilarityEstimate similarity_estimate(const ParamSet& f, const ParamSet& g, const Dataset& data,
                                       std::size_t n_samples = 200, std::uint64_t seed = 0);

/// F(x)=G(x)=y, F(x_adv)!=y and G(x_adv)!=y.
bool transfer_indicator(int y, int f_clean, int g_clean, int f_adv, int g_adv);
/// Clean-correct preconditions and both models predicting the target on x_adv.
bool transfer_indicator_targeted(int y, int target, int f_clean, int g_clean, int f_adv, int g_adv);

struct TransferStats {
  std::size_t n = 0;
  double asr_untargeted = 0.0;
  std::optional<double> asr_targeted;  // set when the set carries targets
  double gamma_f = 0.0;                // clean error rates
  double gamma_g = 0.0;
  double fool_prob = 0.0;              // mean[F(x_adv) != y]
};

/// Predictions of both models on the clean and adversarial images of a set.
struct Predictions {
  std::vector<int> f_clean, g_clean, f_adv, g_adv;
};

Predictions predictions(const ParamSet& f, const ParamSet& g, const AdvSet& set);
TransferStats transfer_stats(std::span<const int> labels, std::span<const int> targets, const Predictions& p);
TransferStats asr(const ParamSet& f, const ParamSet& g, const AdvSet& set);

/// One sample's term of c_F (sign = -1) or c_G (sign = +1):
/// (margin_loss - clean_loss + sign * sigma * eps^2 / 2) / grad_norm.
double bound_term(double margin_loss, double clean_loss, double sigma, double eps, double grad_norm, double sign);

struct BoundTerms {
  double c_f = 0.0;
  double c_g = 0.0;
  std::size_t used = 0;      // samples entering the min / max
  std::size_t skipped = 0;   // samples with a vanishing gradient
};

/// c_F = min over samples of the F term, c_G = max of the G term. The adversarial loss is
/// minimized over the nine wrong classes at x_adv.
BoundTerms bound_terms(const ParamSet& f, const ParamSet& g, const AdvSet& set, double sigma_f_max,
                       double sigma_g_max, double eps);

/// L2 size of the largest perturbation in a set.
double max_l2_perturbation(const AdvSet& set);

/// Lower bound on the transfer rate; DomainError when eps <= c_g or s_inf is outside [-1, 1].
double transfer_lower_bound(double alpha, double gamma_f, double gamma_g, double c_f, double c_g, double s_inf,
                            double eps);

struct BoundReport {
  double alpha = 0.0, gamma_f = 0.0, gamma_g = 0.0;
  double c_f = 0.0, c_g = 0.0, s_inf = 0.0, eps = 0.0;
  std::optional<double> bound;  // unset when eps <= c_g
  double empirical_rate = 0.0;
  std::size_t n = 0;

  /// bound <= empirical rate + 2 / sqrt(n); vacuously true without a bound.
  bool sound() const;
};

/// Mean per-sample Frobenius norm of the input Jacobian of the logits.
double mean_input_jacobian_norm(const ParamSet& model, const Tensor& x);
/// Mean per-sample L2 norm of the input gradient of the cross-entropy loss.
double mean_input_gradient_norm(const ParamSet& model, const Tensor& x, std::span<const int> y);

struct LemmaCheck {
  std::size_t trials = 0;
  std::size_t premise_held = 0;
  std::size_t counterexamples = 0;
};

/// Random unit x, y, ||delta|| <= eps and threshold c: whenever
/// delta.y < c - eps * sqrt(2 - 2 cos(x, y)), delta.x < c must hold.
LemmaCheck check_cosine_lemma(std::size_t trials, std::uint64_t seed);
/// Random events A, B on a finite space: Pr(not A and not B) >= 1 - Pr(A) - Pr(B).
LemmaCheck check_union_lemma(std::size_t trials, std::uint64_t seed);

}  // namespace tlab

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <set>

#include "fd_oracle.hpp"
#include "tlab/data.hpp"
#include "tlab/error.hpp"
#include "tlab/metrics.hpp"
#include "tlab/training.hpp"

using namespace tlab;

namespace {

struct Fixture {
  ParamSet model;
  ParamSet other;
  Dataset test;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    auto [train_set, test_set] = glyphset_generate(21, 1000, 100);
    TrainConfig c;
    c.epochs = 4;
    c.warmup_epochs = 1;
    ParamSet a = train(Arch::MlpS, c, train_set).params;
    c.seed = 1;
    ParamSet b = train(Arch::MlpS, c, train_set).params;
    return Fixture{std::move(a), std::move(b), test_set};
  }();
  return f;
}

std::function<Tensor(const Tensor&)> matrix_operator(const Eigen::MatrixXd& a) {
  return [a](const Tensor& v) {
    Eigen::VectorXd w = a * Eigen::Map<const Eigen::VectorXd>(v.data(), a.rows());
    return Tensor::vector(std::vector<double>(w.data(), w.data() + w.size()));
  };
}

double top_abs_eig(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

PowerConfig tight() { return {20000, 1e-13}; }

}  // namespace

TEST(PowerIteration, DiagonalQuadratic) {
  Eigen::MatrixXd a(2, 2);
  a << 3, 0, 0, 1;
  EXPECT_NEAR(power_iteration(matrix_operator(a), power_start(2, 0, 0), {}), 3.0, 1e-4 * 3);
}

TEST(PowerIteration, CoupledQuadraticThroughHessianOperator) {
  Eigen::MatrixXd a(2, 2);
  a << 2, 1, 1, 2;
  ASSERT_NEAR(top_abs_eig(a), 3.0, 1e-12);
  const Tensor am = Tensor::matrix({{2, 1}, {1, 2}});
  ScalarFn quad = [&](Tape& t, Var x) { return scale(dot(x, matmul(t.constant(am), x)), 0.5); };
  HessianOperator h(quad, Tensor::matrix({{0.3}, {-0.7}}));
  auto apply = [&](const Tensor& v) { return h.apply(v.reshaped({2, 1})).reshaped({2}); };
  EXPECT_NEAR(power_iteration(apply, power_start(2, 1, 0), {}), 3.0, 3e-4);
  EXPECT_NEAR(power_iteration(apply, power_start(2, 1, 0), tight()), 3.0, 1e-9);
}

TEST(PowerIteration, MatchesEigendecompositionOnRandomQuadratics) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int d = 2 + trial % 5;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(d, d);
    std::normal_distribution<double> g;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) m(i, j) = g(rng);
    Eigen::MatrixXd a = (m + m.transpose()) / 2;
    const double got = power_iteration(matrix_operator(a), power_start(d, 7, trial), tight());
    EXPECT_NEAR(got, top_abs_eig(a), 1e-6) << "trial " << trial;
  }
}

TEST(PowerIteration, NegativeDominantEigenvalueReportedByMagnitude) {
  Eigen::MatrixXd a(3, 3);
  a << -5, 0, 0, 0, 2, 0, 0, 0, 1;
  EXPECT_NEAR(power_iteration(matrix_operator(a), power_start(3, 2, 0), tight()), 5.0, 1e-9);
}

TEST(PowerIteration, InvalidConfig) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_THROW(power_iteration(matrix_operator(a), power_start(2, 0, 0), {0, 1e-4}), ValidationError);
  EXPECT_THROW(power_iteration(matrix_operator(a), power_start(2, 0, 0), {10, 0.0}), DomainError);
  EXPECT_THROW(power_iteration(matrix_operator(a), Tensor::vector({0.0, 0.0}), {}), ValidationError);
}

TEST(InputHessian, FlatModelGivesZero) {
  ParamSet m = fixture().model;
  m.params[m.size() - 2].tensor = Tensor::zeros(m.params[m.size() - 2].tensor.shape());
  m.params[m.size() - 1].tensor = Tensor::zeros(m.params[m.size() - 1].tensor.shape());
  EXPECT_EQ(input_hessian_dominant_eig(m, fixture().test.images.rows(0, 1), fixture().test.labels[0]), 0.0);
}

TEST(InputHessian, MatchesFiniteDifferenceHessianEigendecomposition) {
  const auto& f = fixture();
  for (std::size_t i : {0u, 7u}) {
    const Tensor x = f.test.images.rows(i, 1);
    const int y[] = {f.test.labels[i]};
    const double h = 1e-5;
    Eigen::MatrixXd hess(256, 256);
    Tensor probe = x;
    for (std::size_t j = 0; j < 256; ++j) {
      probe[j] = x[j] + h;
      const Tensor up = input_gradients(f.model, probe, y);
      probe[j] = x[j] - h;
      const Tensor down = input_gradients(f.model, probe, y);
      probe[j] = x[j];
      for (std::size_t k = 0; k < 256; ++k) hess(k, j) = (up[k] - down[k]) / (2 * h);
    }
    const Eigen::MatrixXd sym = (hess + hess.transpose()) / 2;
    const double oracle = top_abs_eig(sym);
    const double got = input_hessian_dominant_eig(f.model, x, y[0], tight(), 3);
    EXPECT_NEAR(got, oracle, 1e-5 * std::max(1.0, oracle)) << "sample " << i;
    EXPECT_GT(oracle, 0.0);
  }
}

TEST(InputHessian, BatchedRowsMatchSingleSamples) {
  const auto& f = fixture();
  const Tensor x = f.test.images.rows(0, 6);
  std::vector<int> y(f.test.labels.begin(), f.test.labels.begin() + 6);
  const auto batched = input_hessian_dominant_eigs(f.model, x, y, {}, 9, 0);
  for (std::size_t i = 0; i < 6; ++i) {
    const double one =
        input_hessian_dominant_eigs(f.model, f.test.images.rows(i, 1), std::span(&y[i], 1), {}, 9, i)[0];
    EXPECT_NEAR(batched[i], one, 1e-12 * std::max(1.0, one));
  }
}

TEST(Smoothness, Aggregation) {
  auto s = summarize_smoothness({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.max, 3.0);
  EXPECT_EQ(s.n_samples, 3u);
  EXPECT_THROW(summarize_smoothness({}), ValidationError);
}

TEST(Smoothness, DuplicateSamplesGiveTheSingleSampleValue) {
  const auto& f = fixture();
  std::vector<std::size_t> same(12, 4);
  Dataset dup = f.test.subset(same);
  const PowerConfig cfg = tight();
  const double one = input_hessian_dominant_eig(f.model, f.test.images.rows(4, 1), f.test.labels[4], cfg);
  auto s = model_smoothness(f.model, dup, 12, 0, cfg);
  EXPECT_NEAR(s.mean, one, 1e-8 * one);
  EXPECT_NEAR(s.max, one, 1e-8 * one);
  EXPECT_LE(s.mean, s.max);
}

TEST(Smoothness, SampleIndicesAreDistinctAndSeeded) {
  auto a = sample_indices(100, 40, 3);
  std::set<std::size_t> uniq(a.begin(), a.end());
  EXPECT_EQ(uniq.size(), 40u);
  EXPECT_EQ(a, sample_indices(100, 40, 3));
  EXPECT_NE(a, sample_indices(100, 40, 4));
  EXPECT_THROW(sample_indices(10, 11, 0), ValidationError);
}

TEST(Similarity, CosineArithmetic) {
  const double a[] = {1, 0}, b[] = {1, 1}, c[] = {-1, -1}, z[] = {0, 0};
  EXPECT_NEAR(cosine_similarity(a, b), 0.70711, 1e-5);
  EXPECT_DOUBLE_EQ(cosine_similarity(b, c), -1.0);
  EXPECT_THROW(cosine_similarity(a, z), NumericError);
}

TEST(Similarity, SameModelIsOneAndNegatedGradientIsMinusOne) {
  const auto& f = fixture();
  EXPECT_NEAR(gradient_similarity(f.model, f.model, f.test.images.rows(0, 1), f.test.labels[0]), 1.0, 1e-12);
  const int y[] = {f.test.labels[0]};
  Tensor g = input_gradients(f.model, f.test.images.rows(0, 1), y);
  Tensor neg = g;
  for (auto& v : neg.values()) v = -v;
  EXPECT_NEAR(cosine_similarity(g.values(), neg.values()), -1.0, 1e-12);
}

TEST(Similarity, BoundedAndSymmetric) {
  const auto& f = fixture();
  for (std::size_t i = 0; i < 10; ++i) {
    const Tensor x = f.test.images.rows(i, 1);
    const double ab = gradient_similarity(f.model, f.other, x, f.test.labels[i]);
    const double ba = gradient_similarity(f.other, f.model, x, f.test.labels[i]);
    EXPECT_DOUBLE_EQ(ab, ba);
    EXPECT_GE(ab, -1.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(Similarity, Estimate) {
  const auto& f = fixture();
  auto same = similarity_estimate(f.model, f.model, f.test, 30, 1);
  EXPECT_NEAR(same.mean, 1.0, 1e-12);
  EXPECT_NEAR(same.min, 1.0, 1e-12);
  auto one = similarity_estimate(f.model, f.other, f.test, 1, 1);
  EXPECT_DOUBLE_EQ(one.mean, one.min);
  auto cross = similarity_estimate(f.model, f.other, f.test, 50, 1);
  EXPECT_LE(cross.min, cross.mean);
  EXPECT_EQ(cross.n_samples + cross.skipped, 50u);
}

TEST(Similarity, FlatModelIsUndefinedEverywhere) {
  ParamSet z = zeros_like(Arch::MlpS);
  EXPECT_THROW(similarity_estimate(z, fixture().model, fixture().test, 10, 0), NumericError);
}

TEST(Transfer, IndicatorConjunction) {
  EXPECT_TRUE(transfer_indicator(3, 3, 3, 1, 2));
  EXPECT_FALSE(transfer_indicator(3, 3, 4, 1, 2));
  EXPECT_FALSE(transfer_indicator(3, 4, 3, 1, 2));
  EXPECT_FALSE(transfer_indicator(3, 3, 3, 3, 2));
  EXPECT_FALSE(transfer_indicator(3, 3, 3, 1, 3));
  EXPECT_FALSE(transfer_indicator(3, 3, 3, 3, 3));
  EXPECT_TRUE(transfer_indicator_targeted(3, 5, 3, 3, 5, 5));
  EXPECT_FALSE(transfer_indicator_targeted(3, 5, 3, 3, 5, 4));
  EXPECT_FALSE(transfer_indicator_targeted(3, 5, 3, 2, 5, 5));
}

TEST(Transfer, CountingOnHandBuiltSet) {
  std::vector<int> y = {0, 1, 2, 3};
  Predictions p{{0, 1, 2, 3}, {0, 1, 2, 3}, {5, 1, 6, 3}, {7, 1, 8, 3}};
  auto s = transfer_stats(y, {}, p);
  EXPECT_DOUBLE_EQ(s.asr_untargeted, 0.5);
  EXPECT_FALSE(s.asr_targeted.has_value());
  EXPECT_DOUBLE_EQ(s.fool_prob, 0.5);
  EXPECT_DOUBLE_EQ(s.gamma_f, 0.0);

  p.g_clean[0] = 9;
  std::vector<int> t = {7, 2, 8, 4};
  auto st = transfer_stats(y, t, p);
  EXPECT_DOUBLE_EQ(st.asr_untargeted, 0.25);
  EXPECT_DOUBLE_EQ(*st.asr_targeted, 0.0);
  EXPECT_DOUBLE_EQ(st.gamma_g, 0.25);
  p.f_adv[2] = 8;
  EXPECT_DOUBLE_EQ(*transfer_stats(y, t, p).asr_targeted, 0.25);
  EXPECT_THROW(transfer_stats({}, {}, Predictions{}), ValidationError);
}

TEST(Transfer, ZeroBudgetSetHasNoTransfers) {
  const auto& f = fixture();
  AttackConfig c;
  c.eps = 0.0;
  c.steps = 2;
  AdvSet a = attack(f.model, f.test.images, f.test.labels, c);
  auto s = asr(f.model, f.other, a);
  EXPECT_EQ(s.asr_untargeted, 0.0);
  EXPECT_GT(s.gamma_f + s.gamma_g, -1.0);
  EXPECT_DOUBLE_EQ(s.fool_prob, s.gamma_f);
}

TEST(Bound, TermArithmetic) {
  EXPECT_NEAR(bound_term(0.5, 0.1, 2.0, 0.1, 2.0, -1.0), 0.195, 1e-15);
  EXPECT_NEAR(bound_term(0.5, 0.1, 2.0, 0.1, 2.0, 1.0), 0.205, 1e-15);
  EXPECT_THROW(bound_term(0.5, 0.1, 2.0, 0.1, 0.0, 1.0), NumericError);
}

TEST(Bound, SingleSampleAndCancellation) {
  const auto& f = fixture();
  AttackConfig c;
  c.eps = 0.0;
  c.steps = 1;
  AdvSet a = attack(f.model, f.test.images.rows(0, 1), std::span(f.test.labels.data(), 1), c);
  auto t = bound_terms(f.model, f.model, a, 0.0, 0.0, 0.0);
  EXPECT_EQ(t.used, 1u);
  EXPECT_NEAR(t.c_f, t.c_g, 1e-15);

  const Tensor logits = forward(f.model, a.clean);
  const int y = f.test.labels[0];
  double lse = 0.0, mx = -1e300, best_wrong = -1e300;
  for (int k = 0; k < 10; ++k) mx = std::max(mx, logits[k]);
  for (int k = 0; k < 10; ++k) lse += std::exp(logits[k] - mx);
  lse = mx + std::log(lse);
  for (int k = 0; k < 10; ++k)
    if (k != y) best_wrong = std::max(best_wrong, logits[k]);
  const int labels[] = {y};
  const double gnorm = l2_norm(input_gradients(f.model, a.clean, labels));
  EXPECT_NEAR(t.c_f, ((lse - best_wrong) - (lse - logits[y])) / gnorm, 1e-12);
}

TEST(Bound, TheoremExamples) {
  EXPECT_NEAR(transfer_lower_bound(0, 0, 0, 1.0, 0, 1.0, 1.0), 1.0, 1e-15);
  EXPECT_NEAR(transfer_lower_bound(0.1, 0.05, 0.05, 0.5, 0.2, 0.5, 1.0), -1.1375, 1e-12);
  double prev = -1e300;
  for (double s = -1.0; s <= 1.0; s += 0.1) {
    const double b = transfer_lower_bound(0.2, 0.1, 0.1, 0.3, 0.1, s, 0.5);
    EXPECT_GE(b, prev);
    prev = b;
  }
  EXPECT_THROW(transfer_lower_bound(0, 0, 0, 1, 1.0, 1, 1.0), DomainError);
  EXPECT_THROW(transfer_lower_bound(0, 0, 0, 1, 0, 1.5, 1.0), DomainError);
}

TEST(Bound, ReportSoundness) {
  BoundReport r;
  r.bound = 0.3;
  r.empirical_rate = 0.1;
  r.n = 100;
  EXPECT_TRUE(r.sound());
  r.bound = 0.31;
  EXPECT_FALSE(r.sound());
  r.bound.reset();
  EXPECT_TRUE(r.sound());
}

TEST(Lemmas, NoCounterexamples) {
  auto a = check_cosine_lemma(10000, 1);
  EXPECT_EQ(a.counterexamples, 0u);
  EXPECT_GT(a.premise_held, 2000u);
  auto b = check_union_lemma(10000, 2);
  EXPECT_EQ(b.counterexamples, 0u);
}

TEST(Jacobian, MeanFrobeniusNormMatchesFiniteDifferences) {
  const auto& f = fixture();
  const Tensor x = f.test.images.rows(0, 2);
  double total = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor xi = x.rows(i, 1);
    double sq = 0.0;
    for (std::size_t c = 0; c < 10; ++c) {
      auto logit = [&](const Tensor& p) { return forward(f.model, p)[c]; };
      Tensor g = tlab::testing::central_difference(logit, xi, 1e-6);
      for (double v : g.values()) sq += v * v;
    }
    total += std::sqrt(sq);
  }
  EXPECT_NEAR(mean_input_jacobian_norm(f.model, x), total / 2, 1e-6 * total);
  std::vector<int> y(f.test.labels.begin(), f.test.labels.begin() + 2);
  EXPECT_GT(mean_input_gradient_norm(f.model, x, y), 0.0);
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tlab/error.hpp"
#include "tlab/stats.hpp"

using namespace tlab;

TEST(Pearson, Examples) {
  const std::vector<double> x = {1, 2, 3};
  EXPECT_DOUBLE_EQ(pearson(x, std::vector<double>{2, 4, 6}), 1.0);
  EXPECT_DOUBLE_EQ(pearson(x, std::vector<double>{-1, -2, -3}), -1.0);
  EXPECT_NEAR(pearson(x, std::vector<double>{1, 2, 4}), 0.9819805060619657, 1e-15);
}

TEST(Pearson, AffineMapGivesItsSign) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  std::vector<double> x(40);
  for (auto& v : x) v = g(rng);
  for (double a : {-3.0, -0.1, 0.5, 7.0}) {
    std::vector<double> y;
    for (double v : x) y.push_back(a * v + 2.0);
    EXPECT_NEAR(pearson(x, y), a > 0 ? 1.0 : -1.0, 1e-12);
  }
}

TEST(Pearson, Errors) {
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), NumericError);
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ValidationError);
  EXPECT_THROW(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), DimensionError);
}

TEST(Spearman, RanksWithTies) {
  EXPECT_EQ(average_ranks(std::vector<double>{3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
  EXPECT_DOUBLE_EQ(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 4, 9, 100}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{4, 3, 2, 1}), -1.0);
}

TEST(Ols, ExactLinearResponse) {
  std::vector<double> a = {1, 2, 3, 4, 5, 6}, b = {0, 1, 0, 1, 1, 0}, y;
  for (std::size_t i = 0; i < a.size(); ++i) y.push_back(2 * a[i] - 3 * b[i] + 1);
  EXPECT_NEAR(ols_r2({a, b}, y), 1.0, 1e-9);
}

TEST(Ols, NoiseRegressorsExplainLittle) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<double> a(200), b(200), y(200);
  for (std::size_t i = 0; i < 200; ++i) {
    a[i] = g(rng);
    b[i] = g(rng);
    y[i] = g(rng);
  }
  const double r2 = ols_r2({a, b}, y);
  EXPECT_GE(r2, 0.0);
  EXPECT_LT(r2, 0.1);
}

TEST(Ols, AddingAColumnNeverLowersR2) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> cols(4, std::vector<double>(30));
    std::vector<double> y(30);
    for (std::size_t i = 0; i < 30; ++i) {
      for (auto& c : cols) c[i] = g(rng);
      y[i] = cols[0][i] + 0.5 * g(rng);
    }
    double prev = 0.0;
    for (std::size_t k = 1; k <= 4; ++k) {
      const double r2 = ols_r2({cols.begin(), cols.begin() + k}, y);
      EXPECT_GE(r2, prev - 1e-9);
      prev = r2;
    }
  }
}

TEST(Ols, Errors) {
  std::vector<double> a = {1, 2, 3, 4}, y = {1, 2, 3, 5};
  EXPECT_THROW(ols_r2({a, a, a}, y), ValidationError);
  EXPECT_THROW(ols_r2({a}, std::vector<double>{2, 2, 2, 2}), NumericError);
  EXPECT_THROW(ols_r2({{1, 2, 3}}, y), DimensionError);
}

TEST(Permutation, StrongAndAbsentCorrelation) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  std::vector<double> x(30), y(30), z(30);
  for (std::size_t i = 0; i < 30; ++i) {
    x[i] = g(rng);
    y[i] = x[i] + 0.3 * g(rng);
    z[i] = g(rng);
  }
  EXPECT_LT(permutation_p_value(x, y, 999, 1), 0.01);
  EXPECT_DOUBLE_EQ(permutation_p_value(x, y, 999, 1), permutation_p_value(x, y, 999, 1));
  const double pz = permutation_p_value(x, z, 999, 1);
  EXPECT_GT(pz, 0.0);
  EXPECT_LE(pz, 1.0);
  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  EXPECT_GT(permutation_p_value(x, neg, 199, 1), 0.99);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "fd_oracle.hpp"
#include "tlab/error.hpp"
#include "tlab/io.hpp"
#include "tlab/model.hpp"

using namespace tlab;
using tlab::testing::random_tensor;

namespace {
const Arch kArchs[] = {Arch::MlpS, Arch::MlpL, Arch::CnnS, Arch::CnnL};

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "tlab_model_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Tensor one_hot_row(std::size_t n, int label) {
  Tensor t({n, kNumClasses});
  for (std::size_t i = 0; i < n; ++i) t[i * kNumClasses + static_cast<std::size_t>(label)] = 1.0;
  return t;
}
}  // namespace

TEST(Model, GoldenParameterCounts) {
  EXPECT_EQ(parameter_count(Arch::MlpS), 17098u);
  EXPECT_EQ(parameter_count(Arch::MlpL), 41802u);
  EXPECT_EQ(parameter_count(Arch::CnnS), 33618u);
  EXPECT_EQ(parameter_count(Arch::CnnL), 265338u);
  for (Arch a : kArchs) EXPECT_EQ(init(a, 0).total_count(), parameter_count(a));
}

TEST(Model, ArchNamesRoundTrip) {
  for (Arch a : kArchs) EXPECT_EQ(parse_arch(arch_name(a)), a);
  EXPECT_THROW(parse_arch("resnet"), ValidationError);
}

TEST(Model, InitIsDeterministicAndSeedSensitive) {
  EXPECT_EQ(init(Arch::MlpS, 0).checksum(), init(Arch::MlpS, 0).checksum());
  EXPECT_NE(init(Arch::MlpS, 0).checksum(), init(Arch::MlpS, 1).checksum());
}

TEST(Model, BiasesStartAtZeroAndWeightsWithinKaimingBound) {
  for (Arch a : kArchs) {
    ParamSet p = init(a, 42);
    for (const auto& param : p.params) {
      if (param.name.ends_with(".bias")) {
        for (double v : param.tensor.values()) EXPECT_EQ(v, 0.0) << param.name;
      } else {
        const auto& s = param.tensor.shape();
        const double fan_in = s.size() == 2 ? static_cast<double>(s[0]) : static_cast<double>(s[1] * s[2] * s[3]);
        for (double v : param.tensor.values()) EXPECT_LE(std::abs(v), std::sqrt(6.0 / fan_in));
      }
    }
  }
}

TEST(Model, ZeroWeightsGiveZeroLogits) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 1, 16, 16}, rng, 0, 1);
  for (Arch a : kArchs) {
    Tensor logits = forward(zeros_like(a), x);
    EXPECT_EQ(logits.shape(), (Shape{3, 10}));
    for (double v : logits.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Model, BatchRowsMatchInputRows) {
  std::mt19937_64 rng(2);
  for (Arch a : kArchs) {
    for (std::size_t n : {1u, 5u}) {
      Tensor x = random_tensor({n, 1, 16, 16}, rng, 0, 1);
      EXPECT_EQ(forward(init(a, 3), x).dim(0), n);
    }
  }
  Tensor flat = random_tensor({4, 256}, rng, 0, 1);
  EXPECT_EQ(forward(init(Arch::MlpS, 0), flat).dim(0), 4u);
  EXPECT_THROW(forward(init(Arch::CnnS, 0), flat), DimensionError);
  EXPECT_THROW(forward(init(Arch::MlpS, 0), random_tensor({2, 100}, rng)), DimensionError);
}

TEST(Model, InputGradientOfLogitsMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (Arch a : kArchs) {
    ParamSet p = init(a, 5);
    Tensor x = random_tensor({1, 1, 16, 16}, rng, 0, 1);
    Tensor w = random_tensor({1, 10}, rng);
    Tape t;
    Var xv = t.leaf(x);
    auto pv = bind(t, p, false);
    Tensor g = grad_value(dot(forward(a, pv, xv), t.constant(w)), xv);
    auto f = [&](const Tensor& probe) { return tlab::dot(forward(p, probe), w); };
    // Sampled coordinates keep the runtime small for the conv nets.
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = rng() % x.size();
      const double fd = tlab::testing::central_difference_at(f, x, i, 1e-6);
      EXPECT_NEAR(g[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << arch_name(a) << " pixel " << i;
    }
  }
}

TEST(Model, ParameterGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (Arch a : kArchs) {
    ParamSet p = init(a, 7);
    Tensor x = random_tensor({4, 1, 16, 16}, rng, 0, 1);
    Tensor y = one_hot_row(4, 3);
    auto loss_of = [&](const ParamSet& ps) {
      Tape t;
      auto pv = bind(t, ps, false);
      return softmax_cross_entropy(forward(a, pv, t.constant(x)), t.constant(y)).value().item();
    };
    Tape t;
    auto pv = bind(t, p, true);
    auto grads = grad_values(softmax_cross_entropy(forward(a, pv, t.constant(x)), t.constant(y)), pv);
    for (int k = 0; k < 20; ++k) {
      const std::size_t which = rng() % p.size();
      const std::size_t i = rng() % p.params[which].tensor.size();
      ParamSet up = p, down = p;
      up.params[which].tensor[i] += 1e-6;
      down.params[which].tensor[i] -= 1e-6;
      const double fd = (loss_of(up) - loss_of(down)) / 2e-6;
      EXPECT_NEAR(grads[which][i], fd, 1e-4 * std::max(1.0, std::abs(fd)))
          << arch_name(a) << " " << p.params[which].name << "[" << i << "]";
    }
  }
}

TEST(Model, PredictArgmaxAndTieBreak) {
  EXPECT_EQ(argmax_rows(Tensor::matrix({{0.1, 0.9, 0, 0, 0, 0, 0, 0, 0, 0}})), std::vector<int>{1});
  EXPECT_EQ(argmax_rows(Tensor({1, 10})), std::vector<int>{0});
}

TEST(Model, PredictInvariantUnderRowShift) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = random_tensor({3, 10}, rng, -3, 3);
    Tensor shifted = z;
    for (std::size_t i = 0; i < 3; ++i) {
      const double c = std::uniform_real_distribution<double>(-100, 100)(rng);
      for (std::size_t j = 0; j < 10; ++j) shifted[i * 10 + j] += c;
    }
    EXPECT_EQ(argmax_rows(z), argmax_rows(shifted));
  }
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  for (Arch a : kArchs) {
    ParamSet p = init(a, 11);
    auto path = temp_path(std::string(arch_name(a)) + ".tlab");
    save(p, path);
    ParamSet q = load(path);
    EXPECT_EQ(p, q);
    EXPECT_EQ(p.checksum(), q.checksum());
  }
}

TEST(Checkpoint, HeaderLayout) {
  auto bytes = serialize(init(Arch::CnnS, 0));
  ASSERT_GE(bytes.size(), 13u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TLAB");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  EXPECT_EQ(bytes[8], 2);  // cnn_s
  EXPECT_EQ(bytes[9], 8);  // tensor count
  // first entry: u16 name length then "conv1.weight"
  EXPECT_EQ(bytes[13], 12);
  EXPECT_EQ(std::string(bytes.begin() + 15, bytes.begin() + 27), "conv1.weight");
}

TEST(Checkpoint, CorruptedMagicIsFormatError) {
  auto bytes = serialize(init(Arch::MlpS, 0));
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), FormatError);
}

TEST(Checkpoint, VersionMismatchIsFormatError) {
  auto bytes = serialize(init(Arch::MlpS, 0));
  bytes[4] = 2;
  EXPECT_THROW(deserialize(bytes), FormatError);
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
  auto bytes = serialize(init(Arch::MlpS, 0));
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize(bytes), FormatError);
}

TEST(Checkpoint, WrongArchIsShapeError) {
  auto path = temp_path("cnn_as_mlp.tlab");
  save(init(Arch::CnnS, 0), path);
  EXPECT_THROW(load(path, Arch::MlpS), DimensionError);
  auto bytes = serialize(init(Arch::CnnS, 0));
  bytes[8] = 0;  // relabel as mlp_s: tensors no longer match the registry
  EXPECT_THROW(deserialize(bytes), DimensionError);
}

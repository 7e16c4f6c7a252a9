#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "tlab/experiment.hpp"
#include "tlab/io.hpp"

namespace fs = std::filesystem;
using tlab::cli::run;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

const char* kSmoke = R"({
  "dataset": {"seed": 0, "n_train": 200, "n_test": 100},
  "surrogate": {
    "arch": "mlp_s",
    "seeds": [0],
    "train": {"epochs": 2, "warmup_epochs": 1},
    "grid": [{"mechanism": "st", "values": [0]}, {"mechanism": "at", "values": [0.1]}]
  },
  "targets": [{"arch": "mlp_s", "seed": 9}],
  "attacks": [{"norm": "linf", "eps": "8/255", "steps": 3, "with_targeted": true}],
  "metrics": {"n_eval": 30, "n_smooth": 5, "n_sim": 5, "power_iters": 5, "power_tol": 1e-3}
})";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("tlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    config_ = (dir_ / "config.json").string();
    tlab::io::write_text_atomic(config_, kSmoke);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
  std::string config_;
};

}  // namespace

TEST_F(CliTest, SweepResumesFromCache) {
  const std::string out = (dir_ / "run").string();
  const Result first = call({"--config", config_, "--out", out, "sweep"});
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_NE(first.out.find("\"models_trained\":3"), std::string::npos) << first.out;
  const std::string csv = tlab::io::read_text(dir_ / "run" / "metrics.csv");
  const Result second = call({"--config", config_, "--out", out, "sweep"});
  ASSERT_EQ(second.code, 0) << second.err;
  EXPECT_NE(second.out.find("\"models_trained\":0"), std::string::npos) << second.out;
  EXPECT_NE(second.out.find("\"rows_measured\":0"), std::string::npos) << second.out;
  EXPECT_EQ(tlab::io::read_text(dir_ / "run" / "metrics.csv"), csv);

  const Result report = call({"report", "--csv", (dir_ / "run" / "metrics.csv").string()});
  EXPECT_EQ(report.code, 0) << report.err;
  EXPECT_TRUE(fs::exists(dir_ / "run" / "plots" / "asr_vs_at_eps.csv"));
  const Result check = call({"report", "--csv", (dir_ / "run" / "metrics.csv").string(), "--check"});
  EXPECT_EQ(check.code, 3);
}

TEST_F(CliTest, ZeroBudgetAttackHasNoTransfer) {
  ASSERT_EQ(call({"--config", config_, "--out", (dir_ / "run").string(), "train"}).code, 0);
  fs::path ckpt;
  for (const auto& e : fs::directory_iterator(dir_ / "run" / "models"))
    if (e.path().extension() == ".tlab") ckpt = e.path();
  ASSERT_FALSE(ckpt.empty());
  const std::string adv = (dir_ / "adv").string();
  const Result a = call({"--out", adv, "attack", "--checkpoint", ckpt.string(), "--eps", "0", "--n-test", "100",
                         "--n-eval", "20", "--steps", "3"});
  ASSERT_EQ(a.code, 0) << a.err;
  const std::string rows = (dir_ / "rows.csv").string();
  const Result m = call({"--out", rows, "measure", "--surrogate", ckpt.string(), "--target", ckpt.string(), "--advset",
                         adv, "--n-smooth", "4", "--n-sim", "4", "--power-iters", "5"});
  ASSERT_EQ(m.code, 0) << m.err;
  const auto parsed = tlab::read_metrics_csv(rows);
  ASSERT_EQ(parsed.size(), 1u);
  EXPECT_EQ(parsed[0].asr_u, 0.0);
  EXPECT_NEAR(parsed[0].sim_mean, 1.0, 1e-12);
  ASSERT_EQ(call({"--out", rows, "measure", "--surrogate", ckpt.string(), "--target", ckpt.string(), "--advset", adv,
                  "--n-smooth", "4", "--n-sim", "4", "--power-iters", "5"})
                .code,
            0);
  EXPECT_EQ(tlab::read_metrics_csv(rows).size(), 2u);
}

TEST_F(CliTest, CorrelateSyntheticRows) {
  std::string text = std::string(tlab::kMetricsHeader) + "\n";
  text += "st,,0,0,mlp_s,mlp_s,linf,0.03,0.1,,0.9,0.1,0.1,1,2,0.1,0,0,0,\n";
  text += "st,,0,1,mlp_s,mlp_s,linf,0.03,0.2,,0.8,0.2,0.1,2,3,0.2,0,0,0,\n";
  text += "st,,0,2,mlp_s,mlp_s,linf,0.03,0.3,,0.95,0.15,0.1,4,5,0.3,0,0,0,\n";
  const std::string csv = (dir_ / "m.csv").string();
  tlab::io::write_text_atomic(csv, text);
  const std::string json = (dir_ / "c.json").string();
  const Result r = call({"--out", json, "correlate", "--csv", csv, "--permutations", "9"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string body = tlab::io::read_text(json);
  EXPECT_NE(body.find("\"gs\": 1.0"), std::string::npos) << body;
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(call({}).code, 1);
  EXPECT_EQ(call({"bogus"}).code, 1);
  EXPECT_EQ(call({"--help"}).code, 0);
  EXPECT_EQ(call({"sweep"}).code, 1);
  EXPECT_EQ(call({"--config", (dir_ / "missing.json").string(), "--out", dir_.string(), "sweep"}).code, 1);
  tlab::io::write_text_atomic(config_, R"({"surrogate": {"grid": []}, "unknown": 1})");
  EXPECT_EQ(call({"--config", config_, "--out", dir_.string(), "sweep"}).code, 1);
  EXPECT_EQ(call({"correlate", "--csv", (dir_ / "missing.csv").string()}).code, 1);
  EXPECT_EQ(call({"attack", "--checkpoint", (dir_ / "missing.tlab").string(), "--eps", "x"}).code, 1);
  EXPECT_EQ(call({"--jobs", "0", "sweep"}).code, 1);
}

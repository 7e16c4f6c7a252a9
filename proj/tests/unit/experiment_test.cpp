#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "tlab/error.hpp"
#include "tlab/experiment.hpp"
#include "tlab/io.hpp"

using namespace tlab;
namespace fs = std::filesystem;

namespace {

const char* kConfig = R"({
  "dataset": {"seed": 3, "n_train": 200, "n_test": 100},
  "surrogate": {
    "arch": "mlp_s",
    "seeds": [0, 1],
    "train": {"epochs": 2, "warmup_epochs": 1},
    "grid": [
      {"mechanism": "st", "values": [0]},
      {"mechanism": "at", "values": ["8/255", 0.5]},
      {"mechanism": "mu", "values": [5]}
    ]
  },
  "targets": [{"arch": "cnn_s", "seed": 7}],
  "attacks": [{"norm": "l2", "eps": 0.5, "steps": 3, "with_targeted": true}],
  "metrics": {"n_eval": 50, "n_smooth": 10, "n_sim": 10}
})";

MetricsRow sample_row() {
  MetricsRow r;
  r.mechanism = "mu";
  r.tau = 5;
  r.param_value = 5;
  r.seed = 2;
  r.surrogate_arch = "mlp_s";
  r.target_arch = "cnn_l";
  r.norm = "linf";
  r.eps = 8.0 / 255.0;
  r.asr_u = 0.25;
  r.asr_t = 0.125;
  r.fool_prob = 0.75;
  r.nat_risk_s = 0.03;
  r.nat_risk_t = 0.02;
  r.smooth_mean = 1.5;
  r.smooth_max = 4.25;
  r.sim_mean = 0.3;
  r.sim_min = -0.1;
  r.c_f = -0.5;
  r.c_g = 0.25;
  return r;
}

}  // namespace

TEST(Budget, NumbersAndFractions) {
  EXPECT_DOUBLE_EQ(parse_budget("8/255"), 8.0 / 255.0);
  EXPECT_DOUBLE_EQ(parse_budget("0.5"), 0.5);
  EXPECT_DOUBLE_EQ(parse_budget("0"), 0.0);
  EXPECT_THROW(parse_budget("abc"), ValidationError);
  EXPECT_THROW(parse_budget("1/0"), ValidationError);
  EXPECT_THROW(parse_budget("-1"), ValidationError);
}

TEST(Config, ParsesAndRoundTrips) {
  const ExperimentConfig c = ExperimentConfig::parse(kConfig);
  EXPECT_EQ(c.dataset.seed, 3u);
  EXPECT_EQ(c.seeds.size(), 2u);
  ASSERT_EQ(c.grid.size(), 3u);
  EXPECT_DOUBLE_EQ(c.grid[1].values[0], 8.0 / 255.0);
  EXPECT_EQ(c.base.epochs, 2);
  ASSERT_EQ(c.attacks.size(), 1u);
  EXPECT_TRUE(c.attacks[0].with_targeted);
  EXPECT_EQ(c.attacks[0].config.norm, Norm::L2);
  EXPECT_EQ(c.metrics.n_eval, 50u);
  EXPECT_EQ(ExperimentConfig::parse(c.json()).json(), c.json());
}

TEST(Config, RejectsUnknownKeys) {
  std::string text = kConfig;
  text.replace(text.find("\"n_eval\""), 8, "\"n_evals\"");
  EXPECT_THROW(ExperimentConfig::parse(text), ValidationError);
  EXPECT_THROW(ExperimentConfig::parse(R"({"surrogate": {"grid": []}, "extra": 1})"), ValidationError);
}

TEST(Config, RejectsBadValues) {
  std::string text = kConfig;
  text.replace(text.find("\"mu\""), 4, "\"xx\"");
  EXPECT_THROW(ExperimentConfig::parse(text), ValidationError);
  EXPECT_THROW(ExperimentConfig::parse("{not json"), ValidationError);
  EXPECT_THROW(ExperimentConfig::load("/nonexistent/config.json"), ValidationError);
}

TEST(Cells, KeysAreStableAndDistinct) {
  const ExperimentConfig c = ExperimentConfig::parse(kConfig);
  Experiment e(c, fs::temp_directory_path() / "tlab_cells", 1, nullptr);
  const auto cells = e.surrogate_cells();
  EXPECT_EQ(cells.size(), 8u);
  std::set<std::string> keys;
  for (const auto& cell : cells) keys.insert(cell.key);
  EXPECT_EQ(keys.size(), cells.size());
  Experiment again(c, fs::temp_directory_path() / "tlab_cells", 1, nullptr);
  EXPECT_EQ(again.surrogate_cells()[3].key, cells[3].key);
  EXPECT_EQ(e.target_cells().size(), 1u);
  EXPECT_EQ(content_key("abc"), content_key("abc"));
  EXPECT_EQ(content_key("abc").size(), 16u);
  EXPECT_NE(content_key("abc"), content_key("abd"));
}

TEST(Cells, TrainConfigCarriesStrength) {
  TrainConfig base;
  const TrainConfig at = cell_train_config(base, Mechanism::At, 0.2, 4);
  EXPECT_DOUBLE_EQ(at.eps_adv, 0.2);
  EXPECT_EQ(at.seed, 4u);
  EXPECT_DOUBLE_EQ(strength_of(at), 0.2);
  const TrainConfig jr = cell_train_config(base, Mechanism::Jr, 0.01, 0);
  EXPECT_DOUBLE_EQ(jr.lambda_jr, 0.01);
  const TrainConfig round = parse_train_config(train_config_json(jr));
  EXPECT_EQ(train_config_json(round), train_config_json(jr));
}

TEST(Rows, MetricsCsvRoundTrip) {
  MetricsRow r = sample_row();
  EXPECT_EQ(MetricsRow::parse(r.csv()).csv(), r.csv());
  r.tau.reset();
  r.asr_t.reset();
  r.bound = -0.75;
  const std::string line = r.csv();
  const MetricsRow back = MetricsRow::parse(line);
  EXPECT_FALSE(back.tau.has_value());
  EXPECT_FALSE(back.asr_t.has_value());
  ASSERT_TRUE(back.bound.has_value());
  EXPECT_DOUBLE_EQ(*back.bound, -0.75);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 19);
  EXPECT_EQ(MetricsRow::parse(line + ",500").n, 500u);
  EXPECT_THROW(MetricsRow::parse("st,1,2"), FormatError);
}

TEST(Rows, FileRoundTrip) {
  const fs::path path = fs::temp_directory_path() / "tlab_rows.csv";
  const std::vector<MetricsRow> rows = {sample_row(), sample_row()};
  io::write_text_atomic(path, metrics_csv(rows));
  const auto back = read_metrics_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].csv(), rows[1].csv());
  io::write_text_atomic(path, "wrong,header\n");
  EXPECT_THROW(read_metrics_csv(path), FormatError);
  fs::remove(path);
}

TEST(Rows, SurrogateRoundTrip) {
  SurrogateRow s;
  s.mechanism = "jr";
  s.param_value = 0.01;
  s.seed = 1;
  s.arch = "mlp_s";
  s.test_acc = 0.95;
  s.jac_norm = 3.5;
  s.grad_norm = 0.125;
  EXPECT_EQ(SurrogateRow::parse(s.csv()).csv(), s.csv());
}

TEST(Rows, NumberFormat) {
  EXPECT_EQ(format_number(0.0), "0");
  EXPECT_EQ(format_number(-0.0), "0");
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_EQ(format_number(8.0 / 255.0), "0.03137254902");
}

TEST(Correlate, PerfectLinearGroup) {
  std::vector<MetricsRow> rows;
  for (int i = 0; i < 4; ++i) {
    MetricsRow r = sample_row();
    r.sim_mean = 0.1 * i;
    r.asr_u = 0.2 * i + 0.1;
    r.smooth_mean = 1.0 + i * i;
    r.nat_risk_s = 0.01 * ((i * 7) % 4);
    r.fool_prob = 0.5 + 0.1 * ((i * 3) % 4);
    rows.push_back(r);
  }
  const auto groups = correlate(rows, 99, 0);
  ASSERT_FALSE(groups.empty());
  const auto& all = groups.back();
  EXPECT_EQ(all.key, "all");
  ASSERT_TRUE(all.r.at("gs").has_value());
  EXPECT_NEAR(*all.r.at("gs"), 1.0, 1e-12);
  ASSERT_TRUE(all.p_gs.has_value());
  EXPECT_LT(*all.p_gs, 0.1);
}

TEST(Parallel, VisitsEveryIndexOnce) {
  std::vector<int> hits(37, 0);
  parallel_for(hits.size(), 3, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"smoke.json", "acceptance.json", "desk.json"}) {
    const ExperimentConfig c = ExperimentConfig::load(fs::path(TLAB_SOURCE_DIR) / "configs" / name);
    EXPECT_FALSE(c.grid.empty()) << name;
    EXPECT_FALSE(c.targets.empty()) << name;
  }
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tlab/attacks.hpp"
#include "tlab/data.hpp"
#include "tlab/metrics.hpp"
#include "tlab/training.hpp"

namespace tlab {

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
};

/// One mechanism and the values of its strength parameter: eps_adv for at, tau for
/// augmentations, lambda_ir for ir and sam_ir, lambda_jr for jr and sam_jr, lambda_er for er,
/// rho for sam. st takes the single value 0.
struct GridEntry {
  Mechanism mechanism = Mechanism::St;
  std::vector<double> values;
};

struct TargetSpec {
  Arch arch = Arch::MlpS;
  std::uint64_t seed = 0;
};

struct AttackEntry {
  AttackConfig config;       // untargeted
  bool with_targeted = false;  // also run the targeted variant for asr_t
};

struct MetricsConfig {
  std::size_t n_eval = 500;    // leading test samples attacked and measured
  std::size_t n_smooth = 200;
  std::size_t n_sim = 200;
  PowerConfig power;
  std::uint64_t seed = 0;
  bool similarity_matrix = true;  // pairwise similarity of the first seed's surrogates
};

struct ExperimentConfig {
  DatasetConfig dataset;
  Arch surrogate_arch = Arch::MlpS;
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {0};
  std::vector<GridEntry> grid;
  std::vector<TargetSpec> targets;
  std::vector<AttackEntry> attacks;
  MetricsConfig metrics;

  /// Parses and validates; unknown keys are a ValidationError.
  static ExperimentConfig parse(std::string_view json_text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string json() const;
  void validate() const;
};

/// Parses a number or an "a/b" fraction string.
double parse_budget(std::string_view text);

/// 16 hex digits of the FNV-1a hash of a canonical description.
std::string content_key(std::string_view canonical);

std::string train_config_json(const TrainConfig& c);
TrainConfig parse_train_config(std::string_view json_text);
AttackConfig parse_attack_config(std::string_view json_text);

/// The training config of a surrogate cell: base with the mechanism's strength set to value.
TrainConfig cell_train_config(const TrainConfig& base, Mechanism m, double value, std::uint64_t seed);
/// Strength parameter of a mechanism in a config (0 for st).
double strength_of(const TrainConfig& c);

struct ModelCell {
  std::string role;  // "surrogate" or "target"
  Arch arch = Arch::MlpS;
  TrainConfig config;
  double value = 0.0;
  std::string key;  // hash of dataset and training config
};

// Fixed CSV schema of measured cells.
inline constexpr std::string_view kMetricsHeader =
    "mechanism,tau,param_value,seed,surrogate_arch,target_arch,norm,eps,asr_u,asr_t,fool_prob,nat_risk_s,"
    "nat_risk_t,smooth_mean,smooth_max,sim_mean,sim_min,c_f,c_g,bound";

struct MetricsRow {
  std::string mechanism;
  std::optional<int> tau;
  double param_value = 0.0;
  std::uint64_t seed = 0;
  std::string surrogate_arch, target_arch, norm;
  double eps = 0.0;
  double asr_u = 0.0;
  std::optional<double> asr_t;
  double fool_prob = 0.0, nat_risk_s = 0.0, nat_risk_t = 0.0;
  double smooth_mean = 0.0, smooth_max = 0.0, sim_mean = 0.0, sim_min = 0.0;
  double c_f = 0.0, c_g = 0.0;
  std::optional<double> bound;
  std::size_t n = 0;  // evaluation samples; only kept in cached cell files

  /// The 20 schema columns.
  std::string csv() const;
  /// Accepts the 20 schema columns, optionally followed by n.
  static MetricsRow parse(std::string_view line);
};

inline constexpr std::string_view kSurrogateHeader =
    "mechanism,tau,param_value,seed,arch,test_acc,smooth_mean,smooth_max,jac_norm,grad_norm";

/// Per-model measurements that do not depend on a target or attack.
struct SurrogateRow {
  std::string mechanism;
  std::optional<int> tau;
  double param_value = 0.0;
  std::uint64_t seed = 0;
  std::string arch;
  double test_acc = 0.0, smooth_mean = 0.0, smooth_max = 0.0, jac_norm = 0.0, grad_norm = 0.0;

  std::string csv() const;
  static SurrogateRow parse(std::string_view line);
};

std::string format_number(double v);

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);
std::vector<SurrogateRow> read_surrogates_csv(const std::filesystem::path& path);
std::string metrics_csv(const std::vector<MetricsRow>& rows);

/// Leading n samples of a split as the evaluation set.
Dataset evaluation_set(const Dataset& test, std::size_t n);

/// Measures one (surrogate, target, attack) cell. Smoothness estimates are passed in so callers can cache them.
MetricsRow measure_cell(const ParamSet& surrogate, const ParamSet& target, const AdvSet& untargeted,
                        const AdvSet* targeted, const SmoothnessEstimate& smooth_s,
                        const SmoothnessEstimate& smooth_t, const AttackConfig& attack_cfg,
                        const MetricsConfig& metrics);

using Logger = std::function<void(std::string_view)>;

struct SweepSummary {
  std::size_t models_trained = 0;
  std::size_t models_cached = 0;
  std::size_t advsets_built = 0;
  std::size_t rows_measured = 0;
  std::size_t rows_cached = 0;
};

/// File-backed sweep. Every artifact lives under `out` keyed by a content hash and is
/// written atomically, so an interrupted or repeated run resumes from what exists.
class Experiment {
 public:
  Experiment(ExperimentConfig config, std::filesystem::path out, int jobs = 1, Logger log = {});

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return out_; }
  std::vector<ModelCell> surrogate_cells() const;
  std::vector<ModelCell> target_cells() const;

  std::filesystem::path checkpoint_path(const ModelCell& cell) const;
  std::filesystem::path advset_dir(const ModelCell& surrogate, const AttackConfig& cfg) const;
  std::filesystem::path row_path(const ModelCell& surrogate, const ModelCell& target, const AttackEntry& a) const;

  /// Trains every missing model.
  SweepSummary train_all();
  /// train_all, then attacks, measurements, metrics.csv, surrogates.csv and the similarity matrix.
  SweepSummary run();

  const Dataset& train_set() const;
  const Dataset& eval_set() const;

 private:
  ParamSet model(const ModelCell& cell, SweepSummary* summary);
  AdvSet advset(const ModelCell& surrogate, const ParamSet& params, const AttackConfig& cfg, SweepSummary* summary);
  SmoothnessEstimate smoothness(const ModelCell& cell, const ParamSet& params);
  SurrogateRow surrogate_row(const ModelCell& cell, const ParamSet& params);
  void log(const std::string& msg) const;

  ExperimentConfig config_;
  std::filesystem::path out_;
  int jobs_ = 1;
  Logger log_;
  Dataset train_, test_, eval_;
};

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first failure.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

// Correlation study over measured rows.
struct CorrelationGroup {
  std::string key;  // "target/norm/eps" or "all"
  std::size_t n = 0;
  std::map<std::string, std::optional<double>> r;  // factor -> Pearson r with asr_u
  std::optional<double> p_gs;                     // one-sided permutation p for r(GS, ASR) > 0
  std::optional<double> r2_ms_gs, r2_all;
};

/// Factors: acc = 1 - nat_risk_s, fp = fool_prob, ms = -smooth_mean, gs = sim_mean.
std::vector<CorrelationGroup> correlate(const std::vector<MetricsRow>& rows, std::size_t permutations = 999,
                                        std::uint64_t seed = 0);
std::string correlation_json(const std::vector<CorrelationGroup>& groups, const std::vector<MetricsRow>& rows);

/// Writes the per-figure plot series into dir; returns the written paths.
std::vector<std::filesystem::path> write_report(const std::vector<MetricsRow>& rows,
                                                const std::vector<SurrogateRow>& surrogates,
                                                const std::filesystem::path& similarity_matrix,
                                                const std::filesystem::path& dir);

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CriteriaOptions {
  double eps = 8.0 / 255.0;       // L-infinity evaluation budget
  std::size_t n_eval = 500;       // samples behind each rate, for the soundness slack
  std::optional<double> combo_rho;  // SAM rho paired with the combos; inferred when the sweep has one
  std::size_t min_bound_cells = 60;
  std::size_t permutations = 999;
};

/// The criteria computable from the two result tables. The standard reference target is the
/// target whose arch equals the surrogate arch.
std::vector<CriterionResult> sweep_criteria(const std::vector<MetricsRow>& rows,
                                            const std::vector<SurrogateRow>& surrogates,
                                            const CriteriaOptions& options);

}  // namespace tlab

#include "cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "tlab/error.hpp"
#include "tlab/experiment.hpp"
#include "tlab/io.hpp"

namespace tlab::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) throw ValidationError(std::string(flag) + " is required");
  return value;
}

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig c = ExperimentConfig::load(require(g.config, "--config"));
  if (g.seed) c.seeds = {*g.seed};
  c.validate();
  return c;
}

std::string summary_json(const SweepSummary& s) {
  ordered_json j;
  j["models_trained"] = s.models_trained;
  j["models_cached"] = s.models_cached;
  j["advsets_built"] = s.advsets_built;
  j["rows_measured"] = s.rows_measured;
  j["rows_cached"] = s.rows_cached;
  return j.dump();
}

Logger stderr_logger(std::ostream& err) {
  return [&err](std::string_view msg) { err << msg << std::endl; };
}

struct AttackFlags {
  std::string checkpoint;
  std::string norm = "linf";
  std::string eps = "8/255";
  int steps = 40;
  std::string step_size;
  bool targeted = false;
  std::string target_rule = "fixed-offset";
  double mu = 0.0;
  double di = 0.0;
  int restarts = 1;
  bool no_random_start = false;
  std::uint64_t data_seed = 0;
  std::size_t n_test = 500;
  std::size_t n_eval = 500;
};

struct MeasureFlags {
  std::string surrogate, target, advset, targeted_advset;
  std::string mechanism = "st";
  double param_value = 0.0;
  int tau = 0;
  std::size_t n_smooth = 200, n_sim = 200;
  int power_iters = 50;
  double power_tol = 1e-4;
};

struct ReportFlags {
  std::string csv, surrogates, matrix;
  bool check = false;
  std::string eps = "8/255";
  std::size_t n_eval = 500;
  std::optional<double> rho;
  std::size_t permutations = 999;
};

int cmd_train(const Globals& g, std::ostream& out, std::ostream& err) {
  Experiment e(load_config(g), require(g.out, "--out"), g.jobs, stderr_logger(err));
  out << summary_json(e.train_all()) << "\n";
  return kOk;
}

int cmd_sweep(const Globals& g, std::ostream& out, std::ostream& err) {
  Experiment e(load_config(g), require(g.out, "--out"), g.jobs, stderr_logger(err));
  out << summary_json(e.run()) << "\n";
  return kOk;
}

int cmd_attack(const Globals& g, const AttackFlags& f, std::ostream& out) {
  AttackConfig c;
  c.norm = parse_norm(f.norm);
  c.eps = parse_budget(f.eps);
  c.steps = f.steps;
  if (!f.step_size.empty()) c.step_size = parse_budget(f.step_size);
  c.targeted = f.targeted;
  c.target_rule = parse_target_rule(f.target_rule);
  c.mu_decay = f.mu;
  c.di_prob = f.di;
  c.restarts = f.restarts;
  c.random_start = !f.no_random_start;
  c.seed = g.seed.value_or(0);
  c.validate();
  const fs::path dir = require(g.out, "--out");
  const ParamSet model = load(require(f.checkpoint, "--checkpoint"));
  const Dataset eval = evaluation_set(glyphset_split(f.data_seed, f.n_test, Split::Test), f.n_eval);
  AdvSet set = attack(model, eval.images, eval.labels, c);
  save_advset(set, c, dir);
  ordered_json j;
  j["advset"] = dir.string();
  j["n"] = set.size();
  j["fooling_rate"] = set.fooling_rate();
  out << j.dump() << "\n";
  return kOk;
}

AttackConfig advset_config(const fs::path& dir) {
  const auto meta = nlohmann::json::parse(io::read_text(dir / "meta.json"));
  return parse_attack_config(meta.at("config").dump());
}

int cmd_measure(const Globals& g, const MeasureFlags& f, std::ostream& out) {
  const ParamSet s = load(require(f.surrogate, "--surrogate"));
  const ParamSet t = load(require(f.target, "--target"));
  const fs::path adv_dir = require(f.advset, "--advset");
  const AdvSet u = load_advset(adv_dir);
  const AttackConfig cfg = advset_config(adv_dir);
  if (cfg.targeted) throw ValidationError("--advset must be untargeted; pass targeted sets with --targeted-advset");
  std::optional<AdvSet> tset;
  if (!f.targeted_advset.empty()) tset = load_advset(f.targeted_advset);

  MetricsConfig m;
  m.n_eval = u.size();
  m.n_smooth = std::min(f.n_smooth, u.size());
  m.n_sim = std::min(f.n_sim, u.size());
  m.power = {f.power_iters, f.power_tol};
  m.seed = g.seed.value_or(0);
  const Dataset eval{u.clean, u.labels, Split::Test};
  const auto ss = model_smoothness(s, eval, m.n_smooth, m.seed, m.power);
  const auto st = model_smoothness(t, eval, m.n_smooth, m.seed, m.power);
  MetricsRow row = measure_cell(s, t, u, tset ? &*tset : nullptr, ss, st, cfg, m);
  row.mechanism = mechanism_name(parse_mechanism(f.mechanism));
  if (augmentation_of(parse_mechanism(f.mechanism)) != AugmentMechanism::None) row.tau = f.tau;
  row.param_value = f.param_value;
  row.seed = g.seed.value_or(0);

  if (g.out.empty()) {
    out << kMetricsHeader << "\n" << row.csv() << "\n";
    return kOk;
  }
  const fs::path path = g.out;
  std::string text;
  if (fs::exists(path)) {
    text = io::read_text(path);
    if (text.rfind(std::string(kMetricsHeader), 0) != 0) throw FormatError(path.string() + ": unexpected header");
  } else {
    text = std::string(kMetricsHeader) + "\n";
  }
  text += row.csv() + "\n";
  io::write_text_atomic(path, text);
  out << row.csv() << "\n";
  return kOk;
}

int cmd_correlate(const Globals& g, const std::string& csv, std::size_t permutations, std::ostream& out) {
  const auto rows = read_metrics_csv(require(csv, "--csv"));
  const std::string text = correlation_json(correlate(rows, permutations, g.seed.value_or(0)), rows);
  if (g.out.empty()) {
    out << text;
  } else {
    io::write_text_atomic(g.out, text);
  }
  return kOk;
}

int cmd_report(const Globals& g, const ReportFlags& f, std::ostream& out) {
  const fs::path csv = require(f.csv, "--csv");
  const auto rows = read_metrics_csv(csv);
  const fs::path sur = f.surrogates.empty() ? csv.parent_path() / "surrogates.csv" : fs::path(f.surrogates);
  const fs::path matrix = f.matrix.empty() ? csv.parent_path() / "similarity_matrix.csv" : fs::path(f.matrix);
  const auto srows = fs::exists(sur) ? read_surrogates_csv(sur) : std::vector<SurrogateRow>{};
  const fs::path dir = g.out.empty() ? csv.parent_path() / "plots" : fs::path(g.out);
  for (const auto& p : write_report(rows, srows, matrix, dir)) out << p.string() << "\n";
  if (!f.check) return kOk;
  CriteriaOptions o;
  o.eps = parse_budget(f.eps);
  o.n_eval = f.n_eval;
  o.combo_rho = f.rho;
  o.permutations = f.permutations;
  bool all = true;
  for (const auto& c : sweep_criteria(rows, srows, o)) {
    out << (c.passed ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << c.detail << "\n";
    all = all && c.passed;
  }
  return all ? kOk : kCheckFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tlab: transferability experiments on procedural glyphs"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--out", g.out, "Output directory or file");
  auto* seed_opt = app.add_option("--seed", seed, "Seed override");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train every model of a config");
  auto* sweep = app.add_subcommand("sweep", "Train, attack and measure the full grid (resumable)");

  AttackFlags af;
  auto* attack = app.add_subcommand("attack", "Craft an adversarial set against one checkpoint");
  attack->add_option("--checkpoint", af.checkpoint, "Surrogate checkpoint")->required();
  attack->add_option("--norm", af.norm, "linf or l2");
  attack->add_option("--eps", af.eps, "Budget, number or a/b");
  attack->add_option("--steps", af.steps, "Iterations");
  attack->add_option("--step-size", af.step_size, "Step size (default 2.5 eps / steps)");
  attack->add_flag("--targeted", af.targeted, "Targeted attack");
  attack->add_option("--target-rule", af.target_rule, "fixed-offset or least-likely");
  attack->add_option("--mu", af.mu, "MI momentum decay");
  attack->add_option("--di", af.di, "Input diversity probability");
  attack->add_option("--restarts", af.restarts, "Random restarts");
  attack->add_flag("--no-random-start", af.no_random_start, "Start from the clean input");
  attack->add_option("--data-seed", af.data_seed, "Dataset seed");
  attack->add_option("--n-test", af.n_test, "Test split size");
  attack->add_option("--n-eval", af.n_eval, "Leading test samples to attack");

  MeasureFlags mf;
  auto* measure = app.add_subcommand("measure", "Measure one surrogate/target/advset cell");
  measure->add_option("--surrogate", mf.surrogate, "Surrogate checkpoint")->required();
  measure->add_option("--target", mf.target, "Target checkpoint")->required();
  measure->add_option("--advset", mf.advset, "Untargeted advset directory")->required();
  measure->add_option("--targeted-advset", mf.targeted_advset, "Targeted advset directory");
  measure->add_option("--mechanism", mf.mechanism, "Surrogate mechanism label");
  measure->add_option("--param-value", mf.param_value, "Surrogate strength label");
  measure->add_option("--tau", mf.tau, "Augmentation magnitude label");
  measure->add_option("--n-smooth", mf.n_smooth, "Smoothness samples");
  measure->add_option("--n-sim", mf.n_sim, "Similarity samples");
  measure->add_option("--power-iters", mf.power_iters, "Power iterations");
  measure->add_option("--power-tol", mf.power_tol, "Power iteration tolerance");

  std::string corr_csv;
  std::size_t permutations = 999;
  auto* correlate_cmd = app.add_subcommand("correlate", "Pearson and OLS summary of a metrics CSV");
  correlate_cmd->add_option("--csv", corr_csv, "metrics.csv")->required();
  correlate_cmd->add_option("--permutations", permutations, "Permutations for p-values");

  ReportFlags rf;
  auto* report = app.add_subcommand("report", "Per-figure plot data, optionally checking the criteria");
  report->add_option("--csv", rf.csv, "metrics.csv")->required();
  report->add_option("--surrogates", rf.surrogates, "surrogates.csv (default: next to --csv)");
  report->add_option("--matrix", rf.matrix, "similarity_matrix.csv (default: next to --csv)");
  report->add_flag("--check", rf.check, "Evaluate the sweep criteria; exit 3 on failure");
  report->add_option("--eps", rf.eps, "L-infinity budget the criteria read");
  report->add_option("--n-eval", rf.n_eval, "Samples behind each rate");
  auto* rho_opt = report->add_option("--rho", "SAM rho paired with the combos");
  report->add_option("--permutations", rf.permutations, "Permutations for p-values");

  for (auto* sub : {train, sweep, attack, measure, correlate_cmd, report}) sub->fallthrough();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  if (*seed_opt) g.seed = seed;
  if (*rho_opt) rf.rho = rho_opt->as<double>();

  try {
    if (*train) return cmd_train(g, out, err);
    if (*sweep) return cmd_sweep(g, out, err);
    if (*attack) return cmd_attack(g, af, out);
    if (*measure) return cmd_measure(g, mf, out);
    if (*correlate_cmd) return cmd_correlate(g, corr_csv, permutations, out);
    if (*report) return cmd_report(g, rf, out);
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kValidation;
  } catch (const DomainError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kValidation;
}

}  // namespace tlab::cli

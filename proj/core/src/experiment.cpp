#include "tlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <json.hpp>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "tlab/error.hpp"
#include "tlab/io.hpp"

namespace tlab {

using nlohmann::json;
using nlohmann::ordered_json;

namespace fs = std::filesystem;

namespace {

void check_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ValidationError(std::string(where) + " must be an object");
  for (const auto& [k, v] : obj.items())
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ValidationError("unknown key '" + k + "' in " + std::string(where));
}

double number_or_fraction(const json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return parse_budget(v.get<std::string>());
  throw ValidationError("expected a number or an \"a/b\" fraction");
}

template <class T>
void read_opt(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

TrainConfig train_from_json(const json& j) {
  check_keys(j, "train config",
             {"mechanism", "epochs", "batch_size", "peak_lr", "momentum", "warmup_epochs", "seed", "eps_adv",
              "at_steps", "at_step_size", "at_norm", "lambda_ir", "lambda_jr", "lambda_er", "rho", "tau"});
  TrainConfig c;
  if (j.contains("mechanism")) c.mechanism = parse_mechanism(j.at("mechanism").get<std::string>());
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "peak_lr", c.peak_lr);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "warmup_epochs", c.warmup_epochs);
  read_opt(j, "seed", c.seed);
  if (j.contains("eps_adv")) c.eps_adv = number_or_fraction(j.at("eps_adv"));
  read_opt(j, "at_steps", c.at_steps);
  read_opt(j, "at_step_size", c.at_step_size);
  if (j.contains("at_norm")) c.at_norm = parse_norm(j.at("at_norm").get<std::string>());
  read_opt(j, "lambda_ir", c.lambda_ir);
  read_opt(j, "lambda_jr", c.lambda_jr);
  read_opt(j, "lambda_er", c.lambda_er);
  read_opt(j, "rho", c.rho);
  read_opt(j, "tau", c.tau);
  return c;
}

ordered_json train_to_json(const TrainConfig& c) {
  ordered_json j;
  j["mechanism"] = mechanism_name(c.mechanism);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["peak_lr"] = c.peak_lr;
  j["momentum"] = c.momentum;
  j["warmup_epochs"] = c.warmup_epochs;
  j["seed"] = c.seed;
  j["eps_adv"] = c.eps_adv;
  j["at_steps"] = c.at_steps;
  j["at_step_size"] = c.at_step_size;
  j["at_norm"] = norm_name(c.at_norm);
  j["lambda_ir"] = c.lambda_ir;
  j["lambda_jr"] = c.lambda_jr;
  j["lambda_er"] = c.lambda_er;
  j["rho"] = c.rho;
  j["tau"] = c.tau;
  return j;
}

constexpr std::string_view kAttackKeys[] = {
    "norm", "eps", "steps", "step_size", "targeted", "target_rule", "mu_decay", "di_prob", "random_start", "restarts",
    "seed"};

AttackConfig attack_from_json(const json& j, bool allow_with_targeted) {
  std::vector<std::string_view> allowed(std::begin(kAttackKeys), std::end(kAttackKeys));
  if (allow_with_targeted) allowed.push_back("with_targeted");
  if (!j.is_object()) throw ValidationError("attack config must be an object");
  for (const auto& [k, v] : j.items())
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ValidationError("unknown key '" + k + "' in attack config");
  AttackConfig c;
  if (j.contains("norm")) c.norm = parse_norm(j.at("norm").get<std::string>());
  if (j.contains("eps")) c.eps = number_or_fraction(j.at("eps"));
  read_opt(j, "steps", c.steps);
  if (j.contains("step_size")) c.step_size = number_or_fraction(j.at("step_size"));
  read_opt(j, "targeted", c.targeted);
  if (j.contains("target_rule")) c.target_rule = parse_target_rule(j.at("target_rule").get<std::string>());
  read_opt(j, "mu_decay", c.mu_decay);
  read_opt(j, "di_prob", c.di_prob);
  read_opt(j, "random_start", c.random_start);
  read_opt(j, "restarts", c.restarts);
  read_opt(j, "seed", c.seed);
  c.validate();
  return c;
}

ordered_json metrics_to_json(const MetricsConfig& m) {
  ordered_json j;
  j["n_eval"] = m.n_eval;
  j["n_smooth"] = m.n_smooth;
  j["n_sim"] = m.n_sim;
  j["power_iters"] = m.power.max_iters;
  j["power_tol"] = m.power.tol;
  j["seed"] = m.seed;
  j["similarity_matrix"] = m.similarity_matrix;
  return j;
}

ordered_json dataset_to_json(const DatasetConfig& d) {
  ordered_json j;
  j["seed"] = d.seed;
  j["n_train"] = d.n_train;
  j["n_test"] = d.n_test;
  return j;
}

std::optional<int> tau_of(const TrainConfig& c) {
  if (augmentation_of(c.mechanism) == AugmentMechanism::None) return std::nullopt;
  return c.tau;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(std::string_view s) {
  try {
    std::size_t used = 0;
    const std::string str(s);
    const double v = std::stod(str, &used);
    if (used != str.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw FormatError("not a number: '" + std::string(s) + "'");
  }
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw FormatError("not an integer: '" + std::string(s) + "'");
  return v;
}

std::optional<double> opt_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  return parse_double(s);
}

std::string opt_str(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

std::vector<std::string> read_lines(const fs::path& path, std::string_view header) {
  std::istringstream in(io::read_text(path));
  std::string line;
  std::vector<std::string> out;
  if (!std::getline(in, line) || line != header)
    throw FormatError(path.string() + ": unexpected header");
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace

double parse_budget(std::string_view text) {
  const auto slash = text.find('/');
  double v = 0.0;
  try {
    if (slash == std::string_view::npos) {
      v = parse_double(text);
    } else {
      const double num = parse_double(text.substr(0, slash)), den = parse_double(text.substr(slash + 1));
      if (den == 0.0) throw ValidationError("zero denominator in '" + std::string(text) + "'");
      v = num / den;
    }
  } catch (const FormatError& e) {
    throw ValidationError(e.what());
  }
  if (!std::isfinite(v) || v < 0.0) throw ValidationError("budget must be finite and >= 0: '" + std::string(text) + "'");
  return v;
}

std::string content_key(std::string_view canonical) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string train_config_json(const TrainConfig& c) { return train_to_json(c).dump(); }

TrainConfig parse_train_config(std::string_view json_text) {
  try {
    return train_from_json(json::parse(json_text));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
}

AttackConfig parse_attack_config(std::string_view json_text) {
  try {
    return attack_from_json(json::parse(json_text), false);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("attack config: ") + e.what());
  }
}

TrainConfig cell_train_config(const TrainConfig& base, Mechanism m, double value, std::uint64_t seed) {
  TrainConfig c = base;
  c.mechanism = m;
  c.seed = seed;
  switch (m) {
    case Mechanism::St:
      break;
    case Mechanism::At:
      c.eps_adv = value;
      break;
    case Mechanism::Mu:
    case Mechanism::Cm:
    case Mechanism::Co:
    case Mechanism::Ls:
      if (value != std::round(value)) throw ValidationError("tau must be an integer");
      c.tau = static_cast<int>(value);
      break;
    case Mechanism::Ir:
    case Mechanism::SamIr:
      c.lambda_ir = value;
      break;
    case Mechanism::Jr:
    case Mechanism::SamJr:
      c.lambda_jr = value;
      break;
    case Mechanism::Er:
      c.lambda_er = value;
      break;
    case Mechanism::Sam:
      c.rho = value;
      break;
  }
  c.validate();
  return c;
}

double strength_of(const TrainConfig& c) {
  switch (c.mechanism) {
    case Mechanism::St:
      return 0.0;
    case Mechanism::At:
      return c.eps_adv;
    case Mechanism::Mu:
    case Mechanism::Cm:
    case Mechanism::Co:
    case Mechanism::Ls:
      return c.tau;
    case Mechanism::Ir:
    case Mechanism::SamIr:
      return c.lambda_ir;
    case Mechanism::Jr:
    case Mechanism::SamJr:
      return c.lambda_jr;
    case Mechanism::Er:
      return c.lambda_er;
    case Mechanism::Sam:
      return c.rho;
  }
  return 0.0;
}

void ExperimentConfig::validate() const {
  if (dataset.n_train < 100 || dataset.n_test < 100) throw ValidationError("dataset needs at least 100 samples per split");
  if (seeds.empty()) throw ValidationError("at least one surrogate seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ValidationError("surrogate seeds must be distinct");
  for (const auto& g : grid) {
    if (g.values.empty()) throw ValidationError("grid entry '" + std::string(mechanism_name(g.mechanism)) + "' has no values");
    for (double v : g.values) cell_train_config(base, g.mechanism, v, 0);
  }
  for (const auto& a : attacks) a.config.validate();
  if (metrics.n_eval == 0 || metrics.n_eval > dataset.n_test) throw ValidationError("metrics.n_eval must be in [1, n_test]");
  if (metrics.n_smooth == 0 || metrics.n_smooth > metrics.n_eval)
    throw ValidationError("metrics.n_smooth must be in [1, n_eval]");
  if (metrics.n_sim == 0 || metrics.n_sim > metrics.n_eval) throw ValidationError("metrics.n_sim must be in [1, n_eval]");
  metrics.power.validate();
}

ExperimentConfig ExperimentConfig::parse(std::string_view json_text) {
  ExperimentConfig c;
  try {
    const nlohmann::json j = nlohmann::json::parse(json_text);
    check_keys(j, "config", {"dataset", "surrogate", "targets", "attacks", "metrics"});
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      check_keys(d, "dataset", {"seed", "n_train", "n_test"});
      read_opt(d, "seed", c.dataset.seed);
      read_opt(d, "n_train", c.dataset.n_train);
      read_opt(d, "n_test", c.dataset.n_test);
    }
    const auto& s = j.at("surrogate");
    check_keys(s, "surrogate", {"arch", "seeds", "train", "grid"});
    if (s.contains("arch")) c.surrogate_arch = parse_arch(s.at("arch").get<std::string>());
    read_opt(s, "seeds", c.seeds);
    if (s.contains("train")) {
      if (s.at("train").contains("mechanism") || s.at("train").contains("seed"))
        throw ValidationError("surrogate.train sets mechanism and seed through the grid and seeds");
      c.base = train_from_json(s.at("train"));
    }
    for (const auto& g : s.at("grid")) {
      check_keys(g, "grid entry", {"mechanism", "values"});
      GridEntry e;
      e.mechanism = parse_mechanism(g.at("mechanism").get<std::string>());
      for (const auto& v : g.at("values")) e.values.push_back(number_or_fraction(v));
      c.grid.push_back(std::move(e));
    }
    if (j.contains("targets"))
      for (const auto& t : j.at("targets")) {
        check_keys(t, "target", {"arch", "seed"});
        c.targets.push_back({parse_arch(t.at("arch").get<std::string>()), t.at("seed").get<std::uint64_t>()});
      }
    if (j.contains("attacks"))
      for (const auto& a : j.at("attacks")) {
        AttackEntry e;
        e.config = attack_from_json(a, true);
        if (e.config.targeted) throw ValidationError("attack entries are untargeted; set with_targeted instead");
        read_opt(a, "with_targeted", e.with_targeted);
        c.attacks.push_back(e);
      }
    if (j.contains("metrics")) {
      const auto& m = j.at("metrics");
      check_keys(m, "metrics", {"n_eval", "n_smooth", "n_sim", "power_iters", "power_tol", "seed", "similarity_matrix"});
      read_opt(m, "n_eval", c.metrics.n_eval);
      read_opt(m, "n_smooth", c.metrics.n_smooth);
      read_opt(m, "n_sim", c.metrics.n_sim);
      read_opt(m, "power_iters", c.metrics.power.max_iters);
      read_opt(m, "power_tol", c.metrics.power.tol);
      read_opt(m, "seed", c.metrics.seed);
      read_opt(m, "similarity_matrix", c.metrics.similarity_matrix);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("config not found: " + path.string());
  return parse(io::read_text(path));
}

std::string ExperimentConfig::json() const {
  ordered_json j;
  j["dataset"] = dataset_to_json(dataset);
  ordered_json s;
  s["arch"] = arch_name(surrogate_arch);
  s["seeds"] = seeds;
  ordered_json base_json = train_to_json(base);
  base_json.erase("mechanism");
  base_json.erase("seed");
  s["train"] = base_json;
  s["grid"] = ordered_json::array();
  for (const auto& g : grid) s["grid"].push_back({{"mechanism", mechanism_name(g.mechanism)}, {"values", g.values}});
  j["surrogate"] = s;
  j["targets"] = ordered_json::array();
  for (const auto& t : targets) j["targets"].push_back({{"arch", arch_name(t.arch)}, {"seed", t.seed}});
  j["attacks"] = ordered_json::array();
  for (const auto& a : attacks) {
    ordered_json aj = ordered_json::parse(a.config.json());
    aj.erase("targeted");
    aj["with_targeted"] = a.with_targeted;
    j["attacks"].push_back(aj);
  }
  j["metrics"] = metrics_to_json(metrics);
  return j.dump(2);
}

std::string format_number(double v) {
  if (v == 0.0) return "0";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string MetricsRow::csv() const {
  std::ostringstream os;
  os << mechanism << ',' << (tau ? std::to_string(*tau) : "") << ',' << format_number(param_value) << ',' << seed
     << ',' << surrogate_arch << ',' << target_arch << ',' << norm << ',' << format_number(eps) << ','
     << format_number(asr_u) << ',' << opt_str(asr_t) << ',' << format_number(fool_prob) << ','
     << format_number(nat_risk_s) << ',' << format_number(nat_risk_t) << ',' << format_number(smooth_mean) << ','
     << format_number(smooth_max) << ',' << format_number(sim_mean) << ',' << format_number(sim_min) << ','
     << format_number(c_f) << ',' << format_number(c_g) << ',' << opt_str(bound);
  return os.str();
}

MetricsRow MetricsRow::parse(std::string_view line) {
  const auto f = split_csv(line);
  if (f.size() != 20 && f.size() != 21) throw FormatError("metrics row needs 20 fields: " + std::string(line));
  MetricsRow r;
  r.mechanism = f[0];
  if (!f[1].empty()) r.tau = static_cast<int>(parse_u64(f[1]));
  r.param_value = parse_double(f[2]);
  r.seed = parse_u64(f[3]);
  r.surrogate_arch = f[4];
  r.target_arch = f[5];
  r.norm = f[6];
  r.eps = parse_double(f[7]);
  r.asr_u = parse_double(f[8]);
  r.asr_t = opt_double(f[9]);
  r.fool_prob = parse_double(f[10]);
  r.nat_risk_s = parse_double(f[11]);
  r.nat_risk_t = parse_double(f[12]);
  r.smooth_mean = parse_double(f[13]);
  r.smooth_max = parse_double(f[14]);
  r.sim_mean = parse_double(f[15]);
  r.sim_min = parse_double(f[16]);
  r.c_f = parse_double(f[17]);
  r.c_g = parse_double(f[18]);
  r.bound = opt_double(f[19]);
  if (f.size() == 21) r.n = parse_u64(f[20]);
  return r;
}

std::string SurrogateRow::csv() const {
  std::ostringstream os;
  os << mechanism << ',' << (tau ? std::to_string(*tau) : "") << ',' << format_number(param_value) << ',' << seed
     << ',' << arch << ',' << format_number(test_acc) << ',' << format_number(smooth_mean) << ','
     << format_number(smooth_max) << ',' << format_number(jac_norm) << ',' << format_number(grad_norm);
  return os.str();
}

SurrogateRow SurrogateRow::parse(std::string_view line) {
  const auto f = split_csv(line);
  if (f.size() != 10) throw FormatError("surrogate row needs 10 fields: " + std::string(line));
  SurrogateRow r;
  r.mechanism = f[0];
  if (!f[1].empty()) r.tau = static_cast<int>(parse_u64(f[1]));
  r.param_value = parse_double(f[2]);
  r.seed = parse_u64(f[3]);
  r.arch = f[4];
  r.test_acc = parse_double(f[5]);
  r.smooth_mean = parse_double(f[6]);
  r.smooth_max = parse_double(f[7]);
  r.jac_norm = parse_double(f[8]);
  r.grad_norm = parse_double(f[9]);
  return r;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : rows) out += r.csv() + '\n';
  return out;
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("metrics CSV not found: " + path.string());
  std::vector<MetricsRow> rows;
  for (const auto& line : read_lines(path, kMetricsHeader)) rows.push_back(MetricsRow::parse(line));
  return rows;
}

std::vector<SurrogateRow> read_surrogates_csv(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("surrogate CSV not found: " + path.string());
  std::vector<SurrogateRow> rows;
  for (const auto& line : read_lines(path, kSurrogateHeader)) rows.push_back(SurrogateRow::parse(line));
  return rows;
}

Dataset evaluation_set(const Dataset& test, std::size_t n) {
  if (n > test.size()) throw ValidationError("evaluation set larger than the test split");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return test.subset(idx);
}

MetricsRow measure_cell(const ParamSet& surrogate, const ParamSet& target, const AdvSet& untargeted,
                        const AdvSet* targeted, const SmoothnessEstimate& smooth_s,
                        const SmoothnessEstimate& smooth_t, const AttackConfig& attack_cfg,
                        const MetricsConfig& metrics) {
  const TransferStats stats = asr(surrogate, target, untargeted);
  MetricsRow r;
  r.surrogate_arch = arch_name(surrogate.arch);
  r.target_arch = arch_name(target.arch);
  r.norm = norm_name(attack_cfg.norm);
  r.eps = attack_cfg.eps;
  r.asr_u = stats.asr_untargeted;
  if (targeted) r.asr_t = asr(surrogate, target, *targeted).asr_targeted;
  r.fool_prob = stats.fool_prob;
  r.nat_risk_s = stats.gamma_f;
  r.nat_risk_t = stats.gamma_g;
  r.smooth_mean = smooth_s.mean;
  r.smooth_max = smooth_s.max;
  r.n = stats.n;

  const Dataset eval{untargeted.clean, untargeted.labels, Split::Test};
  const auto sim = similarity_estimate(surrogate, target, eval, std::min(metrics.n_sim, eval.size()), metrics.seed);
  r.sim_mean = sim.mean;
  r.sim_min = sim.min;

  const double eps_l2 = attack_cfg.norm == Norm::L2 ? attack_cfg.eps : max_l2_perturbation(untargeted);
  const BoundTerms terms = bound_terms(surrogate, target, untargeted, smooth_s.max, smooth_t.max, eps_l2);
  r.c_f = terms.c_f;
  r.c_g = terms.c_g;
  if (eps_l2 > terms.c_g)
    r.bound = transfer_lower_bound(1.0 - stats.fool_prob, stats.gamma_f, stats.gamma_g, terms.c_f, terms.c_g,
                                   sim.min, eps_l2);
  return r;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1, jobs), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        {
          std::lock_guard lock(mu);
          if (failure) return;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

Experiment::Experiment(ExperimentConfig config, fs::path out, int jobs, Logger log)
    : config_(std::move(config)), out_(std::move(out)), jobs_(jobs), log_(std::move(log)) {
  config_.validate();
  auto [tr, te] = glyphset_generate(config_.dataset.seed, config_.dataset.n_train, config_.dataset.n_test);
  train_ = std::move(tr);
  test_ = std::move(te);
  eval_ = evaluation_set(test_, config_.metrics.n_eval);
}

const Dataset& Experiment::train_set() const { return train_; }
const Dataset& Experiment::eval_set() const { return eval_; }

void Experiment::log(const std::string& msg) const {
  static std::mutex mu;
  if (!log_) return;
  std::lock_guard lock(mu);
  log_(msg);
}

namespace {

std::string model_key(Arch arch, const TrainConfig& c, const DatasetConfig& d) {
  ordered_json j;
  j["arch"] = arch_name(arch);
  j["dataset"] = dataset_to_json(d);
  j["train"] = train_to_json(c);
  return content_key(j.dump());
}

std::string cell_label(const ModelCell& c) {
  std::ostringstream os;
  os << c.role << ' ' << arch_name(c.arch) << ' ' << mechanism_name(c.config.mechanism) << '=' << format_number(c.value)
     << " seed " << c.config.seed;
  return os.str();
}

}  // namespace

std::vector<ModelCell> Experiment::surrogate_cells() const {
  std::vector<ModelCell> cells;
  for (auto seed : config_.seeds)
    for (const auto& g : config_.grid)
      for (double v : g.values) {
        ModelCell c{"surrogate", config_.surrogate_arch, cell_train_config(config_.base, g.mechanism, v, seed), v, ""};
        c.key = model_key(c.arch, c.config, config_.dataset);
        cells.push_back(std::move(c));
      }
  return cells;
}

std::vector<ModelCell> Experiment::target_cells() const {
  std::vector<ModelCell> cells;
  for (const auto& t : config_.targets) {
    ModelCell c{"target", t.arch, cell_train_config(config_.base, Mechanism::St, 0.0, t.seed), 0.0, ""};
    c.key = model_key(c.arch, c.config, config_.dataset);
    cells.push_back(std::move(c));
  }
  return cells;
}

fs::path Experiment::checkpoint_path(const ModelCell& cell) const { return out_ / "models" / (cell.key + ".tlab"); }

fs::path Experiment::advset_dir(const ModelCell& surrogate, const AttackConfig& cfg) const {
  return out_ / "advsets" / content_key(surrogate.key + cfg.json() + std::to_string(config_.metrics.n_eval));
}

fs::path Experiment::row_path(const ModelCell& surrogate, const ModelCell& target, const AttackEntry& a) const {
  return out_ / "rows" /
         (content_key(surrogate.key + target.key + a.config.json() + (a.with_targeted ? "t" : "u") +
                      metrics_to_json(config_.metrics).dump()) +
          ".csv");
}

ParamSet Experiment::model(const ModelCell& cell, SweepSummary* summary) {
  const fs::path path = checkpoint_path(cell);
  const fs::path meta_path = out_ / "models" / (cell.key + ".json");
  ordered_json meta;
  meta["arch"] = arch_name(cell.arch);
  meta["dataset"] = dataset_to_json(config_.dataset);
  meta["train"] = train_to_json(cell.config);
  const std::string meta_text = meta.dump(2) + "\n";
  if (fs::exists(path)) {
    if (fs::exists(meta_path) && io::read_text(meta_path) != meta_text)
      throw ValidationError("hash collision: " + meta_path.string() + " describes a different config");
    if (summary) ++summary->models_cached;
    return load(path, cell.arch);
  }
  log("train " + cell_label(cell));
  std::string epochs;
  TrainResult r = train(cell.arch, cell.config, train_, &test_, [&](const EpochLog& e) { epochs += e.json() + "\n"; });
  io::write_text_atomic(meta_path, meta_text);
  io::write_text_atomic(out_ / "models" / (cell.key + ".log"), epochs);
  save(r.params, path);
  if (summary) ++summary->models_trained;
  return std::move(r.params);
}

AdvSet Experiment::advset(const ModelCell& surrogate, const ParamSet& params, const AttackConfig& cfg,
                          SweepSummary* summary) {
  const fs::path dir = advset_dir(surrogate, cfg);
  if (fs::exists(dir / "meta.json")) return load_advset(dir);
  log("attack " + cell_label(surrogate) + " " + std::string(norm_name(cfg.norm)) + " eps " + format_number(cfg.eps) +
      (cfg.targeted ? " targeted" : ""));
  AdvSet set = attack(params, eval_.images, eval_.labels, cfg);
  save_advset(set, cfg, dir);
  if (summary) ++summary->advsets_built;
  return set;
}

SmoothnessEstimate Experiment::smoothness(const ModelCell& cell, const ParamSet& params) {
  const fs::path path =
      out_ / "measures" / (content_key(cell.key + metrics_to_json(config_.metrics).dump()) + ".smooth.json");
  if (fs::exists(path)) {
    const json j = json::parse(io::read_text(path));
    return summarize_smoothness(j.at("values").get<std::vector<double>>(), config_.metrics.power);
  }
  auto s = model_smoothness(params, eval_, config_.metrics.n_smooth, config_.metrics.seed, config_.metrics.power);
  ordered_json j;
  j["values"] = s.values;
  io::write_text_atomic(path, j.dump() + "\n");
  return s;
}

SurrogateRow Experiment::surrogate_row(const ModelCell& cell, const ParamSet& params) {
  const fs::path path =
      out_ / "measures" / (content_key(cell.key + metrics_to_json(config_.metrics).dump()) + ".surrogate.csv");
  if (fs::exists(path)) {
    std::string text = io::read_text(path);
    while (!text.empty() && text.back() == '\n') text.pop_back();
    return SurrogateRow::parse(text);
  }
  const auto s = smoothness(cell, params);
  SurrogateRow r;
  r.mechanism = mechanism_name(cell.config.mechanism);
  r.tau = tau_of(cell.config);
  r.param_value = cell.value;
  r.seed = cell.config.seed;
  r.arch = arch_name(cell.arch);
  r.test_acc = accuracy(params, test_);
  r.smooth_mean = s.mean;
  r.smooth_max = s.max;
  r.jac_norm = mean_input_jacobian_norm(params, eval_.images);
  r.grad_norm = mean_input_gradient_norm(params, eval_.images, eval_.labels);
  io::write_text_atomic(path, r.csv() + "\n");
  return r;
}

SweepSummary Experiment::train_all() {
  std::vector<ModelCell> cells = target_cells();
  for (auto& c : surrogate_cells()) cells.push_back(std::move(c));
  std::vector<SweepSummary> per(cells.size());
  parallel_for(cells.size(), jobs_, [&](std::size_t i) { model(cells[i], &per[i]); });
  SweepSummary total;
  for (const auto& s : per) {
    total.models_trained += s.models_trained;
    total.models_cached += s.models_cached;
  }
  return total;
}

SweepSummary Experiment::run() {
  SweepSummary total = train_all();
  const auto surrogates = surrogate_cells();
  const auto targets = target_cells();

  std::vector<ParamSet> target_params(targets.size());
  std::vector<SmoothnessEstimate> target_smooth(targets.size());
  parallel_for(targets.size(), jobs_, [&](std::size_t i) {
    target_params[i] = model(targets[i], nullptr);
    target_smooth[i] = smoothness(targets[i], target_params[i]);
  });

  const std::size_t per_surrogate = targets.size() * config_.attacks.size();
  std::vector<MetricsRow> rows(surrogates.size() * per_surrogate);
  std::vector<SurrogateRow> srows(surrogates.size());
  std::vector<SweepSummary> per(surrogates.size());
  parallel_for(surrogates.size(), jobs_, [&](std::size_t si) {
    const ModelCell& sc = surrogates[si];
    const ParamSet params = model(sc, nullptr);
    srows[si] = surrogate_row(sc, params);
    const SmoothnessEstimate smooth = smoothness(sc, params);
    for (std::size_t ai = 0; ai < config_.attacks.size(); ++ai) {
      const AttackEntry& a = config_.attacks[ai];
      std::optional<AdvSet> adv_u, adv_t;
      AttackConfig tcfg = a.config;
      tcfg.targeted = true;
      for (std::size_t ti = 0; ti < targets.size(); ++ti) {
        MetricsRow& row = rows[si * per_surrogate + ai * targets.size() + ti];
        const fs::path rp = row_path(sc, targets[ti], a);
        if (fs::exists(rp)) {
          std::string text = io::read_text(rp);
          while (!text.empty() && text.back() == '\n') text.pop_back();
          row = MetricsRow::parse(text);
          ++per[si].rows_cached;
          continue;
        }
        if (!adv_u) adv_u = advset(sc, params, a.config, &per[si]);
        if (a.with_targeted && !adv_t) adv_t = advset(sc, params, tcfg, &per[si]);
        row = measure_cell(params, target_params[ti], *adv_u, adv_t ? &*adv_t : nullptr, smooth, target_smooth[ti],
                           a.config, config_.metrics);
        row.mechanism = mechanism_name(sc.config.mechanism);
        row.tau = tau_of(sc.config);
        row.param_value = sc.value;
        row.seed = sc.config.seed;
        io::write_text_atomic(rp, row.csv() + "," + std::to_string(row.n) + "\n");
        ++per[si].rows_measured;
      }
    }
  });
  for (const auto& s : per) {
    total.advsets_built += s.advsets_built;
    total.rows_measured += s.rows_measured;
    total.rows_cached += s.rows_cached;
  }
  io::write_text_atomic(out_ / "metrics.csv", metrics_csv(rows));
  std::string scsv(kSurrogateHeader);
  scsv += '\n';
  for (const auto& r : srows) scsv += r.csv() + '\n';
  io::write_text_atomic(out_ / "surrogates.csv", scsv);

  if (config_.metrics.similarity_matrix) {
    std::vector<std::size_t> first;
    for (std::size_t i = 0; i < surrogates.size(); ++i)
      if (surrogates[i].config.seed == config_.seeds.front()) first.push_back(i);
    std::vector<Tensor> grads(first.size());
    const auto idx = sample_indices(eval_.size(), config_.metrics.n_sim, config_.metrics.seed);
    const Dataset sample = eval_.subset(idx);
    parallel_for(first.size(), jobs_, [&](std::size_t k) {
      grads[k] = input_gradients(model(surrogates[first[k]], nullptr), sample.images, sample.labels);
    });
    std::ostringstream os;
    os << "model";
    std::vector<std::string> names;
    for (auto i : first) {
      names.push_back(std::string(mechanism_name(surrogates[i].config.mechanism)) + "=" +
                      format_number(surrogates[i].value));
      os << ',' << names.back();
    }
    os << '\n';
    const std::size_t d = kImagePixels;
    for (std::size_t a = 0; a < first.size(); ++a) {
      os << names[a];
      for (std::size_t b = 0; b < first.size(); ++b) {
        double sum = 0.0;
        std::size_t used = 0;
        for (std::size_t i = 0; i < sample.size(); ++i) {
          try {
            sum += cosine_similarity({grads[a].data() + i * d, d}, {grads[b].data() + i * d, d});
            ++used;
          } catch (const NumericError&) {
          }
        }
        os << ',' << (used ? format_number(sum / static_cast<double>(used)) : "");
      }
      os << '\n';
    }
    io::write_text_atomic(out_ / "similarity_matrix.csv", os.str());
  }
  return total;
}

}  // namespace tlab

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "tlab/error.hpp"
#include "tlab/experiment.hpp"
#include "tlab/io.hpp"
#include "tlab/stats.hpp"

namespace tlab {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

bool same(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)); }

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string group_key(const MetricsRow& r) { return r.target_arch + "/" + r.norm + "/" + format_number(r.eps); }

template <class F>
std::optional<double> guarded(F&& f) {
  try {
    return f();
  } catch (const Error&) {
    return std::nullopt;
  }
}

CorrelationGroup correlate_group(std::string key, const std::vector<const MetricsRow*>& rows, std::size_t perms,
                                 std::uint64_t seed) {
  CorrelationGroup g;
  g.key = std::move(key);
  g.n = rows.size();
  std::vector<double> acc, fp, ms, gs, asr;
  for (const auto* r : rows) {
    acc.push_back(1.0 - r->nat_risk_s);
    fp.push_back(r->fool_prob);
    ms.push_back(-r->smooth_mean);
    gs.push_back(r->sim_mean);
    asr.push_back(r->asr_u);
  }
  g.r["acc"] = guarded([&] { return pearson(acc, asr); });
  g.r["fp"] = guarded([&] { return pearson(fp, asr); });
  g.r["ms"] = guarded([&] { return pearson(ms, asr); });
  g.r["gs"] = guarded([&] { return pearson(gs, asr); });
  g.p_gs = guarded([&] { return permutation_p_value(gs, asr, perms, seed); });
  g.r2_ms_gs = guarded([&] { return ols_r2({ms, gs}, asr); });
  g.r2_all = guarded([&] { return ols_r2({acc, fp, ms, gs}, asr); });
  return g;
}

ordered_json opt_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

// Mean and sd of values grouped by a key, in first-seen key order.
template <class Key>
struct Grouped {
  std::vector<Key> order;
  std::map<Key, std::vector<double>> values;
  void add(const Key& k, double v) {
    if (!values.count(k)) order.push_back(k);
    values[k].push_back(v);
  }
};

// AT strength of a row: st counts as eps 0.
std::optional<double> at_eps(std::string_view mechanism, double value) {
  if (mechanism == "st") return 0.0;
  if (mechanism == "at") return value;
  return std::nullopt;
}

std::string pct(double v) { return fmt("%.2f%%", 100.0 * v); }

}  // namespace

std::vector<CorrelationGroup> correlate(const std::vector<MetricsRow>& rows, std::size_t permutations,
                                        std::uint64_t seed) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const MetricsRow*>> groups;
  std::vector<const MetricsRow*> all;
  for (const auto& r : rows) {
    const auto k = group_key(r);
    if (!groups.count(k)) order.push_back(k);
    groups[k].push_back(&r);
    all.push_back(&r);
  }
  std::vector<CorrelationGroup> out;
  for (const auto& k : order) out.push_back(correlate_group(k, groups[k], permutations, seed));
  out.push_back(correlate_group("all", all, permutations, seed));
  return out;
}

std::string correlation_json(const std::vector<CorrelationGroup>& groups, const std::vector<MetricsRow>& rows) {
  ordered_json j;
  j["factors"] = {{"acc", "1 - nat_risk_s"}, {"fp", "fool_prob"}, {"ms", "-smooth_mean"}, {"gs", "sim_mean"}};
  j["response"] = "asr_u";
  std::map<std::string, std::size_t> roster;
  for (const auto& r : rows) ++roster[r.mechanism];
  j["roster"] = roster;
  j["groups"] = ordered_json::array();
  for (const auto& g : groups) {
    ordered_json gj;
    gj["group"] = g.key;
    gj["n"] = g.n;
    ordered_json rj;
    for (const auto& [k, v] : g.r) rj[k] = opt_json(v);
    gj["pearson"] = rj;
    gj["p_gs"] = opt_json(g.p_gs);
    gj["r2_ms_gs"] = opt_json(g.r2_ms_gs);
    gj["r2_all"] = opt_json(g.r2_all);
    j["groups"].push_back(gj);
  }
  return j.dump(2) + "\n";
}

std::vector<fs::path> write_report(const std::vector<MetricsRow>& rows, const std::vector<SurrogateRow>& surrogates,
                                   const fs::path& similarity_matrix, const fs::path& dir) {
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    io::write_text_atomic(dir / name, text);
    written.push_back(dir / name);
  };

  {
    using K = std::tuple<std::string, std::string, double, double>;
    Grouped<K> g;
    for (const auto& r : rows)
      if (auto e = at_eps(r.mechanism, r.param_value)) g.add({r.target_arch, r.norm, r.eps, *e}, r.asr_u);
    std::sort(g.order.begin(), g.order.end());
    std::string csv = "target_arch,norm,eps,at_eps,asr_u_mean,asr_u_sd,n\n";
    for (const auto& k : g.order) {
      const auto& v = g.values[k];
      csv += std::get<0>(k) + ',' + std::get<1>(k) + ',' + format_number(std::get<2>(k)) + ',' +
             format_number(std::get<3>(k)) + ',' + format_number(mean_of(v)) + ',' + format_number(sd_of(v)) + ',' +
             std::to_string(v.size()) + '\n';
    }
    emit("asr_vs_at_eps.csv", csv);
  }
  {
    Grouped<double> g;
    for (const auto& s : surrogates)
      if (auto e = at_eps(s.mechanism, s.param_value)) g.add(*e, s.smooth_mean);
    std::sort(g.order.begin(), g.order.end());
    std::string csv = "at_eps,smooth_mean,smooth_sd,n\n";
    for (double k : g.order)
      csv += format_number(k) + ',' + format_number(mean_of(g.values[k])) + ',' + format_number(sd_of(g.values[k])) +
             ',' + std::to_string(g.values[k].size()) + '\n';
    emit("smoothness_vs_at_eps.csv", csv);
  }
  // Similarity does not depend on the attack, so keep one row per (surrogate, target).
  std::vector<const MetricsRow*> unique;
  {
    std::set<std::tuple<std::string, double, std::uint64_t, std::string>> seen;
    for (const auto& r : rows)
      if (seen.insert({r.mechanism, r.param_value, r.seed, r.target_arch}).second) unique.push_back(&r);
  }
  {
    using K = std::pair<std::string, double>;
    Grouped<K> g;
    for (const auto* r : unique)
      if (auto e = at_eps(r->mechanism, r->param_value)) g.add({r->target_arch, *e}, r->sim_mean);
    std::sort(g.order.begin(), g.order.end());
    std::string csv = "target_arch,at_eps,sim_mean,sim_sd,n\n";
    for (const auto& k : g.order)
      csv += k.first + ',' + format_number(k.second) + ',' + format_number(mean_of(g.values[k])) + ',' +
             format_number(sd_of(g.values[k])) + ',' + std::to_string(g.values[k].size()) + '\n';
    emit("similarity_vs_at_eps.csv", csv);
  }
  {
    using K = std::tuple<std::string, int, std::string>;
    Grouped<K> sim, smooth;
    for (const auto* r : unique)
      if (r->mechanism == "st" || r->tau) {
        const K k{r->mechanism, r->tau.value_or(0), r->target_arch};
        sim.add(k, r->sim_mean);
        smooth.add(k, r->smooth_mean);
      }
    std::sort(sim.order.begin(), sim.order.end());
    std::string csv = "mechanism,tau,target_arch,sim_mean,sim_sd,smooth_mean,smooth_sd,n\n";
    for (const auto& k : sim.order)
      csv += std::get<0>(k) + ',' + std::to_string(std::get<1>(k)) + ',' + std::get<2>(k) + ',' +
             format_number(mean_of(sim.values[k])) + ',' + format_number(sd_of(sim.values[k])) + ',' +
             format_number(mean_of(smooth.values[k])) + ',' + format_number(sd_of(smooth.values[k])) + ',' +
             std::to_string(sim.values[k].size()) + '\n';
    emit("augmentation.csv", csv);
  }
  {
    using K = std::pair<std::string, double>;
    Grouped<K> smooth, jac, grad;
    static const std::set<std::string> regs = {"st", "ir", "jr", "er", "sam", "sam_ir", "sam_jr"};
    for (const auto& s : surrogates)
      if (regs.count(s.mechanism)) {
        smooth.add({s.mechanism, s.param_value}, s.smooth_mean);
        jac.add({s.mechanism, s.param_value}, s.jac_norm);
        grad.add({s.mechanism, s.param_value}, s.grad_norm);
      }
    std::sort(smooth.order.begin(), smooth.order.end());
    std::string csv = "mechanism,param_value,smooth_mean,smooth_sd,jac_norm,grad_norm,n\n";
    for (const auto& k : smooth.order)
      csv += k.first + ',' + format_number(k.second) + ',' + format_number(mean_of(smooth.values[k])) + ',' +
             format_number(sd_of(smooth.values[k])) + ',' + format_number(mean_of(jac.values[k])) + ',' +
             format_number(mean_of(grad.values[k])) + ',' + std::to_string(smooth.values[k].size()) + '\n';
    emit("regularization.csv", csv);
  }
  if (!similarity_matrix.empty() && fs::exists(similarity_matrix))
    emit("similarity_matrix.csv", io::read_text(similarity_matrix));
  return written;
}

std::vector<CriterionResult> sweep_criteria(const std::vector<MetricsRow>& rows,
                                            const std::vector<SurrogateRow>& surrogates,
                                            const CriteriaOptions& o) {
  std::vector<CriterionResult> out;
  const std::string arch = surrogates.empty() ? "" : surrogates.front().arch;
  auto at_budget = [&](const MetricsRow& r) { return r.norm == "linf" && same(r.eps, o.eps); };
  std::set<std::uint64_t> seed_set;
  for (const auto& s : surrogates) seed_set.insert(s.seed);
  const std::size_t n_seeds = seed_set.size();
  auto most = [&](std::size_t k) { return n_seeds > 0 && 5 * k >= 4 * n_seeds; };

  {
    CriterionResult c{4, "bound soundness over the sweep", false, ""};
    std::size_t cells = 0, violations = 0;
    double worst = -1e300;
    const double slack = 2.0 / std::sqrt(static_cast<double>(o.n_eval));
    for (const auto& r : rows)
      if (r.bound) {
        ++cells;
        worst = std::max(worst, *r.bound - r.asr_u);
        violations += *r.bound > r.asr_u + slack;
      }
    c.passed = cells >= o.min_bound_cells && violations == 0;
    c.detail = std::to_string(cells) + " cells with eps > c_G (need " + std::to_string(o.min_bound_cells) + "), " +
               std::to_string(violations) + " violations" +
               (cells ? ", max bound - rate " + fmt("%.4f", worst) + " vs slack " + fmt("%.4f", slack) : "");
    out.push_back(c);
  }
  {
    CriterionResult c{5, "AT smoothness strictly decreasing in eps", false, ""};
    const std::vector<double> grid = {0.0, 0.05, 0.1, 0.2, 0.5};
    std::vector<double> means;
    std::string d;
    bool complete = true;
    for (double e : grid) {
      std::vector<double> v;
      for (const auto& s : surrogates)
        if (auto ae = at_eps(s.mechanism, s.param_value); ae && same(*ae, e)) v.push_back(s.smooth_mean);
      if (v.empty()) complete = false;
      means.push_back(mean_of(v));
      d += (d.empty() ? "" : " ") + format_number(e) + ":" + fmt("%.4g", means.back());
    }
    bool dec = complete;
    for (std::size_t i = 1; i < means.size(); ++i) dec = dec && means[i] < means[i - 1];
    c.passed = dec;
    c.detail = complete ? "mean sigma_F " + d : "missing grid points";
    out.push_back(c);
  }
  auto ref_sim = [&](std::string_view mech, double value, std::uint64_t seed) -> std::optional<double> {
    for (const auto& r : rows)
      if (r.target_arch == arch && r.mechanism == mech && same(r.param_value, value) && r.seed == seed)
        return r.sim_mean;
    return std::nullopt;
  };
  {
    CriterionResult c{6, "AT similarity to standard target decays from eps 0 to 0.5", false, ""};
    std::size_t wins = 0, seen = 0;
    for (auto s : seed_set) {
      auto a = ref_sim("st", 0.0, s), b = ref_sim("at", 0.5, s);
      if (!a || !b) continue;
      ++seen;
      wins += *b < *a;
    }
    c.passed = seen == n_seeds && most(wins);
    c.detail = std::to_string(wins) + "/" + std::to_string(n_seeds) + " seeds";
    out.push_back(c);
  }
  {
    CriterionResult c{7, "little-robustness circuit in untargeted ASR", false, ""};
    std::map<double, std::vector<double>> by_eps;
    for (const auto& r : rows)
      if (at_budget(r))
        if (auto e = at_eps(r.mechanism, r.param_value)) by_eps[*e].push_back(r.asr_u);
    if (by_eps.size() < 3) {
      c.detail = "needs at least 3 AT grid points";
    } else {
      std::vector<std::pair<double, double>> curve;
      for (const auto& [e, v] : by_eps) curve.push_back({e, mean_of(v)});
      auto best = std::max_element(curve.begin() + 1, curve.end() - 1,
                                   [](const auto& a, const auto& b) { return a.second < b.second; });
      const double lo = curve.front().second, hi = curve.back().second;
      c.passed = best->second >= lo + 0.02 && best->second >= hi + 0.02;
      std::string d;
      for (const auto& [e, a] : curve) d += (d.empty() ? "" : " ") + format_number(e) + ":" + pct(a);
      c.detail = "ASR by AT eps " + d + "; interior max at " + format_number(best->first);
    }
    out.push_back(c);
  }
  {
    CriterionResult c{8, "augmentations impair similarity to standard target", true, ""};
    for (const char* m : {"mu", "cm", "ls"}) {
      std::size_t wins = 0, seen = 0;
      for (auto s : seed_set) {
        auto a = ref_sim("st", 0.0, s), b = ref_sim(m, 5.0, s);
        if (!a || !b) continue;
        ++seen;
        wins += *b < *a;
      }
      const bool ok = seen == n_seeds && most(wins);
      c.passed = c.passed && ok;
      c.detail += std::string(c.detail.empty() ? "" : ", ") + m + " " + std::to_string(wins) + "/" +
                  std::to_string(n_seeds);
    }
    out.push_back(c);
  }
  {
    CriterionResult c{9, "SAM&JR dominates SAM and JR", false, ""};
    std::optional<double> rho = o.combo_rho;
    std::set<double> sam_values, jr_combo;
    for (const auto& s : surrogates) {
      if (s.mechanism == "sam") sam_values.insert(s.param_value);
      if (s.mechanism == "sam_jr") jr_combo.insert(s.param_value);
    }
    if (!rho && sam_values.size() == 1) rho = *sam_values.begin();
    if (!rho || jr_combo.size() != 1) {
      c.detail = "needs one sam_jr value and a known SAM rho";
    } else {
      const double lambda = *jr_combo.begin();
      std::map<std::string, std::array<std::vector<double>, 3>> per_target;
      for (const auto& r : rows) {
        if (!at_budget(r)) continue;
        int slot = -1;
        if (r.mechanism == "sam_jr") slot = 0;
        if (r.mechanism == "sam" && same(r.param_value, *rho)) slot = 1;
        if (r.mechanism == "jr" && same(r.param_value, lambda)) slot = 2;
        if (slot >= 0) per_target[r.target_arch][slot].push_back(r.asr_u);
      }
      bool each = !per_target.empty();
      double avg[3] = {0, 0, 0};
      std::string d;
      for (const auto& [t, v] : per_target) {
        if (v[0].empty() || v[1].empty() || v[2].empty()) {
          each = false;
          continue;
        }
        const double combo = mean_of(v[0]), sam = mean_of(v[1]), jr = mean_of(v[2]);
        each = each && combo >= std::max(sam, jr) - 0.01;
        for (int k = 0; k < 3; ++k) avg[k] += mean_of(v[k]) / static_cast<double>(per_target.size());
        d += (d.empty() ? "" : "; ") + t + " " + pct(combo) + " vs " + pct(sam) + "/" + pct(jr);
      }
      c.passed = each && avg[0] > std::max(avg[1], avg[2]);
      c.detail = "sam_jr vs sam/jr: " + d + "; average " + pct(avg[0]) + " vs " + pct(avg[1]) + "/" + pct(avg[2]);
    }
    out.push_back(c);
  }
  {
    CriterionResult c{10, "Jacobian and loss-gradient norms rank together over JR", false, ""};
    std::vector<double> jac, grad;
    for (const auto& s : surrogates)
      if (s.mechanism == "jr") {
        jac.push_back(s.jac_norm);
        grad.push_back(s.grad_norm);
      }
    auto rho = guarded([&] { return spearman(jac, grad); });
    c.passed = rho && *rho > 0.0;
    c.detail = rho ? "Spearman " + fmt("%.4f", *rho) + " over " + std::to_string(jac.size()) + " models"
                   : "too few JR models";
    out.push_back(c);
  }
  {
    CriterionResult c{11, "sweep regressions nested and r(GS, ASR) > 0", false, ""};
    const auto groups = correlate(rows, o.permutations, 0);
    bool nested = true;
    std::size_t fitted = 0;
    for (const auto& g : groups)
      if (g.r2_ms_gs && g.r2_all) {
        ++fitted;
        nested = nested && *g.r2_ms_gs <= *g.r2_all + 1e-9;
      }
    const auto& all = groups.back();
    const auto r = all.r.at("gs");
    c.passed = nested && fitted > 0 && r && *r > 0.0 && all.p_gs && *all.p_gs < 0.1;
    c.detail = std::to_string(fitted) + " regressions nested=" + (nested ? "yes" : "no") +
               (r ? ", r(GS,ASR) " + fmt("%.4f", *r) : ", r undefined") +
               (all.p_gs ? " p " + fmt("%.4f", *all.p_gs) : "");
    out.push_back(c);
  }
  return out;
}

}  // namespace tlab

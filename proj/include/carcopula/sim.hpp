#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "copula.hpp"
#include "csv.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "graph.hpp"
#include "inference.hpp"
#include "marginals.hpp"
#include "random.hpp"

namespace carcopula {

/// Parameter groups reported by the simulation study.
enum class ParamGroup { A, B, C, Rho };

inline const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::A: return "a";
    case ParamGroup::B: return "b";
    case ParamGroup::C: return "c";
    case ParamGroup::Rho: return "rho";
  }
  return "?";
}

inline constexpr ParamGroup kParamGroups[] = {ParamGroup::A, ParamGroup::B, ParamGroup::C, ParamGroup::Rho};

/// Posterior summary of one parameter from one replicate fit.
struct PosteriorSummary {
  double mean = 0.0;
  double sd = 0.0;
  double lower = 0.0;  // 2.5% posterior quantile
  double upper = 0.0;  // 97.5% posterior quantile
};

/// What the study keeps from one fitted replicate.
struct ReplicateFit {
  std::vector<PosteriorSummary> a, b, c;
  std::optional<PosteriorSummary> rho;
  double dic = 0.0;
  double waic = 0.0;
  double waic_lppd = 0.0;
};

inline PosteriorSummary summarize_posterior(const Eigen::VectorXd& draws) {
  std::vector<double> v(draws.data(), draws.data() + draws.size());
  const auto s = summarize_draws("", v);
  return {s.mean, s.sd, s.q025, s.q975};
}

inline ReplicateFit summarize_replicate(const ChainOutput& chain, const RegionalPanel& panel, const ArealGraph& graph) {
  ReplicateFit f;
  for (int i = 0; i < chain.n; ++i) {
    f.a.push_back(summarize_posterior(chain.draws.col(i)));
    f.b.push_back(summarize_posterior(chain.draws.col(chain.n + i)));
    f.c.push_back(summarize_posterior(chain.draws.col(2 * chain.n + i)));
  }
  if (chain.has_column("rho")) f.rho = summarize_posterior(chain.column("rho"));
  f.dic = chain_dic(chain, panel, graph).dic;
  f.waic = waic(chain.pointwise_loglik).waic;
  f.waic_lppd = waic(chain.pointwise_loglik, WaicVariant::Lppd).waic;
  return f;
}

using FitFunction =
    std::function<ReplicateFit(const RegionalPanel&, const ArealGraph&, const ModelSpec&, const ChainConfig&)>;

inline ReplicateFit fit_with_chain(const RegionalPanel& panel, const ArealGraph& graph, const ModelSpec& spec,
                                   const ChainConfig& config) {
  return summarize_replicate(run_chain(panel, graph, spec, config), panel, graph);
}

struct MetricSummary {
  double mse = std::numeric_limits<double>::quiet_NaN();
  double avg_sd = std::numeric_limits<double>::quiet_NaN();
  double covp = std::numeric_limits<double>::quiet_NaN();
  long count = 0;
};

/// MSE of the estimates against the truths, mean posterior SD, and the share
/// of credible intervals that contain the truth.
inline MetricSummary metrics(const std::vector<double>& estimates, const std::vector<double>& truths,
                             const std::vector<double>& sds, const std::vector<bool>& ci_hits) {
  const auto m = estimates.size();
  if (truths.size() != m || sds.size() != m || ci_hits.size() != m)
    throw InputError("metrics: inputs must have equal length");
  MetricSummary r;
  r.count = static_cast<long>(m);
  if (m == 0) return r;
  double se = 0.0, sd = 0.0, hits = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    se += (estimates[k] - truths[k]) * (estimates[k] - truths[k]);
    sd += sds[k];
    hits += ci_hits[k] ? 1.0 : 0.0;
  }
  r.mse = se / static_cast<double>(m);
  r.avg_sd = sd / static_cast<double>(m);
  r.covp = hits / static_cast<double>(m);
  return r;
}

/// Interval hit with the open interval (lower, upper).
inline bool interval_contains(const PosteriorSummary& s, double truth) { return s.lower < truth && truth < s.upper; }

struct StudyConfig {
  GammaSvcParams true_params;
  std::vector<double> rho_grid{0.0, 0.5, 0.9};
  int replicates = 10;
  int T = 64;
  std::vector<ModelSpec> variants = all_model_specs();
  ChainConfig chain = ChainConfig::desk_scale();
  std::uint64_t seed = 1;
  unsigned workers = 0;  // 0 selects the hardware concurrency

  void validate(int n_graph) const {
    if (true_params.n() != n_graph) throw InputError("study: true parameters do not match the graph size");
    if (true_params.b.size() != true_params.a.size() || true_params.c.size() != true_params.a.size())
      throw InputError("study: true parameter vectors differ in length");
    if (!((true_params.a.array() > 0).all() && (true_params.b.array() > 0).all()))
      throw InputError("study: true a and b must be positive");
    if (rho_grid.empty()) throw InputError("study: rho grid is empty");
    for (double r : rho_grid)
      if (!(r >= 0.0 && r < 1.0)) throw InputError("study: rho grid values must lie in [0,1)");
    if (replicates < 1) throw InputError("study: replicates must be at least 1");
    if (T < 3) throw InputError("study: T must be at least 3");
    if (variants.empty()) throw InputError("study: no model variants");
    chain.validate();
  }
};

/// Deterministic smooth coefficient field on a graph: the two lowest
/// non-constant Laplacian eigenvectors, rescaled to rainfall-like magnitudes
/// (means 200 to 3000, coefficients of variation 0.15 to 0.45, trends within
/// +-0.1 per standardized year).
inline GammaSvcParams default_true_params(const ArealGraph& graph) {
  const int n = graph.n;
  if (n < 3) throw InputError("default_true_params: graph needs at least 3 regions");
  const Eigen::MatrixXd L = graph.car_matrix(1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L);
  auto unit_field = [&](int k) {
    Eigen::VectorXd v = es.eigenvectors().col(k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    return ((v.array() - v.minCoeff()) / (v.maxCoeff() - v.minCoeff())).matrix().eval();
  };
  const Eigen::VectorXd f1 = unit_field(1), f2 = unit_field(2);
  GammaSvcParams p;
  const Eigen::ArrayXd mean = (std::log(200.0) + f1.array() * std::log(15.0)).exp();
  const Eigen::ArrayXd cv = 0.15 + 0.30 * f2.array();
  p.a = (1.0 / cv.square()).matrix();
  p.b = (1.0 / mean).matrix();
  p.c = (0.1 * (f1.array() - f2.array())).matrix();
  return p;
}

/// Per-region gamma MLEs of a panel, the prescribed truth when data exist.
inline GammaSvcParams true_params_from_panel(const RegionalPanel& panel) {
  return fit_panel_gamma(panel, standardize_time(panel.T())).params;
}

struct ReplicateFailure {
  std::size_t rho_index = 0;
  std::size_t variant_index = 0;
  int replicate = 0;
  std::string message;
};

struct VariantCriteria {
  double dic_mean = 0.0, dic_se = 0.0;
  double waic_mean = 0.0, waic_se = 0.0;
  double waic_lppd_mean = 0.0, waic_lppd_se = 0.0;
  long count = 0;
};

struct StudyTables {
  std::vector<double> rho_grid;
  std::vector<ModelSpec> variants;
  // Indexed [rho][variant]; the rho group is absent for Indep data layers.
  std::vector<std::vector<std::map<ParamGroup, MetricSummary>>> metrics;
  std::vector<std::vector<VariantCriteria>> criteria;
  std::vector<ReplicateFailure> failures;
  std::vector<std::vector<std::vector<std::optional<ReplicateFit>>>> fits;  // [rho][variant][replicate]
  double wall_seconds = 0.0;
};

inline std::uint64_t replicate_seed(std::uint64_t seed, std::size_t rho_index, int replicate) {
  return derive_seed(seed, {static_cast<std::uint64_t>(rho_index), static_cast<std::uint64_t>(replicate)});
}

inline std::uint64_t chain_seed(std::uint64_t seed, std::size_t rho_index, int replicate, std::size_t variant) {
  return derive_seed(seed, {static_cast<std::uint64_t>(rho_index), static_cast<std::uint64_t>(replicate),
                            static_cast<std::uint64_t>(variant) + 1});
}

namespace detail {

inline std::pair<double, double> mean_and_se(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double m = 0.0;
  for (double v : x) m += v;
  m /= n;
  if (x.size() < 2) return {m, std::numeric_limits<double>::quiet_NaN()};
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

inline MetricSummary group_metrics(const std::vector<const ReplicateFit*>& fits, ParamGroup g,
                                   const GammaSvcParams& truth, double rho_true) {
  std::vector<double> est, tru, sds;
  std::vector<bool> hits;
  auto add = [&](const PosteriorSummary& s, double t) {
    est.push_back(s.mean);
    tru.push_back(t);
    sds.push_back(s.sd);
    hits.push_back(interval_contains(s, t));
  };
  for (const auto* f : fits) {
    switch (g) {
      case ParamGroup::A:
        for (int i = 0; i < truth.n(); ++i) add(f->a[static_cast<std::size_t>(i)], truth.a(i));
        break;
      case ParamGroup::B:
        for (int i = 0; i < truth.n(); ++i) add(f->b[static_cast<std::size_t>(i)], truth.b(i));
        break;
      case ParamGroup::C:
        for (int i = 0; i < truth.n(); ++i) add(f->c[static_cast<std::size_t>(i)], truth.c(i));
        break;
      case ParamGroup::Rho: add(*f->rho, rho_true); break;
    }
  }
  auto m = metrics(est, tru, sds, hits);
  if (g == ParamGroup::Rho && rho_true == 0.0) m.covp = std::numeric_limits<double>::quiet_NaN();
  return m;
}

}  // namespace detail

/// Aggregates replicate fits in (rho, variant, replicate) order.
inline void aggregate_study(StudyTables& tables, const StudyConfig& config) {
  const auto R = tables.rho_grid.size(), V = tables.variants.size();
  tables.metrics.assign(R, std::vector<std::map<ParamGroup, MetricSummary>>(V));
  tables.criteria.assign(R, std::vector<VariantCriteria>(V));
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < V; ++v) {
      std::vector<const ReplicateFit*> ok;
      for (const auto& f : tables.fits[r][v])
        if (f) ok.push_back(&*f);
      if (ok.empty()) continue;
      for (ParamGroup g : kParamGroups) {
        if (g == ParamGroup::Rho && !tables.variants[v].car_data()) continue;
        tables.metrics[r][v][g] = detail::group_metrics(ok, g, config.true_params, tables.rho_grid[r]);
      }
      std::vector<double> d, w, wl;
      for (const auto* f : ok) {
        d.push_back(f->dic);
        w.push_back(f->waic);
        wl.push_back(f->waic_lppd);
      }
      auto& c = tables.criteria[r][v];
      std::tie(c.dic_mean, c.dic_se) = detail::mean_and_se(d);
      std::tie(c.waic_mean, c.waic_se) = detail::mean_and_se(w);
      std::tie(c.waic_lppd_mean, c.waic_lppd_se) = detail::mean_and_se(wl);
      c.count = static_cast<long>(ok.size());
    }
  }
}

/// Simulates complete panels for every (rho, replicate) and fits every
/// variant to each. Tasks run on a bounded worker pool; a failed fit is
/// recorded and excluded from the aggregates.
inline StudyTables run_study(const StudyConfig& config, const ArealGraph& graph, const FitFunction& fit = fit_with_chain) {
  config.validate(graph.n);
  const auto start = std::chrono::steady_clock::now();
  const auto R = config.rho_grid.size(), V = config.variants.size();
  const auto S = static_cast<std::size_t>(config.replicates);
  const auto ts = standardize_time(config.T);

  std::vector<std::vector<RegionalPanel>> panels(R);
  for (std::size_t r = 0; r < R; ++r) {
    const auto scaled = scaled_correlation(graph, config.rho_grid[r]);
    for (std::size_t s = 0; s < S; ++s) {
      Rng rng(replicate_seed(config.seed, r, static_cast<int>(s)));
      panels[r].push_back(simulate_panel(rng, scaled, config.true_params, ts));
    }
  }

  StudyTables tables;
  tables.rho_grid = config.rho_grid;
  tables.variants = config.variants;
  tables.fits.assign(R, std::vector<std::vector<std::optional<ReplicateFit>>>(V, std::vector<std::optional<ReplicateFit>>(S)));
  std::vector<std::optional<std::string>> errors(R * V * S);

  const std::size_t tasks = R * V * S;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < tasks; k = next++) {
      const std::size_t r = k / (V * S), v = (k / S) % V, s = k % S;
      ChainConfig cc = config.chain;
      cc.seed = chain_seed(config.seed, r, static_cast<int>(s), v);
      try {
        tables.fits[r][v][s] = fit(panels[r][s], graph, config.variants[v], cc);
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
  };
  unsigned workers = config.workers == 0 ? std::max(1u, std::thread::hardware_concurrency()) : config.workers;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, tasks));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (std::size_t k = 0; k < tasks; ++k)
    if (errors[k]) tables.failures.push_back({k / (V * S), (k / S) % V, static_cast<int>(k % S), *errors[k]});

  aggregate_study(tables, config);
  tables.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return tables;
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

/// Rows ordered by data layer, then true rho, with one column block per prior layer.
inline const std::vector<PriorLayer>& prior_layer_order() {
  static const std::vector<PriorLayer> order{PriorLayer::Indep, PriorLayer::Icar, PriorLayer::Car};
  return order;
}

inline std::optional<std::size_t> variant_index(const StudyTables& t, DataLayer d, PriorLayer p) {
  for (std::size_t v = 0; v < t.variants.size(); ++v)
    if (t.variants[v].data_layer == d && t.variants[v].prior_layer == p) return v;
  return std::nullopt;
}

inline const char* data_layer_name(DataLayer d) { return d == DataLayer::Car ? "CAR" : "Indep"; }
inline const char* prior_layer_name(PriorLayer p) {
  return p == PriorLayer::Car ? "CAR" : p == PriorLayer::Icar ? "ICAR" : "Indep";
}

}  // namespace detail

/// Accuracy table. With `paper_tables`, MSEs of b, c and rho are scaled by
/// 1000 and SDs of b, c and rho by 100.
inline void write_accuracy_csv(std::ostream& out, const StudyTables& t, bool paper_tables = false) {
  csv::Row header{"rho_true", "data_layer", "parameter"};
  for (auto p : detail::prior_layer_order())
    for (const char* m : {"MSE", "SD", "CovP"}) header.push_back(std::string(detail::prior_layer_name(p)) + "_" + m);
  csv::write_row(out, header);
  for (DataLayer d : {DataLayer::Indep, DataLayer::Car}) {
    for (std::size_t r = 0; r < t.rho_grid.size(); ++r) {
      for (ParamGroup g : kParamGroups) {
        if (g == ParamGroup::Rho && d == DataLayer::Indep) continue;
        const bool scaled = paper_tables && g != ParamGroup::A;
        csv::Row row{csv::format_double(t.rho_grid[r]), detail::data_layer_name(d), param_group_name(g)};
        bool any = false;
        for (auto p : detail::prior_layer_order()) {
          const auto v = detail::variant_index(t, d, p);
          const MetricSummary* m = nullptr;
          if (v) {
            const auto it = t.metrics[r][*v].find(g);
            if (it != t.metrics[r][*v].end()) m = &it->second;
          }
          if (m == nullptr) {
            row.insert(row.end(), {"NA", "NA", "NA"});
            continue;
          }
          any = true;
          row.push_back(csv::format_double(scaled ? 1000.0 * m->mse : m->mse));
          row.push_back(csv::format_double(scaled ? 100.0 * m->avg_sd : m->avg_sd));
          row.push_back(csv::format_double(m->covp));
        }
        if (any) csv::write_row(out, row);
      }
    }
  }
}

/// Information-criteria table: mean and standard error over replicates.
inline void write_criteria_csv(std::ostream& out, const StudyTables& t) {
  csv::Row header{"rho_true", "data_layer", "criterion"};
  for (auto p : detail::prior_layer_order()) {
    header.push_back(std::string(detail::prior_layer_name(p)) + "_mean");
    header.push_back(std::string(detail::prior_layer_name(p)) + "_SE");
  }
  csv::write_row(out, header);
  for (std::size_t r = 0; r < t.rho_grid.size(); ++r) {
    for (DataLayer d : {DataLayer::Indep, DataLayer::Car}) {
      for (const char* crit : {"DIC", "WAIC", "WAIC_lppd"}) {
        csv::Row row{csv::format_double(t.rho_grid[r]), detail::data_layer_name(d), crit};
        bool any = false;
        for (auto p : detail::prior_layer_order()) {
          const auto v = detail::variant_index(t, d, p);
          if (!v || t.criteria[r][*v].count == 0) {
            row.insert(row.end(), {"NA", "NA"});
            continue;
          }
          any = true;
          const auto& c = t.criteria[r][*v];
          const std::string name = crit;
          const double mean = name == "DIC" ? c.dic_mean : name == "WAIC" ? c.waic_mean : c.waic_lppd_mean;
          const double se = name == "DIC" ? c.dic_se : name == "WAIC" ? c.waic_se : c.waic_lppd_se;
          row.push_back(csv::format_double(mean));
          row.push_back(csv::format_double(se));
        }
        if (any) csv::write_row(out, row);
      }
    }
  }
}

/// Manifest of the run. Wall time is kept out so identical seeds give
/// identical files.
inline nlohmann::json study_manifest(const StudyConfig& config, const StudyTables& t) {
  nlohmann::json j;
  j["seed"] = config.seed;
  j["replicates"] = config.replicates;
  j["T"] = config.T;
  j["rho_grid"] = config.rho_grid;
  j["variants"] = nlohmann::json::array();
  for (const auto& v : config.variants) j["variants"].push_back(v.name());
  j["chain"] = {{"iterations", config.chain.iterations}, {"burn_in", config.chain.burn_in}, {"thin", config.chain.thin}};
  j["true_params"] = {{"a", std::vector<double>(config.true_params.a.data(), config.true_params.a.data() + config.true_params.n())},
                      {"b", std::vector<double>(config.true_params.b.data(), config.true_params.b.data() + config.true_params.n())},
                      {"c", std::vector<double>(config.true_params.c.data(), config.true_params.c.data() + config.true_params.n())}};
  j["replicate_seeds"] = nlohmann::json::array();
  for (std::size_t r = 0; r < config.rho_grid.size(); ++r) {
    std::vector<std::uint64_t> seeds;
    for (int s = 0; s < config.replicates; ++s) seeds.push_back(replicate_seed(config.seed, r, s));
    j["replicate_seeds"].push_back(seeds);
  }
  j["exclusions"] = nlohmann::json::array();
  for (const auto& f : t.failures)
    j["exclusions"].push_back({{"rho_true", config.rho_grid[f.rho_index]},
                               {"variant", config.variants[f.variant_index].name()},
                               {"replicate", f.replicate},
                               {"error", f.message}});
  j["excluded_count"] = t.failures.size();
  return j;
}

}  // namespace carcopula

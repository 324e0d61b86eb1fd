#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "copula.hpp"
#include "csv.hpp"
#include "error.hpp"
#include "graph.hpp"
#include "inference.hpp"
#include "marginals.hpp"
#include "panel.hpp"
#include "random.hpp"

namespace carcopula {

namespace detail {

inline double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline double variance_of(std::span<const double> x) {
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

/// Batch-means estimate of the long-run variance (spectral density at zero)
/// with batch size floor(sqrt(M)); the trailing remainder is dropped.
inline double batch_means_long_run_variance(std::span<const double> x, const char* who) {
  const auto M = x.size();
  const auto b = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(M))));
  const std::size_t a = b == 0 ? 0 : M / b;
  if (a < 2) throw InputError(std::string(who) + ": series too short for two batches");
  std::vector<double> means(a);
  for (std::size_t k = 0; k < a; ++k) means[k] = mean_of(x.subspan(k * b, b));
  const double overall = mean_of(means);
  double s = 0.0;
  for (double m : means) s += (m - overall) * (m - overall);
  return static_cast<double>(b) * s / static_cast<double>(a - 1);
}

}  // namespace detail

/// Geweke z-score comparing the first `frac_first` and last `frac_last` of a
/// chain, with batch-means standard errors inside each segment.
inline double geweke(std::span<const double> chain, double frac_first = 0.1, double frac_last = 0.5) {
  if (!(frac_first > 0.0 && frac_last > 0.0 && frac_first + frac_last <= 1.0))
    throw InputError("geweke: segment fractions must be positive and non-overlapping");
  const auto M = chain.size();
  const auto n1 = static_cast<std::size_t>(std::floor(frac_first * static_cast<double>(M)));
  const auto n2 = static_cast<std::size_t>(std::floor(frac_last * static_cast<double>(M)));
  if (n1 < 4 || n2 < 4) throw InputError("geweke: chain too short");
  const auto first = chain.subspan(0, n1), last = chain.subspan(M - n2, n2);
  const double v1 = detail::batch_means_long_run_variance(first, "geweke") / static_cast<double>(n1);
  const double v2 = detail::batch_means_long_run_variance(last, "geweke") / static_cast<double>(n2);
  if (!(v1 + v2 > 0.0)) throw InputError("geweke: zero variance chain");
  return (detail::mean_of(first) - detail::mean_of(last)) / std::sqrt(v1 + v2);
}

/// M * sample variance / batch-means long-run variance, capped at M.
inline double ess_batch_means(std::span<const double> chain) {
  const auto M = chain.size();
  if (M < 100) throw InputError("ess_batch_means: need at least 100 draws");
  const double s2 = detail::variance_of(chain);
  const double lrv = detail::batch_means_long_run_variance(chain, "ess_batch_means");
  if (!(s2 > 0.0) || !(lrv > 0.0)) throw InputError("ess_batch_means: degenerate variance");
  return std::min(static_cast<double>(M), static_cast<double>(M) * s2 / lrv);
}

struct DicResult {
  double dbar = 0.0;
  double d_hat = 0.0;
  double p_d = 0.0;
  double dic = 0.0;
};

inline DicResult dic(std::span<const double> deviance, double deviance_at_estimate) {
  if (deviance.empty()) throw InputError("dic: empty deviance series");
  DicResult r;
  r.dbar = detail::mean_of(deviance);
  r.d_hat = deviance_at_estimate;
  r.p_d = r.dbar - r.d_hat;
  r.dic = r.dbar + r.p_d;
  return r;
}

enum class WaicVariant {
  PosteriorMeanLog,  // m_t = posterior mean of log f(Y_t | theta)
  Lppd,              // m_t = log of the posterior mean of f(Y_t | theta)
};

struct WaicResult {
  double waic = 0.0;
  double p_w = 0.0;
  double sum_m = 0.0;
};

/// WAIC over a draws x units matrix of pointwise log-likelihoods; variances
/// use denominator M - 1.
inline WaicResult waic(const Eigen::MatrixXd& pointwise, WaicVariant variant = WaicVariant::PosteriorMeanLog) {
  const Eigen::Index M = pointwise.rows();
  if (M < 2 || pointwise.cols() < 1) throw InputError("waic: need at least 2 draws per unit");
  WaicResult r;
  for (Eigen::Index t = 0; t < pointwise.cols(); ++t) {
    const Eigen::VectorXd col = pointwise.col(t);
    const double mean = col.mean();
    const double var = (col.array() - mean).square().sum() / static_cast<double>(M - 1);
    double m = mean;
    if (variant == WaicVariant::Lppd) {
      const double top = col.maxCoeff();
      m = top + std::log((col.array() - top).exp().mean());
    }
    r.sum_m += m;
    r.p_w += var;
  }
  r.waic = -2.0 * r.sum_m + 2.0 * r.p_w;
  return r;
}

struct QqDiscrepancy {
  double rmse = 0.0;
  double mae = 0.0;
  std::size_t count = 0;
};

/// Distance between sorted PIT values and plotting positions i/(n+1). NaN
/// entries are skipped.
inline QqDiscrepancy qq_discrepancy(std::span<const double> u) {
  std::vector<double> v;
  for (double x : u)
    if (!std::isnan(x)) v.push_back(x);
  if (v.empty()) throw InputError("qq_discrepancy: no values");
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  QqDiscrepancy q;
  q.count = v.size();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = v[i] - static_cast<double>(i + 1) / (n + 1.0);
    q.rmse += d * d;
    q.mae += std::abs(d);
  }
  q.rmse = std::sqrt(q.rmse / n);
  q.mae /= n;
  return q;
}

inline QqDiscrepancy qq_discrepancy(const Eigen::MatrixXd& u) {
  return qq_discrepancy(std::span<const double>(u.data(), static_cast<std::size_t>(u.size())));
}

/// Linear-interpolation sample quantile of sorted values.
inline double sorted_quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw InputError("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct ParameterSummary {
  std::string name;
  double mean = 0.0, sd = 0.0, q025 = 0.0, q975 = 0.0;
  double ess = std::numeric_limits<double>::quiet_NaN();
  double geweke_z = std::numeric_limits<double>::quiet_NaN();
};

inline ParameterSummary summarize_draws(const std::string& name, std::span<const double> x) {
  ParameterSummary s;
  s.name = name;
  s.mean = detail::mean_of(x);
  s.sd = x.size() > 1 ? std::sqrt(detail::variance_of(x)) : 0.0;
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  s.q025 = sorted_quantile(sorted, 0.025);
  s.q975 = sorted_quantile(sorted, 0.975);
  if (s.sd > 0.0 && x.size() >= 100) {
    s.ess = ess_batch_means(x);
    s.geweke_z = geweke(x);
  }
  return s;
}

inline std::vector<ParameterSummary> summarize_columns(const std::vector<std::string>& columns,
                                                       const Eigen::MatrixXd& draws) {
  if (static_cast<Eigen::Index>(columns.size()) != draws.cols())
    throw InputError("summarize_columns: column names do not match the draw matrix");
  std::vector<ParameterSummary> out;
  for (std::size_t j = 0; j < columns.size(); ++j) {
    const Eigen::VectorXd col = draws.col(static_cast<Eigen::Index>(j));
    out.push_back(summarize_draws(columns[j], std::span<const double>(col.data(), static_cast<std::size_t>(col.size()))));
  }
  return out;
}

inline std::vector<ParameterSummary> summarize_chain(const ChainOutput& chain) {
  return summarize_columns(chain.columns, chain.draws);
}

/// Retained draws as a table: one named column per parameter.
struct DrawTable {
  std::vector<std::string> columns;
  Eigen::MatrixXd draws;
};

/// Values are written in shortest round-trip form, so reading the file back
/// reproduces the draws exactly.
inline void write_draws_csv(std::ostream& out, const std::vector<std::string>& columns, const Eigen::MatrixXd& draws) {
  csv::write_row(out, columns);
  csv::Row row(columns.size());
  for (Eigen::Index k = 0; k < draws.rows(); ++k) {
    for (Eigen::Index j = 0; j < draws.cols(); ++j) row[static_cast<std::size_t>(j)] = csv::format_double(draws(k, j));
    csv::write_row(out, row);
  }
}

inline DrawTable read_draws_csv(std::istream& in) {
  const auto rows = csv::read_rows(in);
  if (rows.empty()) throw InputError("draws file is empty");
  DrawTable t;
  for (const auto& c : rows.front()) t.columns.push_back(csv::trim(c));
  t.draws.resize(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(t.columns.size()));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != t.columns.size())
      throw InputError("draws row " + std::to_string(r + 1) + " has " + std::to_string(rows[r].size()) + " fields");
    for (std::size_t j = 0; j < t.columns.size(); ++j)
      t.draws(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(j)) =
          csv::parse_double(rows[r][j], "draws row " + std::to_string(r + 1));
  }
  return t;
}

inline void write_summary_csv(std::ostream& out, const std::vector<ParameterSummary>& summaries) {
  csv::write_row(out, {"parameter", "mean", "sd", "q2.5", "q97.5", "ess", "geweke_z"});
  for (const auto& s : summaries)
    csv::write_row(out, {s.name, csv::format_double(s.mean), csv::format_double(s.sd), csv::format_double(s.q025),
                         csv::format_double(s.q975), csv::format_double(s.ess), csv::format_double(s.geweke_z)});
}

/// Deviance at a plug-in estimate: posterior means of (a, b, c, rho) on the
/// natural scale, or with log a and log b averaged when `log_scale`.
inline double deviance_at_posterior_mean(const ChainOutput& chain, const RegionalPanel& panel, const ArealGraph& graph,
                                         bool log_scale = false) {
  const auto params = chain.posterior_mean_params(log_scale);
  const auto ts = standardize_time(panel.T());
  if (chain.spec.car_data()) {
    const auto sc = scaled_correlation(graph, chain.column("rho").mean());
    return -2.0 * observed_loglik_per_year(panel, params, ts, &sc).sum();
  }
  return -2.0 * observed_loglik_per_year(panel, params, ts, nullptr).sum();
}

inline DicResult chain_dic(const ChainOutput& chain, const RegionalPanel& panel, const ArealGraph& graph,
                           bool log_scale = false) {
  return dic(std::span<const double>(chain.deviance.data(), static_cast<std::size_t>(chain.deviance.size())),
             deviance_at_posterior_mean(chain, panel, graph, log_scale));
}

// ---------------------------------------------------------------------------
// Posterior predictive checks

struct PanelStatistics {
  double mean = 0.0, sd = 0.0, min = 0.0, max = 0.0;
  double site_mean = 0.0, site_sd = 0.0, site_min = 0.0, site_max = 0.0;
  double neighbor_corr = std::numeric_limits<double>::quiet_NaN();
};

inline const std::vector<std::string>& ppc_statistic_names() {
  static const std::vector<std::string> names{"mean",     "sd",       "min",      "max",          "site_mean",
                                              "site_sd", "site_min", "site_max", "neighbor_corr"};
  return names;
}

inline std::vector<double> as_vector(const PanelStatistics& s) {
  return {s.mean, s.sd, s.min, s.max, s.site_mean, s.site_sd, s.site_min, s.site_max, s.neighbor_corr};
}

/// Summary statistics over observed cells (NaN = missing). The neighbor
/// correlation is the mean over edges of the cross-year Pearson correlation
/// of the two regions, using years where both are observed.
inline PanelStatistics panel_statistics(const Eigen::MatrixXd& y, const ArealGraph* graph) {
  PanelStatistics s;
  std::vector<double> all;
  const Eigen::Index n = y.rows(), T = y.cols();
  double sm = 0, ssd = 0, smin = 0, smax = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> row;
    for (Eigen::Index t = 0; t < T; ++t)
      if (!std::isnan(y(i, t))) row.push_back(y(i, t));
    all.insert(all.end(), row.begin(), row.end());
    sm += detail::mean_of(row);
    ssd += row.size() > 1 ? std::sqrt(detail::variance_of(row)) : 0.0;
    smin += *std::min_element(row.begin(), row.end());
    smax += *std::max_element(row.begin(), row.end());
  }
  s.mean = detail::mean_of(all);
  s.sd = std::sqrt(detail::variance_of(all));
  s.min = *std::min_element(all.begin(), all.end());
  s.max = *std::max_element(all.begin(), all.end());
  s.site_mean = sm / static_cast<double>(n);
  s.site_sd = ssd / static_cast<double>(n);
  s.site_min = smin / static_cast<double>(n);
  s.site_max = smax / static_cast<double>(n);
  if (graph != nullptr) {
    double total = 0.0;
    int edges = 0;
    for (auto [i, j] : graph->edges) {
      double mx = 0, my = 0;
      int k = 0;
      for (Eigen::Index t = 0; t < T; ++t)
        if (!std::isnan(y(i, t)) && !std::isnan(y(j, t))) {
          mx += y(i, t);
          my += y(j, t);
          ++k;
        }
      if (k < 3) continue;
      mx /= k;
      my /= k;
      double sxy = 0, sxx = 0, syy = 0;
      for (Eigen::Index t = 0; t < T; ++t)
        if (!std::isnan(y(i, t)) && !std::isnan(y(j, t))) {
          sxy += (y(i, t) - mx) * (y(j, t) - my);
          sxx += (y(i, t) - mx) * (y(i, t) - mx);
          syy += (y(j, t) - my) * (y(j, t) - my);
        }
      if (sxx > 0 && syy > 0) {
        total += sxy / std::sqrt(sxx * syy);
        ++edges;
      }
    }
    if (edges > 0) s.neighbor_corr = total / edges;
  }
  return s;
}

struct PpcResult {
  std::map<std::string, double> p_values;  // one-sided P(T_rep >= T_obs)
  PanelStatistics observed;
  double coverage = 0.0;
  long draws_used = 0;
  std::vector<std::string> warnings;
};

/// Replicates one panel per retained draw (same missing mask), with draw k
/// using the substream derive_seed(seed, {k}).
inline PpcResult posterior_predictive_check(const RegionalPanel& panel, const ChainOutput& chain, const ArealGraph& graph,
                                            std::uint64_t seed) {
  const int n = panel.n(), T = panel.T();
  const auto ts = standardize_time(T);
  const auto mask = panel.missing_mask();
  const bool car = chain.spec.car_data();
  const ArealGraph* g = car ? &graph : nullptr;
  PpcResult r;
  r.observed = panel_statistics(panel.values, g);
  const auto obs_stats = as_vector(r.observed);
  const auto& names = ppc_statistic_names();
  std::vector<long> exceed(names.size(), 0);
  const Eigen::Index R = chain.draws.rows();
  r.draws_used = R;
  if (R < 100) r.warnings.push_back("fewer than 100 retained draws; p-values are coarse");

  std::vector<Eigen::Index> observed_cells;
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(n) * T; ++c)
    if (!mask.data()[c]) observed_cells.push_back(c);
  Eigen::MatrixXd rep_values(R, static_cast<Eigen::Index>(observed_cells.size()));

  for (Eigen::Index k = 0; k < R; ++k) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(k)}));
    const auto params = chain.params_at(k);
    RegionalPanel rep;
    if (car) {
      rep = simulate_panel(rng, graph, params, ts, chain.rho_at(k), mask);
    } else {
      Eigen::MatrixXd y(n, T);
      for (int t = 0; t < T; ++t)
        for (int i = 0; i < n; ++i) {
          const double u = clamp_pit(uniform01(rng));
          y(i, t) = mask(i, t) ? kMissing : gamma_quantile(u, params.a(i), marginal_components(params, ts, i, t).lambda);
        }
      rep = make_panel(std::move(y));
    }
    const auto st = as_vector(panel_statistics(rep.values, g));
    for (std::size_t j = 0; j < names.size(); ++j)
      if (!std::isnan(obs_stats[j]) && st[j] >= obs_stats[j]) ++exceed[j];
    for (std::size_t c = 0; c < observed_cells.size(); ++c)
      rep_values(k, static_cast<Eigen::Index>(c)) = rep.values.data()[observed_cells[c]];
  }
  for (std::size_t j = 0; j < names.size(); ++j) {
    if (std::isnan(obs_stats[j])) continue;
    r.p_values[names[j]] = static_cast<double>(exceed[j]) / static_cast<double>(R);
  }
  long inside = 0;
  std::vector<double> col(static_cast<std::size_t>(R));
  for (std::size_t c = 0; c < observed_cells.size(); ++c) {
    for (Eigen::Index k = 0; k < R; ++k) col[static_cast<std::size_t>(k)] = rep_values(k, static_cast<Eigen::Index>(c));
    std::sort(col.begin(), col.end());
    const double lo = sorted_quantile(col, 0.025), hi = sorted_quantile(col, 0.975);
    const double v = panel.values.data()[observed_cells[c]];
    if (lo <= v && v <= hi) ++inside;
  }
  r.coverage = observed_cells.empty() ? 0.0 : static_cast<double>(inside) / static_cast<double>(observed_cells.size());
  return r;
}

// ---------------------------------------------------------------------------
// Model comparison report

struct ModelComparisonRow {
  std::string model;
  DicResult dic;
  WaicResult waic;       // posterior-mean-of-log variant
  WaicResult waic_lppd;  // log-mean-exp variant
  double avg_sd_a = 0.0, avg_sd_b = 0.0, avg_sd_c = 0.0;
  double sd_rho = std::numeric_limits<double>::quiet_NaN();
};

struct ComparisonReport {
  std::vector<ModelComparisonRow> rows;
  std::map<std::string, PpcResult> ppc;
};

inline ModelComparisonRow comparison_row(const ChainOutput& chain, const RegionalPanel& panel, const ArealGraph& graph) {
  ModelComparisonRow row;
  row.model = chain.spec.name();
  row.dic = chain_dic(chain, panel, graph);
  row.waic = waic(chain.pointwise_loglik, WaicVariant::PosteriorMeanLog);
  row.waic_lppd = waic(chain.pointwise_loglik, WaicVariant::Lppd);
  const int n = chain.n;
  auto avg_sd = [&](int offset) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd c = chain.draws.col(offset + i);
      s += std::sqrt((c.array() - c.mean()).square().sum() / static_cast<double>(c.size() - 1));
    }
    return s / n;
  };
  row.avg_sd_a = avg_sd(0);
  row.avg_sd_b = avg_sd(n);
  row.avg_sd_c = avg_sd(2 * n);
  if (chain.has_column("rho")) {
    const Eigen::VectorXd c = chain.column("rho");
    row.sd_rho = std::sqrt((c.array() - c.mean()).square().sum() / static_cast<double>(c.size() - 1));
  }
  return row;
}

inline nlohmann::json json_number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

inline nlohmann::json to_json(const PpcResult& p) {
  nlohmann::json j;
  for (const auto& [k, v] : p.p_values) j["p_values"][k] = v;
  j["coverage"] = p.coverage;
  j["draws_used"] = p.draws_used;
  j["warnings"] = p.warnings;
  return j;
}

inline nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json j = nlohmann::json::object();
  j["models"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json m;
    m["model"] = row.model;
    m["DIC"] = row.dic.dic;
    m["p_D"] = row.dic.p_d;
    m["Dbar"] = row.dic.dbar;
    m["D_hat"] = row.dic.d_hat;
    m["WAIC"] = row.waic.waic;
    m["p_W"] = row.waic.p_w;
    m["WAIC_lppd"] = row.waic_lppd.waic;
    m["p_W_lppd"] = row.waic_lppd.p_w;
    m["avg_sd_a"] = row.avg_sd_a;
    m["avg_sd_b"] = row.avg_sd_b;
    m["avg_sd_c"] = row.avg_sd_c;
    m["sd_rho"] = json_number(row.sd_rho);
    j["models"].push_back(m);
  }
  for (const auto& [name, p] : r.ppc) j["ppc"][name] = to_json(p);
  return j;
}

/// Comparison table: one row per model. `paper_tables` scales the posterior
/// SDs of b, c and rho by 100 for presentation.
inline void write_comparison_csv(std::ostream& out, const ComparisonReport& r, bool paper_tables = false) {
  const double s = paper_tables ? 100.0 : 1.0;
  csv::write_row(out, {"model", "DIC", "p_D", "WAIC", "p_W", "WAIC_lppd", "p_W_lppd", "avg_sd_a", "avg_sd_b",
                       "avg_sd_c", "sd_rho"});
  for (const auto& row : r.rows) {
    csv::write_row(out, {row.model, csv::format_double(row.dic.dic), csv::format_double(row.dic.p_d),
                         csv::format_double(row.waic.waic), csv::format_double(row.waic.p_w),
                         csv::format_double(row.waic_lppd.waic), csv::format_double(row.waic_lppd.p_w),
                         csv::format_double(row.avg_sd_a), csv::format_double(s * row.avg_sd_b),
                         csv::format_double(s * row.avg_sd_c), csv::format_double(s * row.sd_rho)});
  }
}

inline void write_ppc_csv(std::ostream& out, const ComparisonReport& r) {
  std::vector<std::string> header{"model"};
  for (const auto& n : ppc_statistic_names()) header.push_back(n);
  header.push_back("coverage");
  csv::write_row(out, header);
  for (const auto& [model, p] : r.ppc) {
    std::vector<std::string> row{model};
    for (const auto& n : ppc_statistic_names()) {
      const auto it = p.p_values.find(n);
      row.push_back(it == p.p_values.end() ? "NA" : csv::format_double(it->second));
    }
    row.push_back(csv::format_double(p.coverage));
    csv::write_row(out, row);
  }
}

}  // namespace carcopula

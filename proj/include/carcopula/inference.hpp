#pragma once

// Metropolis-within-Gibbs sampler for the six data-layer x prior-layer model
// variants: gamma SVC marginals, optional CAR copula, and Indep/ICAR/CAR
// priors on (log a, log b, c).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "copula.hpp"
#include "error.hpp"
#include "gmrf.hpp"
#include "graph.hpp"
#include "marginals.hpp"
#include "panel.hpp"
#include "random.hpp"
#include "special.hpp"

namespace carcopula {

enum class DataLayer { Indep, Car };
enum class PriorLayer { Indep, Icar, Car };

struct ModelSpec {
  DataLayer data_layer = DataLayer::Car;
  PriorLayer prior_layer = PriorLayer::Icar;

  [[nodiscard]] bool car_data() const { return data_layer == DataLayer::Car; }

  /// "CAR-ICAR", "Indep-Indep", ...
  [[nodiscard]] std::string name() const {
    const std::string d = car_data() ? "CAR" : "Indep";
    switch (prior_layer) {
      case PriorLayer::Indep: return d + "-Indep";
      case PriorLayer::Icar: return d + "-ICAR";
      case PriorLayer::Car: return d + "-CAR";
    }
    return d;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline ModelSpec parse_model_spec(const std::string& text) {
  std::string s;
  for (char ch : text) s.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  const auto dash = s.find('-');
  if (dash == std::string::npos) throw InputError("model spec '" + text + "' must look like CAR-ICAR");
  const std::string d = s.substr(0, dash), p = s.substr(dash + 1);
  ModelSpec spec;
  if (d == "CAR") spec.data_layer = DataLayer::Car;
  else if (d == "INDEP") spec.data_layer = DataLayer::Indep;
  else throw InputError("unknown data layer in model spec '" + text + "'");
  if (p == "INDEP") spec.prior_layer = PriorLayer::Indep;
  else if (p == "ICAR") spec.prior_layer = PriorLayer::Icar;
  else if (p == "CAR") spec.prior_layer = PriorLayer::Car;
  else throw InputError("unknown prior layer in model spec '" + text + "'");
  return spec;
}

inline std::vector<ModelSpec> all_model_specs() {
  std::vector<ModelSpec> out;
  for (auto d : {DataLayer::Car, DataLayer::Indep})
    for (auto p : {PriorLayer::Icar, PriorLayer::Car, PriorLayer::Indep}) out.push_back({d, p});
  return out;
}

/// The three spatially varying coefficient groups.
enum class Coef { a = 0, b = 1, c = 2 };
inline constexpr std::array<Coef, 3> kCoefs{Coef::a, Coef::b, Coef::c};
inline const char* coef_name(Coef g) { return g == Coef::a ? "a" : g == Coef::b ? "b" : "c"; }

/// Hyperprior constants: mu ~ N(0, 10^2), sigma2 ~ IG(0.01, 0.01), rho ~ U(0,1).
inline constexpr double kMuPriorPrecision = 0.01;
inline constexpr double kSigma2PriorShape = 0.01;
inline constexpr double kSigma2PriorRate = 0.01;

struct HyperState {
  std::array<double, 3> mu{0.0, 0.0, 0.0};
  std::array<double, 3> sig2{1.0, 1.0, 1.0};
  std::array<double, 3> rho{0.5, 0.5, 0.5};  // 1 under ICAR, unused under Indep prior
};

struct ChainConfig {
  long iterations = 200000;
  long burn_in = 40000;
  long thin = 20;
  std::uint64_t seed = 1;
  // Robbins-Monro acceptance targets during burn-in.
  double block_target = 0.234;
  double scalar_target = 0.44;
  bool adapt = true;

  [[nodiscard]] long retained() const { return (iterations - burn_in) / thin; }

  void validate() const {
    if (iterations <= 0 || burn_in < 0 || thin <= 0) throw InputError("chain config: iterations and thin must be positive");
    if (burn_in >= iterations) throw InputError("chain config: burn_in must be smaller than iterations");
    if (retained() < 1) throw InputError("chain config: no draws would be retained");
  }

  /// Short chains for interactive and simulation-study use.
  static ChainConfig desk_scale() {
    ChainConfig c;
    c.iterations = 20000;
    c.burn_in = 4000;
    c.thin = 5;
    return c;
  }
};

/// Observed-data log-likelihood per year: gamma terms of the observed cells
/// plus, under the CAR data layer, the copula marginal of the observed block.
/// `scaled == nullptr` means the independence data layer.
inline Eigen::VectorXd observed_loglik_per_year(const RegionalPanel& panel, const GammaSvcParams& params,
                                                const TimeStandardizer& ts, const ScaledCarCorrelation* scaled) {
  const Eigen::MatrixXd log_y = panel.values.array().log().matrix();
  const auto ev = evaluate_marginals(panel.values, log_y, params, ts, scaled != nullptr);
  Eigen::VectorXd out = ev.gamma_loglik;
  if (scaled != nullptr && scaled->rho != 0.0)
    for (int t = 0; t < panel.T(); ++t) out(t) += copula_logdensity_observed(ev.z.col(t), *scaled);
  return out;
}

struct ChainOutput {
  ModelSpec spec;
  ChainConfig config;
  int n = 0;
  int T = 0;
  std::vector<std::string> columns;
  Eigen::MatrixXd draws;  // retained x columns, natural scale for a, b, c
  std::vector<std::pair<int, int>> missing_cells;  // (region, year), 0-based
  Eigen::MatrixXd imputed;                         // retained x missing cells, y scale
  Eigen::MatrixXd pointwise_loglik;                // retained x T, observed-data per year
  Eigen::VectorXd deviance;                        // -2 * row sums of pointwise_loglik
  std::map<std::string, double> acceptance;        // post-burn-in rates per kernel
  std::map<std::string, double> final_scale;
  long clamp_events = 0;
  long nonfinite_rejections = 0;
  long graph_evaluations = 0;
  std::vector<std::string> notes;

  [[nodiscard]] int column_index(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw InputError("chain output has no column '" + name + "'");
    return static_cast<int>(it - columns.begin());
  }
  [[nodiscard]] bool has_column(const std::string& name) const {
    return std::find(columns.begin(), columns.end(), name) != columns.end();
  }
  [[nodiscard]] Eigen::VectorXd column(const std::string& name) const { return draws.col(column_index(name)); }

  /// Parameters of retained draw k.
  [[nodiscard]] GammaSvcParams params_at(Eigen::Index k) const {
    GammaSvcParams p{draws.row(k).segment(0, n).transpose(), draws.row(k).segment(n, n).transpose(),
                     draws.row(k).segment(2 * n, n).transpose()};
    return p;
  }
  [[nodiscard]] double rho_at(Eigen::Index k) const { return has_column("rho") ? draws(k, column_index("rho")) : 0.0; }

  /// Posterior means of (a, b, c); `log_scale` averages log a and log b instead.
  [[nodiscard]] GammaSvcParams posterior_mean_params(bool log_scale = false) const {
    GammaSvcParams p;
    if (log_scale) {
      p.a = draws.middleCols(0, n).array().log().colwise().mean().exp().transpose();
      p.b = draws.middleCols(n, n).array().log().colwise().mean().exp().transpose();
    } else {
      p.a = draws.middleCols(0, n).colwise().mean().transpose();
      p.b = draws.middleCols(n, n).colwise().mean().transpose();
    }
    p.c = draws.middleCols(2 * n, n).colwise().mean().transpose();
    return p;
  }
};

inline std::vector<std::string> chain_columns(int n, const ModelSpec& spec) {
  std::vector<std::string> cols;
  for (Coef g : kCoefs)
    for (int i = 1; i <= n; ++i) cols.push_back(std::string(coef_name(g)) + "_" + std::to_string(i));
  if (spec.car_data()) cols.push_back("rho");
  for (Coef g : kCoefs) cols.push_back(std::string("mu_") + coef_name(g));
  for (Coef g : kCoefs) cols.push_back(std::string("sig2_") + coef_name(g));
  if (spec.prior_layer == PriorLayer::Car)
    for (Coef g : kCoefs) cols.push_back(std::string("rho_") + coef_name(g));
  return cols;
}

/// Adaptive Gaussian random-walk kernel. Blocks carry a proposal Cholesky
/// factor; scalars use a 1x1 factor.
struct RandomWalkKernel {
  double scale = 1.0;
  double target = 0.44;
  Eigen::MatrixXd chol;
  long adapt_steps = 0;
  long proposed = 0, accepted = 0;
  long proposed_retained = 0, accepted_retained = 0;

  void record(bool ok, bool adapting, bool retained_phase) {
    ++proposed;
    if (ok) ++accepted;
    if (retained_phase) {
      ++proposed_retained;
      if (ok) ++accepted_retained;
    }
    if (adapting && scale > 0.0) {
      const double gain = 2.0 / std::pow(static_cast<double>(adapt_steps) + 10.0, 0.6);
      scale *= std::exp(gain * ((ok ? 1.0 : 0.0) - target));
      ++adapt_steps;
    }
  }

  [[nodiscard]] double acceptance_rate() const {
    if (proposed_retained > 0) return static_cast<double>(accepted_retained) / static_cast<double>(proposed_retained);
    return proposed > 0 ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  }
};

/// Running mean and covariance of a vector sequence.
struct RunningCovariance {
  long count = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd m2;

  void reset(Eigen::Index dim) {
    count = 0;
    mean = Eigen::VectorXd::Zero(dim);
    m2 = Eigen::MatrixXd::Zero(dim, dim);
  }
  void push(const Eigen::VectorXd& x) {
    ++count;
    const Eigen::VectorXd delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean).transpose();
  }
  [[nodiscard]] Eigen::MatrixXd covariance() const { return m2 / static_cast<double>(count - 1); }
};

/// Full-conditional draw of mu for one coefficient group:
/// N(s^-2 1'Kx / (s^-2 1'K1 + 0.01), 1 / (s^-2 1'K1 + 0.01)).
struct NormalConditional {
  double mean = 0.0;
  double variance = 1.0;
};

inline NormalConditional mu_conditional(const Eigen::VectorXd& x, const Eigen::MatrixXd& K, double sig2) {
  const Eigen::VectorXd k1 = K * Eigen::VectorXd::Ones(x.size());  // K symmetric: 1'K = (K1)'
  const double prec = k1.sum() / sig2 + kMuPriorPrecision;
  return {(k1.dot(x) / sig2) / prec, 1.0 / prec};
}

inline double draw_mu(Rng& rng, const Eigen::VectorXd& x, const Eigen::MatrixXd& K, double sig2) {
  const auto c = mu_conditional(x, K, sig2);
  return c.mean + std::sqrt(c.variance) * standard_normal(rng);
}

/// IG(0.5 n + 0.01, 0.5 (x - mu1)'K(x - mu1) + 0.01).
struct InverseGammaConditional {
  double shape = 1.0;
  double rate = 1.0;
};

inline InverseGammaConditional sigma2_conditional(const Eigen::VectorXd& x, double mu, const Eigen::MatrixXd& K) {
  const Eigen::VectorXd r = x.array() - mu;
  const double q = r.dot(K * r);
  if (q < -1e-10 * std::max(1.0, r.squaredNorm())) throw NumericalError("sigma2 update: negative quadratic form");
  return {0.5 * static_cast<double>(x.size()) + kSigma2PriorShape, 0.5 * std::max(q, 0.0) + kSigma2PriorRate};
}

inline double draw_sigma2(Rng& rng, const Eigen::VectorXd& x, double mu, const Eigen::MatrixXd& K) {
  const auto c = sigma2_conditional(x, mu, K);
  std::gamma_distribution<double> g(c.shape, 1.0);
  return c.rate / g(rng);
}

/// One Metropolis-within-Gibbs chain. Each public update mirrors one step of
/// the Gibbs cycle so it can be exercised on its own.
class GibbsSampler {
 public:
  GibbsSampler(const RegionalPanel& panel, const ArealGraph& graph, ModelSpec spec, ChainConfig config)
      : panel_(panel), graph_(graph), spec_(spec), config_(config), rng_(config.seed) {
    config_.validate();
    validate_panel(panel_);
    n_ = panel_.n();
    T_ = panel_.T();
    if (spec_.car_data() || spec_.prior_layer != PriorLayer::Indep) {
      if (use_graph().n != n_) throw InputError("graph has " + std::to_string(graph_.n) + " regions, panel has " +
                                                std::to_string(n_));
    }
    ts_ = standardize_time(T_);
    initialize();
  }

  // ---- state access -------------------------------------------------------
  [[nodiscard]] const GammaSvcParams& params() const { return params_; }
  [[nodiscard]] const HyperState& hyper() const { return hyper_; }
  [[nodiscard]] double rho() const { return rho_; }
  [[nodiscard]] const Eigen::MatrixXd& completed_values() const { return y_; }
  [[nodiscard]] const std::vector<std::pair<int, int>>& missing_cells() const { return missing_cells_; }
  [[nodiscard]] const TimeStandardizer& time_standardizer() const { return ts_; }
  [[nodiscard]] long graph_evaluations() const { return graph_evals_; }
  [[nodiscard]] long clamp_events() const { return clamp_events_; }
  [[nodiscard]] long nonfinite_rejections() const { return nonfinite_rejections_; }
  [[nodiscard]] const RandomWalkKernel& block_kernel(Coef g) const { return block_kernels_[idx(g)]; }
  [[nodiscard]] const RandomWalkKernel& rho_kernel() const { return rho_kernel_; }
  [[nodiscard]] const RandomWalkKernel& rho_prior_kernel(Coef g) const { return rho_prior_kernels_[idx(g)]; }
  [[nodiscard]] Rng& rng() { return rng_; }
  [[nodiscard]] double data_loglik() const { return gamma_per_year_.sum() + copula_per_year_.sum(); }

  [[nodiscard]] Eigen::VectorXd coefficients(Coef g) const {
    switch (g) {
      case Coef::a: return params_.a_star();
      case Coef::b: return params_.b_star();
      case Coef::c: return params_.c;
    }
    return {};
  }

  /// Prior precision structure K (without the 1/sigma2 factor).
  [[nodiscard]] const Eigen::MatrixXd& prior_structure(Coef g) const { return K_[idx(g)]; }

  // ---- test and control hooks --------------------------------------------
  void set_likelihood_enabled(bool on) { likelihood_enabled_ = on; }
  void set_adapting(bool on) { adapting_ = on; }
  void set_retained_phase(bool on) { retained_phase_ = on; }
  void set_block_scale(Coef g, double s) { block_kernels_[idx(g)].scale = s; }
  void set_hyper(const HyperState& h) {
    hyper_ = h;
    refresh_prior_structures();
  }
  void set_coefficients(Coef g, const Eigen::VectorXd& x) {
    assign(params_, g, x);
    refresh_data_cache();
  }
  void set_rho(double rho) {
    if (!spec_.car_data()) throw InputError("set_rho: independence data layer has no rho");
    rho_ = rho;
    scaled_ = scaled_correlation(use_graph(), rho_);
    refresh_data_cache();
  }

  // ---- Gibbs steps ---------------------------------------------------------

  /// Joint random-walk MH on one n-dimensional coefficient block.
  bool update_svc_block(Coef g) {
    auto& k = block_kernels_[idx(g)];
    const Eigen::VectorXd x = coefficients(g);
    const Eigen::VectorXd prop = x + k.scale * (k.chol * standard_normal_vector(rng_, n_));
    GammaSvcParams cand = params_;
    assign(cand, g, prop);

    double log_ratio = prior_log_kernel(g, prop) - prior_log_kernel(g, x);
    MarginalEvaluation ev;
    Eigen::VectorXd cop;
    if (likelihood_enabled_) {
      ev = evaluate_marginals(y_, log_y_, cand, ts_, spec_.car_data());
      clamp_events_ += ev.clamp_count;
      cop = copula_terms(ev.z);
      log_ratio += (ev.gamma_loglik.sum() + cop.sum()) - data_loglik();
    }
    bool ok = false;
    if (!std::isfinite(log_ratio)) {
      ++nonfinite_rejections_;
    } else {
      ok = std::log(uniform01(rng_)) < log_ratio;
    }
    if (ok) {
      params_ = std::move(cand);
      if (likelihood_enabled_) {
        gamma_per_year_ = std::move(ev.gamma_loglik);
        if (spec_.car_data()) z_ = std::move(ev.z);
        copula_per_year_ = std::move(cop);
      } else {
        refresh_data_cache();
      }
    }
    k.record(ok, adapting_, retained_phase_);
    if (adapting_) track_block(g);
    return ok;
  }

  /// Logit-scale random walk on the copula rho (CAR data layer only).
  bool update_rho_data() {
    if (!spec_.car_data()) throw InputError("update_rho_data: data layer is independent");
    auto& k = rho_kernel_;
    const double eta = std::log(rho_ / (1.0 - rho_));
    const double eta_new = eta + k.scale * standard_normal(rng_);
    const double rho_new = 1.0 / (1.0 + std::exp(-eta_new));
    bool ok = false;
    std::optional<ScaledCarCorrelation> sc;
    Eigen::VectorXd cop;
    if (rho_new > 0.0 && rho_new < 1.0) {
      double log_ratio = std::log(rho_new) + std::log1p(-rho_new) - std::log(rho_) - std::log1p(-rho_);
      if (likelihood_enabled_) {
        sc = scaled_correlation(use_graph(), rho_new);
        cop = copula_terms(z_, &*sc);
        log_ratio += cop.sum() - copula_per_year_.sum();
      }
      if (!std::isfinite(log_ratio)) {
        ++nonfinite_rejections_;
      } else {
        ok = std::log(uniform01(rng_)) < log_ratio;
      }
    }
    if (ok) {
      rho_ = rho_new;
      if (sc) {
        scaled_ = std::move(*sc);
        copula_per_year_ = std::move(cop);
      } else {
        scaled_ = scaled_correlation(use_graph(), rho_);
        refresh_data_cache();
      }
    }
    k.record(ok, adapting_, retained_phase_);
    return ok;
  }

  void update_mu(Coef g) { hyper_.mu[idx(g)] = draw_mu(rng_, coefficients(g), K_[idx(g)], hyper_.sig2[idx(g)]); }

  void update_sigma2(Coef g) {
    hyper_.sig2[idx(g)] = draw_sigma2(rng_, coefficients(g), hyper_.mu[idx(g)], K_[idx(g)]);
  }

  /// Logit-scale MH on the prior-layer rho of one group (CAR prior only).
  bool update_rho_prior(Coef g) {
    if (spec_.prior_layer != PriorLayer::Car) throw InputError("update_rho_prior: prior layer is not CAR");
    auto& k = rho_prior_kernels_[idx(g)];
    const double r = hyper_.rho[idx(g)];
    const double eta_new = std::log(r / (1.0 - r)) + k.scale * standard_normal(rng_);
    const double r_new = 1.0 / (1.0 + std::exp(-eta_new));
    bool ok = false;
    if (r_new > 0.0 && r_new < 1.0) {
      const Eigen::VectorXd x = coefficients(g);
      const double log_ratio = car_prior_logpdf(x, g, r_new) - car_prior_logpdf(x, g, r) + std::log(r_new) +
                               std::log1p(-r_new) - std::log(r) - std::log1p(-r);
      if (!std::isfinite(log_ratio)) {
        ++nonfinite_rejections_;
      } else {
        ok = std::log(uniform01(rng_)) < log_ratio;
      }
    }
    if (ok) {
      hyper_.rho[idx(g)] = r_new;
      K_[idx(g)] = use_graph().car_matrix(r_new);
    }
    k.record(ok, adapting_, retained_phase_);
    return ok;
  }

  /// Draws every missing cell from its full conditional given the observed
  /// cells of the same year (latent-scale precision partition), then maps the
  /// latent draw back through the gamma quantile.
  void impute_missing() {
    if (missing_cells_.empty()) return;
    std::vector<int> years;
    for (auto [i, t] : missing_cells_)
      if (years.empty() || years.back() != t) years.push_back(t);
    std::sort(years.begin(), years.end());
    years.erase(std::unique(years.begin(), years.end()), years.end());
    for (int t : years) {
      const std::vector<int> mis = panel_.missing_in_year(t);
      Eigen::VectorXd z_new(static_cast<Eigen::Index>(mis.size()));
      if (spec_.car_data() && scaled_.rho != 0.0) {
        std::vector<int> obs;
        for (int i = 0; i < n_; ++i)
          if (!panel_.is_missing(i, t)) obs.push_back(i);
        if (obs.empty()) {
          const Eigen::VectorXd full = sample_latent_year(rng_, scaled_);
          for (std::size_t k = 0; k < mis.size(); ++k) z_new(static_cast<Eigen::Index>(k)) = full(mis[k]);
        } else {
          Eigen::VectorXd zo(static_cast<Eigen::Index>(obs.size()));
          for (std::size_t k = 0; k < obs.size(); ++k) zo(static_cast<Eigen::Index>(k)) = z_(obs[k], t);
          z_new = conditional_from_precision(scaled_.precision, obs, zo).sample(rng_);
        }
      } else {
        z_new = standard_normal_vector(rng_, z_new.size());
      }
      for (std::size_t k = 0; k < mis.size(); ++k) {
        const int i = mis[k];
        const auto mc = marginal_components(params_, ts_, i, t);
        const double u = clamp_pit(special::normal_cdf(z_new(static_cast<Eigen::Index>(k))), &clamp_events_int_);
        y_(i, t) = gamma_quantile(u, params_.a(i), mc.lambda);
        log_y_(i, t) = std::log(y_(i, t));
      }
      refresh_year(t);
    }
    clamp_events_ += clamp_events_int_;
    clamp_events_int_ = 0;
  }

  /// One full Gibbs cycle in the fixed order.
  void step() {
    for (Coef g : kCoefs) update_svc_block(g);
    if (spec_.car_data()) update_rho_data();
    for (Coef g : kCoefs) update_mu(g);
    for (Coef g : kCoefs) update_sigma2(g);
    if (spec_.prior_layer == PriorLayer::Car)
      for (Coef g : kCoefs) update_rho_prior(g);
    impute_missing();
  }

  /// Observed-data log-likelihood per year at the current state.
  [[nodiscard]] Eigen::VectorXd pointwise_loglik() const {
    Eigen::VectorXd out = gamma_per_year_ + copula_per_year_;
    for (int t : incomplete_years_) {
      double g = 0.0;
      for (int i = 0; i < n_; ++i) {
        if (panel_.is_missing(i, t)) continue;
        const double log_rate = std::log(params_.a(i)) + std::log(params_.b(i)) + params_.c(i) * ts_.t_star(t);
        g += params_.a(i) * log_rate - special::log_gamma(params_.a(i)) + (params_.a(i) - 1.0) * log_y_(i, t) -
             std::exp(log_rate) * y_(i, t);
      }
      double cop = 0.0;
      if (spec_.car_data() && scaled_.rho != 0.0) {
        Eigen::VectorXd zt = z_.col(t);
        for (int i = 0; i < n_; ++i)
          if (panel_.is_missing(i, t)) zt(i) = kMissing;
        cop = copula_logdensity_observed(zt, scaled_);
      }
      out(t) = g + cop;
    }
    return out;
  }

  /// Burn-in bookkeeping: refreshes block proposal covariances at fixed
  /// checkpoints from the draws accumulated so far.
  void end_of_iteration(long iter) {
    if (!adapting_ || !config_.adapt) return;
    const long start = config_.burn_in / 10;
    if (iter == start) {
      for (auto& rc : block_cov_) rc.reset(n_);
      tracking_ = true;
    }
    for (double frac : {0.3, 0.5, 0.7, 0.85}) {
      if (iter == static_cast<long>(frac * static_cast<double>(config_.burn_in))) refresh_block_proposals();
    }
  }

 private:
  static std::size_t idx(Coef g) { return static_cast<std::size_t>(g); }

  const ArealGraph& use_graph() {
    ++graph_evals_;
    return graph_;
  }

  static void assign(GammaSvcParams& p, Coef g, const Eigen::VectorXd& x) {
    switch (g) {
      case Coef::a: p.a = x.array().exp().matrix(); break;
      case Coef::b: p.b = x.array().exp().matrix(); break;
      case Coef::c: p.c = x; break;
    }
  }

  [[nodiscard]] double prior_log_kernel(Coef g, const Eigen::VectorXd& x) const {
    const Eigen::VectorXd r = x.array() - hyper_.mu[idx(g)];
    return -0.5 * r.dot(K_[idx(g)] * r) / hyper_.sig2[idx(g)];
  }

  /// Normalized CAR prior log-density of x as a function of its rho.
  double car_prior_logpdf(const Eigen::VectorXd& x, Coef g, double r) {
    const Eigen::MatrixXd K = use_graph().car_matrix(r);
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd res = x.array() - hyper_.mu[idx(g)];
    return 0.5 * log_det - 0.5 * res.dot(K * res) / hyper_.sig2[idx(g)];
  }

  Eigen::VectorXd copula_terms(const Eigen::MatrixXd& z, const ScaledCarCorrelation* sc = nullptr) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(T_);
    if (!spec_.car_data()) return out;
    const ScaledCarCorrelation& s = sc ? *sc : scaled_;
    if (s.rho == 0.0) return out;
    const Eigen::MatrixXd Pz = s.precision * z;
    const double half_log_det = 0.5 * s.log_det_precision;
    for (int t = 0; t < T_; ++t)
      out(t) = half_log_det - 0.5 * z.col(t).dot(Pz.col(t)) + 0.5 * z.col(t).squaredNorm();
    return out;
  }

  void refresh_data_cache() {
    auto ev = evaluate_marginals(y_, log_y_, params_, ts_, spec_.car_data());
    clamp_events_ += ev.clamp_count;
    gamma_per_year_ = std::move(ev.gamma_loglik);
    if (spec_.car_data()) z_ = std::move(ev.z);
    copula_per_year_ = copula_terms(z_);
  }

  void refresh_year(int t) {
    double g = 0.0;
    for (int i = 0; i < n_; ++i) {
      const double log_rate = std::log(params_.a(i)) + std::log(params_.b(i)) + params_.c(i) * ts_.t_star(t);
      const double ly = std::exp(log_rate) * y_(i, t);
      g += params_.a(i) * log_rate - special::log_gamma(params_.a(i)) + (params_.a(i) - 1.0) * log_y_(i, t) - ly;
      if (spec_.car_data())
        z_(i, t) = special::normal_quantile(clamp_pit(special::gamma_p(params_.a(i), ly), &clamp_events_int_));
    }
    gamma_per_year_(t) = g;
    if (spec_.car_data() && scaled_.rho != 0.0) copula_per_year_(t) = copula_logdensity(z_.col(t), scaled_);
  }

  void refresh_prior_structures() {
    for (Coef g : kCoefs) {
      switch (spec_.prior_layer) {
        case PriorLayer::Indep: K_[idx(g)] = Eigen::MatrixXd::Identity(n_, n_); break;
        case PriorLayer::Icar: K_[idx(g)] = use_graph().car_matrix(1.0); break;
        case PriorLayer::Car: K_[idx(g)] = use_graph().car_matrix(hyper_.rho[idx(g)]); break;
      }
    }
  }

  void track_block(Coef g) {
    if (tracking_) block_cov_[idx(g)].push(coefficients(g));
  }

  void refresh_block_proposals() {
    if (!tracking_) return;
    for (Coef g : kCoefs) {
      auto& rc = block_cov_[idx(g)];
      if (rc.count < 5L * n_) continue;
      Eigen::MatrixXd cov = rc.covariance();
      cov.diagonal().array() += 1e-10 + 1e-6 * cov.diagonal().mean();
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() != Eigen::Success) continue;
      auto& k = block_kernels_[idx(g)];
      k.chol = llt.matrixL();
      if (k.scale > 0.0) k.scale = 2.38 / std::sqrt(static_cast<double>(n_));
      k.adapt_steps = 0;
    }
  }

  void initialize() {
    // missing cells
    for (int t = 0; t < T_; ++t) {
      bool incomplete = false;
      for (int i = 0; i < n_; ++i)
        if (panel_.is_missing(i, t)) {
          missing_cells_.emplace_back(i, t);
          incomplete = true;
        }
      if (incomplete) incomplete_years_.push_back(t);
    }
    std::sort(missing_cells_.begin(), missing_cells_.end(),
              [](auto l, auto r) { return l.second != r.second ? l.second < r.second : l.first < r.first; });

    // coefficients: per-region MLE, else moments
    params_.a.resize(n_);
    params_.b.resize(n_);
    params_.c.resize(n_);
    std::array<Eigen::VectorXd, 3> se;
    for (auto& s : se) s = Eigen::VectorXd::Constant(n_, 0.1);
    std::vector<double> row(static_cast<std::size_t>(T_));
    for (int i = 0; i < n_; ++i) {
      for (int t = 0; t < T_; ++t) row[static_cast<std::size_t>(t)] = panel_.values(i, t);
      bool done = false;
      try {
        const auto f = fit_region_gamma(row, ts_);
        params_.a(i) = f.a;
        params_.b(i) = f.b;
        params_.c(i) = f.c;
        for (int k = 0; k < 3; ++k)
          if (std::isfinite(f.se_log(k)) && f.se_log(k) > 0.0) se[static_cast<std::size_t>(k)](i) = f.se_log(k);
        done = true;
      } catch (const std::exception&) {
      }
      if (!done) {
        std::vector<double> obs;
        for (double v : row)
          if (!std::isnan(v)) obs.push_back(v);
        if (obs.size() < 2) throw InputError("region '" + panel_.regions[static_cast<std::size_t>(i)] +
                                             "' has fewer than 2 observations");
        const Eigen::Vector3d m = gamma_moment_start(obs);
        params_.a(i) = std::exp(m(0));
        params_.b(i) = std::exp(m(1));
        params_.c(i) = 0.0;
      }
    }

    // hyperparameters
    for (Coef g : kCoefs) {
      const Eigen::VectorXd x = coefficients(g);
      hyper_.mu[idx(g)] = x.mean();
      const double var = n_ > 1 ? (x.array() - x.mean()).square().sum() / (n_ - 1) : 1.0;
      hyper_.sig2[idx(g)] = std::max(var, 1e-6);
      hyper_.rho[idx(g)] = spec_.prior_layer == PriorLayer::Icar ? 1.0 : 0.5;
    }
    refresh_prior_structures();
    if (spec_.prior_layer == PriorLayer::Indep) hyper_.rho = {0.0, 0.0, 0.0};

    // data layer
    rho_ = 0.0;
    if (spec_.car_data()) {
      rho_ = 0.5;
      scaled_ = scaled_correlation(use_graph(), rho_);
    }
    y_ = panel_.values;
    for (auto [i, t] : missing_cells_) y_(i, t) = gamma_quantile(0.5, params_.a(i), marginal_components(params_, ts_, i, t).lambda);
    log_y_ = y_.array().log().matrix();
    refresh_data_cache();

    // kernels
    for (Coef g : kCoefs) {
      auto& k = block_kernels_[idx(g)];
      k.target = config_.block_target;
      k.chol = se[idx(g)].asDiagonal();
      k.scale = 2.38 / std::sqrt(static_cast<double>(n_));
      auto& kr = rho_prior_kernels_[idx(g)];
      kr.target = config_.scalar_target;
      kr.chol = Eigen::MatrixXd::Identity(1, 1);
      kr.scale = 1.0;
    }
    rho_kernel_.target = config_.scalar_target;
    rho_kernel_.chol = Eigen::MatrixXd::Identity(1, 1);
    rho_kernel_.scale = 0.5;
    adapting_ = config_.adapt;

    if (!std::isfinite(gamma_per_year_.sum()))
      throw NumericalError("initial state: gamma log-likelihood is not finite");
    if (!std::isfinite(copula_per_year_.sum()))
      throw NumericalError("initial state: copula log-density is not finite");
    for (Coef g : kCoefs)
      if (!std::isfinite(prior_log_kernel(g, coefficients(g))))
        throw NumericalError(std::string("initial state: prior for ") + coef_name(g) + " is not finite");
  }

  RegionalPanel panel_;
  const ArealGraph& graph_;
  ModelSpec spec_;
  ChainConfig config_;
  Rng rng_;
  int n_ = 0, T_ = 0;
  TimeStandardizer ts_;

  GammaSvcParams params_;
  HyperState hyper_;
  double rho_ = 0.0;
  ScaledCarCorrelation scaled_;
  std::array<Eigen::MatrixXd, 3> K_;

  Eigen::MatrixXd y_, log_y_, z_;
  Eigen::VectorXd gamma_per_year_, copula_per_year_;
  std::vector<std::pair<int, int>> missing_cells_;
  std::vector<int> incomplete_years_;

  std::array<RandomWalkKernel, 3> block_kernels_;
  std::array<RandomWalkKernel, 3> rho_prior_kernels_;
  RandomWalkKernel rho_kernel_;
  std::array<RunningCovariance, 3> block_cov_;
  bool tracking_ = false;
  bool adapting_ = true;
  bool retained_phase_ = false;
  bool likelihood_enabled_ = true;

  long graph_evals_ = 0;
  long clamp_events_ = 0;
  int clamp_events_int_ = 0;
  long nonfinite_rejections_ = 0;
};

/// Runs one chain and collects thinned draws and per-draw diagnostics.
inline ChainOutput run_chain(const RegionalPanel& panel, const ArealGraph& graph, const ModelSpec& spec,
                             const ChainConfig& config) {
  GibbsSampler s(panel, graph, spec, config);
  ChainOutput out;
  out.spec = spec;
  out.config = config;
  out.n = panel.n();
  out.T = panel.T();
  out.columns = chain_columns(out.n, spec);
  out.missing_cells = s.missing_cells();
  const long R = config.retained();
  out.draws.resize(R, static_cast<Eigen::Index>(out.columns.size()));
  out.imputed.resize(R, static_cast<Eigen::Index>(out.missing_cells.size()));
  out.pointwise_loglik.resize(R, out.T);
  out.deviance.resize(R);

  long row = 0;
  for (long iter = 0; iter < config.iterations; ++iter) {
    const bool post = iter >= config.burn_in;
    s.set_adapting(config.adapt && !post);
    s.set_retained_phase(post);
    s.step();
    s.end_of_iteration(iter);
    if (post && (iter - config.burn_in + 1) % config.thin == 0 && row < R) {
      const int n = out.n;
      Eigen::Index col = 0;
      const auto& p = s.params();
      out.draws.row(row).segment(col, n) = p.a.transpose();
      col += n;
      out.draws.row(row).segment(col, n) = p.b.transpose();
      col += n;
      out.draws.row(row).segment(col, n) = p.c.transpose();
      col += n;
      if (spec.car_data()) out.draws(row, col++) = s.rho();
      for (int g = 0; g < 3; ++g) out.draws(row, col++) = s.hyper().mu[static_cast<std::size_t>(g)];
      for (int g = 0; g < 3; ++g) out.draws(row, col++) = s.hyper().sig2[static_cast<std::size_t>(g)];
      if (spec.prior_layer == PriorLayer::Car)
        for (int g = 0; g < 3; ++g) out.draws(row, col++) = s.hyper().rho[static_cast<std::size_t>(g)];
      for (std::size_t k = 0; k < out.missing_cells.size(); ++k) {
        const auto [i, t] = out.missing_cells[k];
        out.imputed(row, static_cast<Eigen::Index>(k)) = s.completed_values()(i, t);
      }
      out.pointwise_loglik.row(row) = s.pointwise_loglik().transpose();
      out.deviance(row) = -2.0 * out.pointwise_loglik.row(row).sum();
      ++row;
    }
  }

  for (Coef g : kCoefs) {
    const std::string key = std::string(coef_name(g)) + "_block";
    out.acceptance[key] = s.block_kernel(g).acceptance_rate();
    out.final_scale[key] = s.block_kernel(g).scale;
  }
  if (spec.car_data()) {
    out.acceptance["rho"] = s.rho_kernel().acceptance_rate();
    out.final_scale["rho"] = s.rho_kernel().scale;
  }
  if (spec.prior_layer == PriorLayer::Car) {
    for (Coef g : kCoefs) {
      const std::string key = std::string("rho_") + coef_name(g);
      out.acceptance[key] = s.rho_prior_kernel(g).acceptance_rate();
      out.final_scale[key] = s.rho_prior_kernel(g).scale;
    }
  }
  out.clamp_events = s.clamp_events();
  out.nonfinite_rejections = s.nonfinite_rejections();
  out.graph_evaluations = s.graph_evaluations();
  if (spec.prior_layer == PriorLayer::Icar)
    out.notes.push_back(
        "ICAR prior: 1'(M-W) = 0, so mu_a, mu_b and mu_c are informed only by their N(0, 100) hyperprior");
  return out;
}

}  // namespace carcopula

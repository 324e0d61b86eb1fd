#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "gmrf.hpp"
#include "graph.hpp"
#include "marginals.hpp"
#include "panel.hpp"
#include "random.hpp"
#include "special.hpp"

namespace carcopula {

/// log c(u) for one complete latent vector z = Phi^{-1}(u) under the CAR copula:
///   1/2 log det P - 1/2 z'Pz + 1/2 z'z,   P = R^{-1}.
/// The normalizing 2 pi terms cancel against the standard normal marginals.
inline double copula_logdensity(const Eigen::VectorXd& z, const ScaledCarCorrelation& scaled) {
  if (z.size() != scaled.size()) throw InputError("copula_logdensity: dimension mismatch");
  if (scaled.rho == 0.0) return 0.0;
  return 0.5 * scaled.log_det_precision - 0.5 * z.dot(scaled.precision * z) + 0.5 * z.squaredNorm();
}

/// Copula log-density of the observed entries of z (NaN = missing): the
/// marginal precision of the observed block is the Schur complement
/// P_OO - P_OI P_II^{-1} P_IO.
inline double copula_logdensity_observed(const Eigen::VectorXd& z, const ScaledCarCorrelation& scaled) {
  const Eigen::Index n = scaled.size();
  if (z.size() != n) throw InputError("copula_logdensity_observed: dimension mismatch");
  if (scaled.rho == 0.0) return 0.0;
  std::vector<Eigen::Index> obs, mis;
  for (Eigen::Index i = 0; i < n; ++i) (std::isnan(z(i)) ? mis : obs).push_back(i);
  if (mis.empty()) return copula_logdensity(z, scaled);
  if (obs.empty()) return 0.0;
  const auto o = static_cast<Eigen::Index>(obs.size()), m = static_cast<Eigen::Index>(mis.size());
  Eigen::MatrixXd Poo(o, o), Poi(o, m), Pii(m, m);
  Eigen::VectorXd zo(o);
  for (Eigen::Index r = 0; r < o; ++r) {
    zo(r) = z(obs[r]);
    for (Eigen::Index c = 0; c < o; ++c) Poo(r, c) = scaled.precision(obs[r], obs[c]);
    for (Eigen::Index c = 0; c < m; ++c) Poi(r, c) = scaled.precision(obs[r], mis[c]);
  }
  for (Eigen::Index r = 0; r < m; ++r)
    for (Eigen::Index c = 0; c < m; ++c) Pii(r, c) = scaled.precision(mis[r], mis[c]);
  Eigen::LLT<Eigen::MatrixXd> lii(Pii);
  const Eigen::MatrixXd marginal = Poo - Poi * lii.solve(Poi.transpose());
  Eigen::LLT<Eigen::MatrixXd> lm(marginal);
  if (lm.info() != Eigen::Success) throw NumericalError("copula_logdensity_observed: marginal precision not PD");
  const double log_det = 2.0 * lm.matrixLLT().diagonal().array().log().sum();
  return 0.5 * log_det - 0.5 * zo.dot(marginal * zo) + 0.5 * zo.squaredNorm();
}

/// Per-cell marginal terms of a panel: gamma log-densities summed by year and
/// latent scores z (NaN where the panel is missing).
struct MarginalEvaluation {
  Eigen::MatrixXd z;
  Eigen::VectorXd gamma_loglik;  // per year, observed cells only
  int clamp_count = 0;
};

/// `log_y` must equal log(y) cell-wise; it is passed in so repeated
/// evaluations (MCMC) avoid recomputing it.
inline MarginalEvaluation evaluate_marginals(const Eigen::MatrixXd& y, const Eigen::MatrixXd& log_y,
                                             const GammaSvcParams& params, const TimeStandardizer& ts,
                                             bool need_scores) {
  const Eigen::Index n = y.rows(), T = y.cols();
  MarginalEvaluation ev;
  ev.gamma_loglik = Eigen::VectorXd::Zero(T);
  if (need_scores) ev.z.resize(n, T);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = params.a(i);
    const double log_ab = std::log(a) + std::log(params.b(i));
    const double lg = special::log_gamma(a);
    for (Eigen::Index t = 0; t < T; ++t) {
      const double v = y(i, t);
      if (std::isnan(v)) {
        if (need_scores) ev.z(i, t) = v;
        continue;
      }
      const double log_rate = log_ab + params.c(i) * ts.t_star(t);
      const double ly = std::exp(log_rate) * v;
      ev.gamma_loglik(t) += a * log_rate - lg + (a - 1.0) * log_y(i, t) - ly;
      if (need_scores) ev.z(i, t) = special::normal_quantile(clamp_pit(special::gamma_p(a, ly), &ev.clamp_count));
    }
  }
  return ev;
}

struct JointLoglik {
  double total = 0.0;
  Eigen::VectorXd per_year;
};

/// Sum over years of [copula term + gamma terms] for the observed cells.
/// Years with missing cells use the copula marginal of their observed block.
inline JointLoglik joint_loglik(const RegionalPanel& panel, const GammaSvcParams& params, const TimeStandardizer& ts,
                                const ScaledCarCorrelation& scaled) {
  if (params.n() != panel.n() || ts.T != panel.T() || scaled.size() != panel.n())
    throw InputError("joint_loglik: dimension mismatch");
  const Eigen::MatrixXd log_y = panel.values.array().log().matrix();
  const auto ev = evaluate_marginals(panel.values, log_y, params, ts, scaled.rho != 0.0);
  JointLoglik out;
  out.per_year = ev.gamma_loglik;
  if (scaled.rho != 0.0) {
    for (int t = 0; t < panel.T(); ++t) out.per_year(t) += copula_logdensity_observed(ev.z.col(t), scaled);
  }
  out.total = out.per_year.sum();
  return out;
}

inline JointLoglik joint_loglik(const RegionalPanel& panel, const GammaSvcParams& params, const TimeStandardizer& ts,
                                const ArealGraph& graph, double rho) {
  return joint_loglik(panel, params, ts, scaled_correlation(graph, rho));
}

/// One latent year z ~ N(0, R): X ~ N(0, (M - rho W)^{-1}), z_i = X_i / sqrt(d_i).
inline Eigen::VectorXd sample_latent_year(Rng& rng, const ScaledCarCorrelation& scaled) {
  const Eigen::VectorXd x = sample_gmrf(rng, Eigen::VectorXd::Zero(scaled.size()), scaled.chol_L);
  return x.cwiseQuotient(scaled.delta.cwiseSqrt());
}

/// Draws a panel from the model; cells flagged in `missing_mask` are deleted.
inline RegionalPanel simulate_panel(Rng& rng, const ScaledCarCorrelation& scaled, const GammaSvcParams& params,
                                    const TimeStandardizer& ts, const std::optional<MissingMask>& missing_mask = {}) {
  const int n = params.n(), T = ts.T;
  if (scaled.size() != n) throw InputError("simulate_panel: dimension mismatch");
  if (missing_mask && (missing_mask->rows() != n || missing_mask->cols() != T))
    throw InputError("simulate_panel: missing mask has the wrong shape");
  Eigen::MatrixXd y(n, T);
  for (int t = 0; t < T; ++t) {
    const Eigen::VectorXd z = sample_latent_year(rng, scaled);
    for (int i = 0; i < n; ++i) {
      const auto mc = marginal_components(params, ts, i, t);
      y(i, t) = gamma_quantile(clamp_pit(special::normal_cdf(z(i))), params.a(i), mc.lambda);
    }
  }
  if (missing_mask) {
    for (int i = 0; i < n; ++i)
      for (int t = 0; t < T; ++t)
        if ((*missing_mask)(i, t)) y(i, t) = kMissing;
  }
  return make_panel(std::move(y));
}

inline RegionalPanel simulate_panel(Rng& rng, const ArealGraph& graph, const GammaSvcParams& params,
                                    const TimeStandardizer& ts, double rho,
                                    const std::optional<MissingMask>& missing_mask = {}) {
  if (!(rho >= 0.0 && rho < 1.0)) throw InputError("simulate_panel: rho must lie in [0,1)");
  return simulate_panel(rng, scaled_correlation(graph, rho), params, ts, missing_mask);
}

/// Year-specific copula MLE of rho and its centered moving average.
struct RhoProfile {
  Eigen::VectorXd raw;
  Eigen::VectorXd smoothed;
  int window = 1;
};

inline constexpr double kRhoSearchUpper = 1.0 - 1e-6;

/// Maximizes the single-year copula log-density over rho in [0, 1 - 1e-6] by
/// golden-section search (tolerance 1e-4), then smooths with a centered
/// moving average of width `window`, truncated at the series ends.
inline RhoProfile yearwise_rho_profile(const RegionalPanel& panel, const GammaSvcParams& params,
                                       const TimeStandardizer& ts, const ArealGraph& graph, int window = 9) {
  const int T = panel.T();
  if (window < 1 || window % 2 == 0) throw InputError("yearwise_rho_profile: window must be odd and positive");
  if (window > T) throw InputError("yearwise_rho_profile: window exceeds the number of years");
  const auto u = pit_transform(panel, params, ts);
  const Eigen::MatrixXd z = latent_scores(u.u);

  RhoProfile out;
  out.window = window;
  out.raw.resize(T);
  const double golden = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int t = 0; t < T; ++t) {
    const Eigen::VectorXd zt = z.col(t);
    auto objective = [&](double rho) { return copula_logdensity_observed(zt, scaled_correlation(graph, rho)); };
    double lo = 0.0, hi = kRhoSearchUpper;
    double x1 = hi - golden * (hi - lo), x2 = lo + golden * (hi - lo);
    double f1 = objective(x1), f2 = objective(x2);
    while (hi - lo > 1e-4) {
      if (f1 < f2) {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + golden * (hi - lo);
        f2 = objective(x2);
      } else {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - golden * (hi - lo);
        f1 = objective(x1);
      }
    }
    out.raw(t) = 0.5 * (lo + hi);
  }

  const int half = window / 2;
  out.smoothed.resize(T);
  for (int t = 0; t < T; ++t) {
    const int from = std::max(0, t - half), to = std::min(T - 1, t + half);
    out.smoothed(t) = out.raw.segment(from, to - from + 1).mean();
  }
  return out;
}

}  // namespace carcopula

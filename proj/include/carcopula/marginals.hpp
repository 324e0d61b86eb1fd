#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "panel.hpp"
#include "special.hpp"

namespace carcopula {

/// t* = (t - m_t) / s_t for t = 1..T, with the population SD.
struct TimeStandardizer {
  int T = 0;
  double m_t = 0.0;
  double s_t = 1.0;
  Eigen::VectorXd t_star;
};

inline TimeStandardizer standardize_time(int T) {
  if (T < 2) throw InputError("standardize_time: need T >= 2, got " + std::to_string(T));
  TimeStandardizer ts;
  ts.T = T;
  const double n = T;
  ts.m_t = (n + 1.0) / 2.0;
  // (1/T) sum t^2 - m_t^2 = (T^2 - 1) / 12
  ts.s_t = std::sqrt((n * n - 1.0) / 12.0);
  ts.t_star.resize(T);
  for (int t = 0; t < T; ++t) ts.t_star(t) = (t + 1.0 - ts.m_t) / ts.s_t;
  return ts;
}

/// Region-wise gamma marginal: shape a_i, rate lambda_it = a_i b_i exp(c_i t*).
///
/// Mean b_i^{-1} exp(-c_i t*), CV a_i^{-1/2}. In log-link form
/// log mu_it = alpha~_i + beta~_i t* with alpha~_i = -log b_i, beta~_i = -c_i.
struct GammaSvcParams {
  Eigen::VectorXd a;
  Eigen::VectorXd b;
  Eigen::VectorXd c;

  [[nodiscard]] int n() const { return static_cast<int>(a.size()); }
  [[nodiscard]] Eigen::VectorXd a_star() const { return a.array().log().matrix(); }
  [[nodiscard]] Eigen::VectorXd b_star() const { return b.array().log().matrix(); }

  static GammaSvcParams from_log(const Eigen::VectorXd& a_star, const Eigen::VectorXd& b_star,
                                 const Eigen::VectorXd& c) {
    return {a_star.array().exp().matrix(), b_star.array().exp().matrix(), c};
  }
};

struct MarginalComponents {
  double mu = 0.0;
  double lambda = 0.0;
};

inline MarginalComponents marginal_components(const GammaSvcParams& p, const TimeStandardizer& ts, int i, int t) {
  const double lambda = p.a(i) * p.b(i) * std::exp(p.c(i) * ts.t_star(t));
  return {p.a(i) / lambda, lambda};
}

inline double gamma_logpdf(double y, double shape, double rate) {
  if (!(y > 0.0) || !(shape > 0.0) || !(rate > 0.0))
    throw InputError("gamma_logpdf: y, shape and rate must be positive");
  return shape * std::log(rate) - special::log_gamma(shape) + (shape - 1.0) * std::log(y) - rate * y;
}

inline double gamma_cdf(double y, double shape, double rate) {
  if (!(shape > 0.0) || !(rate > 0.0)) throw InputError("gamma_cdf: shape and rate must be positive");
  if (!(y > 0.0)) return 0.0;
  return special::gamma_p(shape, rate * y);
}

inline double gamma_quantile(double u, double shape, double rate) {
  if (!(u > 0.0 && u < 1.0)) throw InputError("gamma_quantile: u must lie strictly inside (0,1)");
  if (!(shape > 0.0) || !(rate > 0.0)) throw InputError("gamma_quantile: shape and rate must be positive");
  return special::gamma_p_inv(shape, u) / rate;
}

inline constexpr double kPitClamp = 1e-12;

inline double clamp_pit(double u, int* clamp_count = nullptr) {
  if (u < kPitClamp) {
    if (clamp_count) ++*clamp_count;
    return kPitClamp;
  }
  if (u > 1.0 - kPitClamp) {
    if (clamp_count) ++*clamp_count;
    return 1.0 - kPitClamp;
  }
  return u;
}

// ---------------------------------------------------------------------------
// Per-region maximum likelihood

/// MLE of one region's (a, b, c). Standard errors come from the inverse of the
/// numerically differentiated observed information on the (log a, log b, c)
/// scale; se_a and se_b are delta-method transforms of those.
struct RegionGammaFit {
  double a = 0.0, b = 0.0, c = 0.0;
  Eigen::Vector3d se_log = Eigen::Vector3d::Zero();  // (log a, log b, c)
  double se_a = 0.0, se_b = 0.0, se_c = 0.0;
  double loglik = -std::numeric_limits<double>::infinity();
  double grad_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int n_obs = 0;
  bool used_simplex = false;
};

class GammaFitError : public NumericalError {
 public:
  GammaFitError(const std::string& what, RegionGammaFit best) : NumericalError(what), best_(best) {}
  [[nodiscard]] const RegionGammaFit& best_iterate() const { return best_; }

 private:
  RegionGammaFit best_;
};

inline constexpr int kMinObservationsForMle = 5;

namespace detail {

struct RegionSeries {
  std::vector<double> y, log_y, t_star;
};

inline RegionSeries observed_series(std::span<const double> y, const TimeStandardizer& ts) {
  if (static_cast<int>(y.size()) != ts.T) throw InputError("series length does not match the time standardizer");
  RegionSeries s;
  for (int t = 0; t < ts.T; ++t) {
    const double v = y[static_cast<std::size_t>(t)];
    if (std::isnan(v)) continue;
    if (!(v > 0.0)) throw InputError("gamma fit: observation at t=" + std::to_string(t + 1) + " is not positive");
    s.y.push_back(v);
    s.log_y.push_back(std::log(v));
    s.t_star.push_back(ts.t_star(t));
  }
  return s;
}

/// Log-likelihood and gradient in theta = (log a, log b, c).
inline double gamma_region_loglik(const RegionSeries& s, const Eigen::Vector3d& theta, Eigen::Vector3d* grad) {
  const double a = std::exp(theta(0));
  const double lg = special::log_gamma(a);
  const double psi = grad ? special::digamma(a) : 0.0;
  double ll = 0.0;
  Eigen::Vector3d g = Eigen::Vector3d::Zero();
  for (std::size_t k = 0; k < s.y.size(); ++k) {
    const double log_rate = theta(0) + theta(1) + theta(2) * s.t_star[k];
    const double ly = std::exp(log_rate) * s.y[k];
    ll += a * log_rate - lg + (a - 1.0) * s.log_y[k] - ly;
    if (grad) {
      g(0) += a * (log_rate + 1.0 - psi + s.log_y[k]) - ly;
      g(1) += a - ly;
      g(2) += s.t_star[k] * (a - ly);
    }
  }
  if (grad) *grad = g;
  return ll;
}

inline Eigen::Matrix3d numeric_hessian(const RegionSeries& s, const Eigen::Vector3d& theta) {
  Eigen::Matrix3d H;
  for (int k = 0; k < 3; ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta(k)));
    Eigen::Vector3d up = theta, dn = theta, gu, gd;
    up(k) += h;
    dn(k) -= h;
    gamma_region_loglik(s, up, &gu);
    gamma_region_loglik(s, dn, &gd);
    H.col(k) = (gu - gd) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

/// Nelder-Mead on -loglik; used when the quasi-Newton line search stalls.
inline Eigen::Vector3d simplex_minimize(const RegionSeries& s, Eigen::Vector3d start, int max_iter) {
  auto f = [&](const Eigen::Vector3d& x) {
    const double v = -gamma_region_loglik(s, x, nullptr);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };
  std::array<Eigen::Vector3d, 4> pts;
  std::array<double, 4> val{};
  pts[0] = start;
  for (int k = 0; k < 3; ++k) {
    pts[static_cast<std::size_t>(k + 1)] = start;
    pts[static_cast<std::size_t>(k + 1)](k) += 0.1;
  }
  for (std::size_t k = 0; k < 4; ++k) val[k] = f(pts[k]);
  for (int it = 0; it < max_iter; ++it) {
    std::array<std::size_t, 4> order{0, 1, 2, 3};
    std::sort(order.begin(), order.end(), [&](auto l, auto r) { return val[l] < val[r]; });
    auto P = pts;
    auto V = val;
    for (std::size_t k = 0; k < 4; ++k) {
      pts[k] = P[order[k]];
      val[k] = V[order[k]];
    }
    if (std::abs(val[3] - val[0]) < 1e-13 * (1.0 + std::abs(val[0]))) break;
    const Eigen::Vector3d centroid = (pts[0] + pts[1] + pts[2]) / 3.0;
    const Eigen::Vector3d refl = centroid + (centroid - pts[3]);
    const double fr = f(refl);
    if (fr < val[0]) {
      const Eigen::Vector3d exp_pt = centroid + 2.0 * (centroid - pts[3]);
      const double fe = f(exp_pt);
      if (fe < fr) {
        pts[3] = exp_pt;
        val[3] = fe;
      } else {
        pts[3] = refl;
        val[3] = fr;
      }
    } else if (fr < val[2]) {
      pts[3] = refl;
      val[3] = fr;
    } else {
      const Eigen::Vector3d con = centroid + 0.5 * (pts[3] - centroid);
      const double fc = f(con);
      if (fc < val[3]) {
        pts[3] = con;
        val[3] = fc;
      } else {
        for (std::size_t k = 1; k < 4; ++k) {
          pts[k] = pts[0] + 0.5 * (pts[k] - pts[0]);
          val[k] = f(pts[k]);
        }
      }
    }
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < 4; ++k)
    if (val[k] < val[best]) best = k;
  return pts[best];
}

}  // namespace detail

/// Method-of-moments start: a = mean^2 / var, b = 1 / mean, c = 0.
inline Eigen::Vector3d gamma_moment_start(std::span<const double> y) {
  double sum = 0.0, sq = 0.0;
  int n = 0;
  for (double v : y) {
    if (std::isnan(v)) continue;
    sum += v;
    sq += v * v;
    ++n;
  }
  if (n < 2) throw InputError("gamma_moment_start: need at least 2 observations");
  const double mean = sum / n;
  const double var = std::max((sq - n * mean * mean) / (n - 1), 1e-12 * mean * mean);
  const double a = std::clamp(mean * mean / var, 1e-3, 1e6);
  return {std::log(a), -std::log(mean), 0.0};
}

/// Maximizes sum_t log Gamma(y_t; a, a b exp(c t*)) over the observed entries
/// of `y` (NaN = missing). Quasi-Newton (BFGS) on (log a, log b, c) from the
/// moment start, simplex fallback when the line search stalls, and a final
/// Newton polish. Converged when the gradient norm is below 1e-8.
inline RegionGammaFit fit_region_gamma(std::span<const double> y, const TimeStandardizer& ts) {
  const auto s = detail::observed_series(y, ts);
  const int n_obs = static_cast<int>(s.y.size());
  if (n_obs < kMinObservationsForMle)
    throw InputError("fit_region_gamma: need at least " + std::to_string(kMinObservationsForMle) +
                     " observations, got " + std::to_string(n_obs));
  const auto [lo, hi] = std::minmax_element(s.y.begin(), s.y.end());
  if (*hi - *lo <= 1e-12 * *hi)
    throw NumericalError("fit_region_gamma: all observations are equal, so the gamma shape is unbounded");

  constexpr double kGradTol = 1e-8;
  constexpr int kMaxIter = 500;

  Eigen::Vector3d x = gamma_moment_start(s.y);
  Eigen::Vector3d g;
  double f = -detail::gamma_region_loglik(s, x, &g);
  g = -g;
  Eigen::Matrix3d Hinv = Eigen::Matrix3d::Identity() / std::max(1.0, g.norm());

  RegionGammaFit fit;
  fit.n_obs = n_obs;
  int it = 0;
  bool stalled = false;
  for (; it < kMaxIter && g.norm() >= kGradTol; ++it) {
    Eigen::Vector3d dir = -Hinv * g;
    if (dir.dot(g) >= 0.0) {
      Hinv = Eigen::Matrix3d::Identity() / std::max(1.0, g.norm());
      dir = -Hinv * g;
    }
    double step = 1.0;
    Eigen::Vector3d x_new, g_new;
    double f_new = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      f_new = -detail::gamma_region_loglik(s, x_new, &g_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * dir.dot(g)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      stalled = true;
      break;
    }
    g_new = -g_new;
    const Eigen::Vector3d sk = x_new - x;
    const Eigen::Vector3d yk = g_new - g;
    const double sy = sk.dot(yk);
    if (sy > 1e-16 * sk.norm() * yk.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::Matrix3d I = Eigen::Matrix3d::Identity();
      Hinv = (I - rho * sk * yk.transpose()) * Hinv * (I - rho * yk * sk.transpose()) + rho * sk * sk.transpose();
    }
    x = x_new;
    f = f_new;
    g = g_new;
  }

  if (stalled) {
    fit.used_simplex = true;
    x = detail::simplex_minimize(s, x, 4000);
    f = -detail::gamma_region_loglik(s, x, &g);
    g = -g;
  }

  // Newton polish with the numerical Hessian of the analytic gradient.
  for (int k = 0; k < 20 && g.norm() >= kGradTol; ++k, ++it) {
    const Eigen::Matrix3d H = -detail::numeric_hessian(s, x);  // Hessian of f = -loglik
    Eigen::LLT<Eigen::Matrix3d> llt(H);
    if (llt.info() != Eigen::Success) break;
    const Eigen::Vector3d dir = -llt.solve(g);
    double step = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 30; ++ls) {
      Eigen::Vector3d x_new = x + step * dir, g_new;
      const double f_new = -detail::gamma_region_loglik(s, x_new, &g_new);
      g_new = -g_new;
      if (std::isfinite(f_new) && (f_new <= f || g_new.norm() < g.norm())) {
        x = x_new;
        f = f_new;
        g = g_new;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }

  fit.a = std::exp(x(0));
  fit.b = std::exp(x(1));
  fit.c = x(2);
  fit.loglik = -f;
  fit.grad_norm = g.norm();
  fit.iterations = it;
  if (!(fit.grad_norm < kGradTol))
    throw GammaFitError("fit_region_gamma: no convergence (gradient norm " + std::to_string(fit.grad_norm) + ")",
                        fit);

  const Eigen::Matrix3d info = -detail::numeric_hessian(s, x);
  Eigen::LLT<Eigen::Matrix3d> llt(info);
  if (llt.info() == Eigen::Success) {
    const Eigen::Matrix3d cov = llt.solve(Eigen::Matrix3d::Identity());
    fit.se_log = cov.diagonal().cwiseSqrt();
    fit.se_a = fit.a * fit.se_log(0);
    fit.se_b = fit.b * fit.se_log(1);
    fit.se_c = fit.se_log(2);
  } else {
    fit.se_log.setConstant(std::numeric_limits<double>::quiet_NaN());
    fit.se_a = fit.se_b = fit.se_c = std::numeric_limits<double>::quiet_NaN();
  }
  return fit;
}

/// Per-region MLEs for a whole panel.
struct PanelGammaFit {
  GammaSvcParams params;
  std::vector<RegionGammaFit> regions;
};

inline PanelGammaFit fit_panel_gamma(const RegionalPanel& panel, const TimeStandardizer& ts) {
  PanelGammaFit out;
  const int n = panel.n();
  out.params.a.resize(n);
  out.params.b.resize(n);
  out.params.c.resize(n);
  std::vector<double> row(static_cast<std::size_t>(panel.T()));
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < panel.T(); ++t) row[static_cast<std::size_t>(t)] = panel.values(i, t);
    RegionGammaFit f;
    try {
      f = fit_region_gamma(row, ts);
    } catch (const NumericalError& e) {
      throw NumericalError("region '" + panel.regions[static_cast<std::size_t>(i)] + "': " + e.what());
    } catch (const std::overflow_error& e) {
      throw NumericalError("region '" + panel.regions[static_cast<std::size_t>(i)] + "': " + e.what());
    } catch (const std::domain_error& e) {
      throw NumericalError("region '" + panel.regions[static_cast<std::size_t>(i)] + "': " + e.what());
    }
    out.params.a(i) = f.a;
    out.params.b(i) = f.b;
    out.params.c(i) = f.c;
    out.regions.push_back(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lognormal comparison model: log y_t ~ N(alpha* + beta* t, sigma2), t = 1..T.

struct LognormalRegionParams {
  double alpha_star = 0.0;
  double beta_star = 0.0;
  double sigma2 = 0.0;  // residual mean square with denominator = #observed
  // Asymptotic standard errors from the inverse Fisher information.
  double se_alpha_star = 0.0, se_beta_star = 0.0, se_sigma2 = 0.0;
  bool degenerate = false;
};

inline LognormalRegionParams fit_region_lognormal(std::span<const double> y, const TimeStandardizer& ts) {
  if (static_cast<int>(y.size()) != ts.T) throw InputError("fit_region_lognormal: series length mismatch");
  double n = 0, st = 0, sl = 0, stt = 0, stl = 0;
  for (int t = 0; t < ts.T; ++t) {
    const double v = y[static_cast<std::size_t>(t)];
    if (std::isnan(v)) continue;
    if (!(v > 0.0)) throw InputError("fit_region_lognormal: observation at t=" + std::to_string(t + 1) + " is not positive");
    const double tt = t + 1.0, l = std::log(v);
    n += 1;
    st += tt;
    sl += l;
    stt += tt * tt;
    stl += tt * l;
  }
  if (n < 3) throw InputError("fit_region_lognormal: need at least 3 observations");
  LognormalRegionParams p;
  const double tbar = st / n, lbar = sl / n;
  const double sxx = stt - n * tbar * tbar;
  p.beta_star = (stl - n * tbar * lbar) / sxx;
  p.alpha_star = lbar - p.beta_star * tbar;
  double rss = 0.0, scale = 0.0;
  for (int t = 0; t < ts.T; ++t) {
    const double v = y[static_cast<std::size_t>(t)];
    if (std::isnan(v)) continue;
    const double r = std::log(v) - p.alpha_star - p.beta_star * (t + 1.0);
    rss += r * r;
    scale += std::log(v) * std::log(v);
  }
  p.sigma2 = rss / n;
  p.se_alpha_star = std::sqrt(p.sigma2 * (1.0 / n + tbar * tbar / sxx));
  p.se_beta_star = std::sqrt(p.sigma2 / sxx);
  p.se_sigma2 = p.sigma2 * std::sqrt(2.0 / n);
  p.degenerate = p.sigma2 <= 1e-24 * std::max(1.0, scale / n);
  return p;
}

/// u_it = F(y_it; a_i, lambda_it), clamped to [1e-12, 1 - 1e-12]; NaN stays NaN.
struct PitResult {
  Eigen::MatrixXd u;
  int clamp_count = 0;
};

inline PitResult pit_transform(const RegionalPanel& panel, const GammaSvcParams& params, const TimeStandardizer& ts) {
  if (params.n() != panel.n() || ts.T != panel.T()) throw InputError("pit_transform: dimension mismatch");
  PitResult r;
  r.u.resize(panel.n(), panel.T());
  for (int i = 0; i < panel.n(); ++i) {
    for (int t = 0; t < panel.T(); ++t) {
      if (panel.is_missing(i, t)) {
        r.u(i, t) = kMissing;
        continue;
      }
      const auto mc = marginal_components(params, ts, i, t);
      r.u(i, t) = clamp_pit(gamma_cdf(panel.values(i, t), params.a(i), mc.lambda), &r.clamp_count);
    }
  }
  return r;
}

inline PitResult pit_transform_lognormal(const RegionalPanel& panel, const std::vector<LognormalRegionParams>& params) {
  if (static_cast<int>(params.size()) != panel.n()) throw InputError("pit_transform_lognormal: dimension mismatch");
  PitResult r;
  r.u.resize(panel.n(), panel.T());
  for (int i = 0; i < panel.n(); ++i) {
    const auto& p = params[static_cast<std::size_t>(i)];
    const double sd = std::sqrt(p.sigma2);
    for (int t = 0; t < panel.T(); ++t) {
      if (panel.is_missing(i, t)) {
        r.u(i, t) = kMissing;
        continue;
      }
      const double zz = (std::log(panel.values(i, t)) - p.alpha_star - p.beta_star * (t + 1.0)) / sd;
      r.u(i, t) = clamp_pit(special::normal_cdf(zz), &r.clamp_count);
    }
  }
  return r;
}

/// z_it = Phi^{-1}(u_it), NaN preserved.
inline Eigen::MatrixXd latent_scores(const Eigen::MatrixXd& u) {
  return u.unaryExpr([](double v) { return std::isnan(v) ? v : special::normal_quantile(v); });
}

}  // namespace carcopula

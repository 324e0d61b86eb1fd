#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include <carcopula/marginals.hpp>

#include "test_support.hpp"

using namespace carcopula;
using carcopula::testing::ks_statistic;

namespace {

// Adaptive Simpson quadrature used as an oracle independent of the incomplete
// gamma implementation.
double simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
               double whole, double tol, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6 * (fa + 4 * flm + fm), right = (b - m) / 6 * (fm + 4 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15 * tol) return left + right + (left + right - whole) / 15;
  return simpson(f, a, m, fa, flm, fm, left, tol / 2, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2, depth - 1);
}

double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return simpson(f, a, b, fa, fm, fb, (b - a) / 6 * (fa + 4 * fm + fb), tol, 50);
}

double oracle_gamma_cdf(double y, double shape, double rate) {
  const double lg = std::lgamma(shape);
  auto pdf = [&](double x) {
    return x <= 0 ? 0.0 : std::exp(shape * std::log(rate) - lg + (shape - 1) * std::log(x) - rate * x);
  };
  return integrate(pdf, 0.0, y, 1e-15);
}

double oracle_gamma_quantile(double u, double shape, double rate) {
  double lo = 0.0, hi = 1.0;
  while (oracle_gamma_cdf(hi, shape, rate) < u) hi *= 2;
  for (int k = 0; k < 200 && hi - lo > 1e-13 * hi; ++k) {
    const double mid = 0.5 * (lo + hi);
    (oracle_gamma_cdf(mid, shape, rate) < u ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> simulate_series(std::mt19937_64& rng, double a, double b, double c, const TimeStandardizer& ts) {
  std::vector<double> y(static_cast<std::size_t>(ts.T));
  for (int t = 0; t < ts.T; ++t) {
    const double lambda = a * b * std::exp(c * ts.t_star(t));
    std::gamma_distribution<double> g(a, 1.0 / lambda);
    y[static_cast<std::size_t>(t)] = g(rng);
  }
  return y;
}

}  // namespace

TEST(StandardizeTime, ThreeYears) {
  auto ts = standardize_time(3);
  EXPECT_DOUBLE_EQ(ts.m_t, 2.0);
  EXPECT_NEAR(ts.s_t, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(ts.t_star(0), -1.0 / std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(ts.t_star(1), 0.0, 1e-15);
  EXPECT_NEAR(ts.t_star(2), 1.0 / std::sqrt(2.0 / 3.0), 1e-15);
}

TEST(StandardizeTime, MomentsForManyLengths) {
  for (int T : {2, 5, 64, 117, 1000}) {
    auto ts = standardize_time(T);
    EXPECT_NEAR(ts.t_star.sum(), 0.0, 1e-12) << T;
    EXPECT_NEAR(ts.t_star.squaredNorm() / T, 1.0, 1e-12) << T;
  }
}

TEST(StandardizeTime, RejectsSingleYear) { EXPECT_THROW(standardize_time(1), InputError); }

TEST(GammaDensity, Examples) {
  EXPECT_NEAR(gamma_logpdf(1.0, 1.0, 1.0), -1.0, 1e-15);
  EXPECT_NEAR(gamma_logpdf(1.0, 2.0, 3.0), 2 * std::log(3.0) - 3.0, 1e-14);
  EXPECT_THROW(gamma_logpdf(0.0, 2.0, 1.0), InputError);
  EXPECT_THROW(gamma_logpdf(1.0, 0.0, 1.0), InputError);
  EXPECT_THROW(gamma_logpdf(1.0, 2.0, -1.0), InputError);
}

TEST(GammaCdf, ExponentialCases) {
  EXPECT_NEAR(gamma_cdf(1.0, 1.0, 1.0), 1.0 - std::exp(-1.0), 1e-15);
  EXPECT_NEAR(gamma_quantile(0.5, 1.0, 1.0), std::log(2.0), 1e-14);
  EXPECT_EQ(gamma_cdf(0.0, 3.0, 1.0), 0.0);
  EXPECT_THROW(gamma_quantile(0.0, 1.0, 1.0), InputError);
  EXPECT_THROW(gamma_quantile(1.0, 1.0, 1.0), InputError);
}

TEST(GammaCdf, QuantileMatchesQuadratureOracle) {
  const double q = gamma_quantile(0.95, 7.3, 0.02);
  const double oracle = oracle_gamma_quantile(0.95, 7.3, 0.02);
  EXPECT_NEAR(q / oracle, 1.0, 1e-8);
}

TEST(GammaCdf, CdfMatchesQuadratureOracle) {
  for (double shape : {0.7, 1.0, 3.5, 12.0}) {
    for (double y : {0.1, 0.9, 2.5, 8.0}) {
      EXPECT_NEAR(gamma_cdf(y, shape, 1.3), oracle_gamma_cdf(y, shape, 1.3), 1e-9) << shape << " " << y;
    }
  }
}

TEST(GammaCdf, RoundTripAndMonotone) {
  for (double shape : {0.3, 1.0, 4.0, 25.0, 300.0}) {
    double prev_q = 0.0, prev_c = -1.0;
    for (int k = 1; k < 1000; ++k) {
      const double u = k / 1000.0;
      const double q = gamma_quantile(u, shape, 0.5);
      EXPECT_NEAR(gamma_cdf(q, shape, 0.5), u, 1e-10);
      EXPECT_GT(q, prev_q);
      prev_q = q;
      const double c = gamma_cdf(0.05 * k, shape, 0.5);
      EXPECT_GE(c, prev_c);
      prev_c = c;
    }
  }
}

TEST(MarginalComponents, Identities) {
  GammaSvcParams p{Eigen::Vector2d(2.0, 5.0), Eigen::Vector2d(0.5, 0.01), Eigen::Vector2d(0.1, 0.0)};
  auto ts = standardize_time(3);
  const auto mid = marginal_components(p, ts, 0, 1);  // t* = 0
  EXPECT_NEAR(mid.lambda, 1.0, 1e-15);
  EXPECT_NEAR(mid.mu, 2.0, 1e-15);
  for (int i = 0; i < 2; ++i)
    for (int t = 0; t < 3; ++t) {
      const auto mc = marginal_components(p, ts, i, t);
      EXPECT_NEAR(mc.mu * mc.lambda, p.a(i), 1e-13);
      EXPECT_NEAR(mc.mu, std::exp(-p.c(i) * ts.t_star(t)) / p.b(i), 1e-12);
    }
  EXPECT_EQ(marginal_components(p, ts, 1, 0).lambda, marginal_components(p, ts, 1, 2).lambda);
}

TEST(MarginalComponents, MonteCarloMeanAndVariance) {
  const double a = 3.0, b = 0.02, c = 0.3, tstar = 1.2;
  const double mean = std::exp(-c * tstar) / b, var = mean * mean / a;
  const double lambda = a * b * std::exp(c * tstar);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int N = 1000000;
  double s = 0, ss = 0;
  for (int k = 0; k < N; ++k) {
    double u = unif(rng);
    if (u == 0.0) u = 0.5;
    const double y = gamma_quantile(u, a, lambda);
    s += y;
    ss += y * y;
  }
  const double m = s / N, v = ss / N - m * m;
  EXPECT_NEAR(m, mean, 4 * std::sqrt(var / N));
  // Var of the sample variance for a gamma: (mu4 - sigma^4)/N with mu4 = 3 sigma^4 (1 + 2/a)
  const double mu4 = 3 * var * var * (1 + 2 / a);
  EXPECT_NEAR(v, var, 4 * std::sqrt((mu4 - var * var) / N));
}

TEST(GammaLoglik, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  auto ts = standardize_time(40);
  auto y = simulate_series(rng, 4.0, 0.01, 0.2, ts);
  const auto s = detail::observed_series(y, ts);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Vector3d th(std::log(4.0) + nd(rng), std::log(0.01) + 0.5 * nd(rng), 0.2 + 0.3 * nd(rng));
    Eigen::Vector3d g;
    detail::gamma_region_loglik(s, th, &g);
    for (int k = 0; k < 3; ++k) {
      Eigen::Vector3d e = Eigen::Vector3d::Zero();
      e(k) = 1e-5;
      const double fd =
          (detail::gamma_region_loglik(s, th + e, nullptr) - detail::gamma_region_loglik(s, th - e, nullptr)) / 2e-5;
      EXPECT_NEAR(g(k), fd, 1e-4 * std::max(1.0, std::abs(fd))) << "rep " << rep << " k " << k;
    }
  }
}

TEST(FitRegionGamma, LongSeriesRecoversTruth) {
  std::mt19937_64 rng(2025);
  auto ts = standardize_time(10000);
  auto y = simulate_series(rng, 5.0, 0.002, 0.1, ts);
  auto f = fit_region_gamma(y, ts);
  EXPECT_LT(f.grad_norm, 1e-8);
  EXPECT_NEAR(f.a, 5.0, 3 * f.se_a);
  EXPECT_NEAR(f.b, 0.002, 3 * f.se_b);
  EXPECT_NEAR(f.c, 0.1, 3 * f.se_c);
  EXPECT_EQ(f.n_obs, 10000);
}

TEST(FitRegionGamma, NoTrendCoverage) {
  std::mt19937_64 rng(77);
  auto ts = standardize_time(64);
  int covered = 0;
  for (int rep = 0; rep < 100; ++rep) {
    auto y = simulate_series(rng, 6.0, 0.001, 0.0, ts);
    auto f = fit_region_gamma(y, ts);
    if (std::abs(f.c) < 3 * f.se_c) ++covered;
  }
  EXPECT_GE(covered, 90);
}

TEST(FitRegionGamma, MissingEntriesSkipped) {
  std::mt19937_64 rng(4);
  auto ts = standardize_time(30);
  auto y = simulate_series(rng, 5.0, 0.01, 0.0, ts);
  auto full = fit_region_gamma(y, ts);
  y[3] = kMissing;
  y[17] = kMissing;
  auto part = fit_region_gamma(y, ts);
  EXPECT_EQ(part.n_obs, 28);
  EXPECT_NE(part.a, full.a);
}

TEST(FitRegionGamma, Errors) {
  auto ts = standardize_time(10);
  std::vector<double> y{1, 2, 3, 0.0, 5, 6, 7, 8, 9, 10};
  EXPECT_THROW(fit_region_gamma(y, ts), InputError);
  std::vector<double> few{1, 2, 3, 4, kMissing, kMissing, kMissing, kMissing, kMissing, kMissing};
  EXPECT_THROW(fit_region_gamma(few, ts), InputError);
  EXPECT_THROW(fit_region_gamma(std::vector<double>{1, 2, 3}, ts), InputError);
}

TEST(FitRegionGamma, ConstantSeriesIsNumericalError) {
  auto ts = standardize_time(20);
  std::vector<double> y(20, 500.0);
  EXPECT_THROW(fit_region_gamma(y, ts), NumericalError);
}

TEST(FitRegionLognormal, NoiselessIsDegenerate) {
  auto ts = standardize_time(12);
  std::vector<double> y(12, std::exp(1.0));
  auto p = fit_region_lognormal(y, ts);
  EXPECT_NEAR(p.alpha_star, 1.0, 1e-12);
  EXPECT_NEAR(p.beta_star, 0.0, 1e-12);
  EXPECT_TRUE(p.degenerate);
}

TEST(FitRegionLognormal, MatchesNormalEquations) {
  std::mt19937_64 rng(12);
  std::lognormal_distribution<double> ln(2.0, 0.4);
  const int T = 50;
  auto ts = standardize_time(T);
  std::vector<double> y(T);
  for (auto& v : y) v = ln(rng);
  y[7] = kMissing;
  std::vector<int> rows;
  for (int t = 0; t < T; ++t)
    if (!std::isnan(y[static_cast<std::size_t>(t)])) rows.push_back(t);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), 2);
  Eigen::VectorXd l(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    X(r, 0) = 1.0;
    X(r, 1) = rows[static_cast<std::size_t>(r)] + 1.0;
    l(r) = std::log(y[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])]);
  }
  const Eigen::Vector2d beta = (X.transpose() * X).ldlt().solve(X.transpose() * l);
  const double sigma2 = (l - X * beta).squaredNorm() / static_cast<double>(X.rows());
  auto p = fit_region_lognormal(y, ts);
  EXPECT_NEAR(p.alpha_star, beta(0), 1e-10);
  EXPECT_NEAR(p.beta_star, beta(1), 1e-10);
  EXPECT_NEAR(p.sigma2, sigma2, 1e-10);
  EXPECT_FALSE(p.degenerate);
  const Eigen::Matrix2d cov = sigma2 * (X.transpose() * X).inverse();
  EXPECT_NEAR(p.se_alpha_star, std::sqrt(cov(0, 0)), 1e-10);
  EXPECT_NEAR(p.se_beta_star, std::sqrt(cov(1, 1)), 1e-12);
}

TEST(FitRegionLognormal, StandardErrorsMatchSamplingSpread) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> noise(0.0, 0.3);
  const int T = 64, reps = 2000;
  auto ts = standardize_time(T);
  std::vector<double> y(T), beta, sigma2, se_beta, se_sigma2;
  for (int r = 0; r < reps; ++r) {
    for (int t = 0; t < T; ++t) y[static_cast<std::size_t>(t)] = std::exp(6.0 + 0.002 * (t + 1) + noise(rng));
    const auto p = fit_region_lognormal(y, ts);
    beta.push_back(p.beta_star);
    sigma2.push_back(p.sigma2);
    se_beta.push_back(p.se_beta_star);
    se_sigma2.push_back(p.se_sigma2);
  }
  auto sd = [](const std::vector<double>& x) {
    double m = 0, s = 0;
    for (double v : x) m += v;
    m /= static_cast<double>(x.size());
    for (double v : x) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(x.size() - 1));
  };
  auto mean = [](const std::vector<double>& x) {
    double m = 0;
    for (double v : x) m += v;
    return m / static_cast<double>(x.size());
  };
  EXPECT_NEAR(mean(se_beta) / sd(beta), 1.0, 0.08);
  EXPECT_NEAR(mean(se_sigma2) / sd(sigma2), 1.0, 0.1);
}

TEST(PitTransform, MedianMapsToHalf) {
  GammaSvcParams p{Eigen::Vector2d(3.0, 7.0), Eigen::Vector2d(0.01, 0.2), Eigen::Vector2d(-0.2, 0.4)};
  auto ts = standardize_time(4);
  Eigen::MatrixXd y(2, 4);
  for (int i = 0; i < 2; ++i)
    for (int t = 0; t < 4; ++t) y(i, t) = gamma_quantile(0.5, p.a(i), marginal_components(p, ts, i, t).lambda);
  y(1, 2) = kMissing;
  auto r = pit_transform(make_panel(y), p, ts);
  for (int i = 0; i < 2; ++i)
    for (int t = 0; t < 4; ++t) {
      if (i == 1 && t == 2) {
        EXPECT_TRUE(std::isnan(r.u(i, t)));
      } else {
        EXPECT_NEAR(r.u(i, t), 0.5, 1e-10);
      }
    }
  EXPECT_EQ(r.clamp_count, 0);
}

TEST(PitTransform, SimulatedPanelIsUniform) {
  std::mt19937_64 rng(55);
  const int n = 6, T = 400;
  auto ts = standardize_time(T);
  GammaSvcParams p{Eigen::VectorXd::LinSpaced(n, 2, 9), Eigen::VectorXd::LinSpaced(n, 0.001, 0.01),
                   Eigen::VectorXd::LinSpaced(n, -0.2, 0.2)};
  Eigen::MatrixXd y(n, T);
  for (int i = 0; i < n; ++i) {
    auto row = simulate_series(rng, p.a(i), p.b(i), p.c(i), ts);
    for (int t = 0; t < T; ++t) y(i, t) = row[static_cast<std::size_t>(t)];
  }
  auto r = pit_transform(make_panel(y), p, ts);
  std::vector<double> u(r.u.data(), r.u.data() + r.u.size());
  EXPECT_LT(ks_statistic(u, [](double v) { return v; }), 1.36 / std::sqrt(static_cast<double>(u.size())));
}

TEST(PitTransform, ClampsExtremes) {
  int count = 0;
  EXPECT_EQ(clamp_pit(0.0, &count), kPitClamp);
  EXPECT_EQ(clamp_pit(1.0, &count), 1.0 - kPitClamp);
  EXPECT_EQ(clamp_pit(0.3, &count), 0.3);
  EXPECT_EQ(count, 2);
  auto z = latent_scores((Eigen::MatrixXd(1, 3) << 0.5, kMissing, 0.975).finished());
  EXPECT_NEAR(z(0, 0), 0.0, 1e-15);
  EXPECT_TRUE(std::isnan(z(0, 1)));
  EXPECT_NEAR(z(0, 2), 1.959963984540054, 1e-12);
}

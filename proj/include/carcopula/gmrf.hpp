#pragma once

// CAR precision algebra. Everything is dense: the intended graphs have a few
// dozen regions, and factorizations are isolated here so a sparse backend
// could replace them.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "graph.hpp"
#include "random.hpp"

namespace carcopula {

/// Q = sigma^-2 (M - rho W). Proper for rho < 1; rho == 1 is the intrinsic
/// (rank n-1) case whose null space is the constant vector.
struct CarPrecision {
  double rho = 0.0;
  double sigma2 = 1.0;
  Eigen::MatrixXd Q;

  [[nodiscard]] bool proper() const { return rho < 1.0; }
};

inline CarPrecision build_precision(const ArealGraph& graph, double rho, double sigma2) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw InputError("build_precision: rho must lie in [0,1]");
  if (!(sigma2 > 0.0)) throw InputError("build_precision: sigma2 must be positive");
  CarPrecision p;
  p.rho = rho;
  p.sigma2 = sigma2;
  p.Q = graph.car_matrix(rho) / sigma2;
  return p;
}

/// Copula correlation R = Delta^{-1/2} (M - rho W)^{-1} Delta^{-1/2}, held in
/// factored form. delta(i) is the i-th diagonal entry of (M - rho W)^{-1}.
struct ScaledCarCorrelation {
  double rho = 0.0;
  Eigen::MatrixXd chol_L;  // lower factor of M - rho W
  Eigen::VectorXd delta;
  double log_det = 0.0;        // log det(M - rho W)
  Eigen::MatrixXd precision;   // P = Delta^{1/2} (M - rho W) Delta^{1/2} = R^{-1}
  double log_det_precision = 0.0;  // log det P = log_det + sum log delta

  [[nodiscard]] Eigen::Index size() const { return delta.size(); }
};

/// Delta from the Cholesky factor: with M - rho W = L L', Z = L^{-1} solves
/// L Z = I and delta_j is the j-th column sum of squares of Z. No inverse of
/// M - rho W is formed.
inline ScaledCarCorrelation scaled_correlation(const ArealGraph& graph, double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) throw InputError("scaled_correlation: rho must lie in [0,1)");
  const Eigen::MatrixXd K = graph.car_matrix(rho);
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success)
    throw NumericalError("scaled_correlation: M - rho W is not positive definite at rho = " + std::to_string(rho));

  ScaledCarCorrelation s;
  s.rho = rho;
  s.chol_L = llt.matrixL();
  const Eigen::Index n = K.rows();
  if (rho == 0.0) {
    s.delta = graph.degrees.cwiseInverse();
    s.precision = Eigen::MatrixXd::Identity(n, n);
    s.log_det = graph.degrees.array().log().sum();
    s.log_det_precision = 0.0;
    return s;
  }
  const Eigen::MatrixXd Z =
      s.chol_L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n, n));
  s.delta = Z.colwise().squaredNorm().transpose();
  s.log_det = 2.0 * s.chol_L.diagonal().array().log().sum();
  const Eigen::VectorXd root = s.delta.cwiseSqrt();
  s.precision = root.asDiagonal() * K * root.asDiagonal();
  s.log_det_precision = s.log_det + s.delta.array().log().sum();
  return s;
}

struct GmrfLogDensity {
  double value = 0.0;
  bool normalized = true;  // false: unnormalized kernel of an intrinsic field
};

/// log N(x; mean, Q^{-1}). For rho == 1 only the kernel
/// -1/2 (x-mean)' Q (x-mean) is returned and `normalized` is false.
inline GmrfLogDensity gmrf_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const CarPrecision& prec) {
  const Eigen::Index n = prec.Q.rows();
  if (x.size() != n || mean.size() != n) throw InputError("gmrf_logpdf: dimension mismatch");
  const Eigen::VectorXd d = x - mean;
  const double quad = d.dot(prec.Q * d);
  if (!prec.proper()) return {-0.5 * quad, false};
  Eigen::LLT<Eigen::MatrixXd> llt(prec.Q);
  if (llt.info() != Eigen::Success) throw NumericalError("gmrf_logpdf: precision is not positive definite");
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return {0.5 * log_det - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi) - 0.5 * quad, true};
}

/// Exact draw mean + scale * L^{-T} eps, eps ~ N(0, I), where L L' is the
/// precision whose factor is `chol_L`.
inline Eigen::VectorXd sample_gmrf(Rng& rng, const Eigen::VectorXd& mean, const Eigen::MatrixXd& chol_L,
                                   double scale = 1.0) {
  if (mean.size() != chol_L.rows()) throw InputError("sample_gmrf: dimension mismatch");
  Eigen::VectorXd eps = standard_normal_vector(rng, chol_L.rows());
  chol_L.triangularView<Eigen::Lower>().transpose().solveInPlace(eps);
  return mean + scale * eps;
}

/// Conditional law of the unobserved block of x ~ N(0, P^{-1}) given the
/// observed block, read off the precision partition:
///   x_I | x_O ~ N(-P_II^{-1} P_IO x_O, P_II^{-1}).
/// `cond_precision` is P_II (a precision, not a covariance).
struct ConditionalGaussian {
  std::vector<int> missing_idx;
  Eigen::VectorXd cond_mean;
  Eigen::MatrixXd cond_precision;
  Eigen::MatrixXd chol_L;  // lower factor of cond_precision

  /// One draw from the conditional.
  [[nodiscard]] Eigen::VectorXd sample(Rng& rng) const { return sample_gmrf(rng, cond_mean, chol_L); }
};

inline ConditionalGaussian conditional_from_precision(const Eigen::MatrixXd& P, const std::vector<int>& observed_idx,
                                                      const Eigen::VectorXd& observed_vals) {
  const int n = static_cast<int>(P.rows());
  if (P.cols() != n) throw InputError("conditional_from_precision: P must be square");
  if (observed_idx.empty() || static_cast<int>(observed_idx.size()) >= n)
    throw InputError("conditional_from_precision: observed set must be a nonempty proper subset");
  if (static_cast<Eigen::Index>(observed_idx.size()) != observed_vals.size())
    throw InputError("conditional_from_precision: observed index/value size mismatch");

  std::vector<char> is_obs(static_cast<std::size_t>(n), 0);
  for (int k : observed_idx) {
    if (k < 0 || k >= n) throw InputError("conditional_from_precision: index out of range");
    if (is_obs[static_cast<std::size_t>(k)]) throw InputError("conditional_from_precision: duplicate index");
    is_obs[static_cast<std::size_t>(k)] = 1;
  }

  ConditionalGaussian c;
  for (int k = 0; k < n; ++k)
    if (!is_obs[static_cast<std::size_t>(k)]) c.missing_idx.push_back(k);

  const auto m = static_cast<Eigen::Index>(c.missing_idx.size());
  const auto o = static_cast<Eigen::Index>(observed_idx.size());
  c.cond_precision.resize(m, m);
  Eigen::MatrixXd P_io(m, o);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) c.cond_precision(a, b) = P(c.missing_idx[a], c.missing_idx[b]);
    for (Eigen::Index b = 0; b < o; ++b) P_io(a, b) = P(c.missing_idx[a], observed_idx[static_cast<std::size_t>(b)]);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(c.cond_precision);
  if (llt.info() != Eigen::Success) throw NumericalError("conditional_from_precision: P_II is singular");
  c.chol_L = llt.matrixL();
  c.cond_mean = -llt.solve(P_io * observed_vals);
  return c;
}

}  // namespace carcopula

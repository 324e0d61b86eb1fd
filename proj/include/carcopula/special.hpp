#pragma once

// Scalar special functions shared by the marginal, copula and diagnostic code.
// Thin wrappers over Boost.Math evaluated in plain double precision.

#include <cmath>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>

namespace carcopula::special {

namespace detail {
using Policy = boost::math::policies::policy<boost::math::policies::promote_double<false>>;
}

inline double log_gamma(double x) { return boost::math::lgamma(x, detail::Policy()); }

inline double digamma(double x) { return boost::math::digamma(x, detail::Policy()); }

/// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x) {
  if (x <= 0.0) return 0.0;
  return boost::math::gamma_p(a, x, detail::Policy());
}

/// Inverse of P(a, .) in its second argument, p in (0,1).
inline double gamma_p_inv(double a, double p) { return boost::math::gamma_p_inv(a, p, detail::Policy()); }

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_logpdf(double x) { return -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi); }

/// Standard normal quantile, p in (0,1).
inline double normal_quantile(double p) {
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p, detail::Policy());
}

}  // namespace carcopula::special

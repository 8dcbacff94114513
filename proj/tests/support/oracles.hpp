#pragma once

// Independent reference computations used by the tests.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "geomask/geo.hpp"

namespace oracle {

// K_1(x) = int_0^inf exp(-x cosh t) cosh t dt.
inline double bessel_k1(double x) {
  boost::math::quadrature::exp_sinh<double> integrator;
  return integrator.integrate([x](double t) {
    const double c = std::cosh(t);
    return std::isfinite(c) ? std::exp(-x * c) * c : 0.0;
  });
}

// Matern (nu = 1) correlation from the quadrature K_1.
inline double matern_corr(double d, double kappa) {
  if (d == 0.0) return 1.0;
  const double x = kappa * d;
  return x * bessel_k1(x);
}

// Asymptotic Kolmogorov distribution tail: P(sqrt(n) D > x).
inline double kolmogorov_tail(double x) {
  if (x <= 0.0) return 1.0;
  double s = 0.0;
  for (int k = 1; k <= 100; ++k) s += (k % 2 ? 1.0 : -1.0) * std::exp(-2.0 * k * k * x * x);
  return std::clamp(2.0 * s, 0.0, 1.0);
}

// One-sample KS p-value against the CDF `cdf`.
template <class Cdf>
double ks_pvalue(std::vector<double> xs, Cdf cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  const double sn = std::sqrt(n);
  return kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
}

// Pearson chi-square goodness-of-fit p-value; cells with expected count
// below 5 are pooled.
inline double chi_square_pvalue(const std::vector<double>& observed, const std::vector<double>& expected_prob) {
  double total = 0.0;
  for (double o : observed) total += o;
  std::vector<double> obs, exp;
  double po = 0.0, pe = 0.0;
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const double e = expected_prob[k] * total;
    if (e < 5.0) {
      po += observed[k];
      pe += e;
    } else {
      obs.push_back(observed[k]);
      exp.push_back(e);
    }
  }
  if (pe > 0.0) {
    obs.push_back(po);
    exp.push_back(pe);
  }
  if (obs.size() < 2) return 1.0;
  double stat = 0.0;
  for (std::size_t k = 0; k < obs.size(); ++k) stat += (obs[k] - exp[k]) * (obs[k] - exp[k]) / exp[k];
  boost::math::chi_squared dist(static_cast<double>(obs.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

// Winding number of a closed polygon around p (nonzero inside).
inline int winding_number(const std::vector<geomask::Point>& poly, const geomask::Point& p) {
  int wn = 0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % n];
    const double cross = (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
    if (a.y <= p.y) {
      if (b.y > p.y && cross > 0) ++wn;
    } else if (b.y <= p.y && cross < 0) {
      --wn;
    }
  }
  return wn;
}

// Binomial log-pmf by direct factorial sums.
inline double binomial_logpmf(int y, int n, double p) {
  double lc = 0.0;
  for (int k = 1; k <= n; ++k) lc += std::log(static_cast<double>(k));
  for (int k = 1; k <= y; ++k) lc -= std::log(static_cast<double>(k));
  for (int k = 1; k <= n - y; ++k) lc -= std::log(static_cast<double>(k));
  return lc + y * std::log(p) + (n - y) * std::log1p(-p);
}

// Adaptive Gauss-Kronrod integral on [a, b].
template <class F>
double integrate(F f, double a, double b) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-12);
}

}  // namespace oracle

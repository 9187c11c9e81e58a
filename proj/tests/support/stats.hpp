#pragma once

// Small statistics helpers for tests: chi-square tail probabilities via the
// regularized incomplete gamma function, and a two-sample homogeneity test.
// Kept in test support on purpose so library code cannot depend on it.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace test_stats {

// Regularized lower incomplete gamma P(a, x) by series expansion.
inline double gamma_p_series(double a, double x) {
  double sum = 1.0 / a;
  double term = sum;
  for (int n = 1; n < 500; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-15) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by Lentz continued fraction.
inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

inline double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_q domain");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return gamma_q_cf(a, x);
}

// Survival function of the chi-square distribution.
inline double chi2_sf(double x, int df) { return gamma_q(df / 2.0, x / 2.0); }

// Two-sample multinomial homogeneity test; returns the p-value.
inline double chi2_homogeneity_pvalue(const std::vector<long>& a,
                                      const std::vector<long>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("count vectors must match");
  }
  double na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
  }
  double total = na + nb;
  double x2 = 0.0;
  int df = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double col = a[i] + b[i];
    if (col == 0) continue;
    double ea = na * col / total;
    double eb = nb * col / total;
    x2 += (a[i] - ea) * (a[i] - ea) / ea + (b[i] - eb) * (b[i] - eb) / eb;
    ++df;
  }
  df -= 1;
  if (df < 1) return 1.0;
  return chi2_sf(x2, df);
}

}  // namespace test_stats

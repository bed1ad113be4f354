#ifndef SILICOSIS_TESTS_SUPPORT_HPP
#define SILICOSIS_TESTS_SUPPORT_HPP

// Independent reference implementations and random generators shared by the
// test binaries.  Nothing here calls into the library's numerics.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "silicosis/model.hpp"

namespace oracle {

/// Vector field of the truncated chain written out term by term in long
/// double, indices as in the component equations.
inline std::vector<long double> rhs(double r, double alpha, const silicosis::RateTable& c, double x,
                                    const std::vector<double>& M) {
  const std::size_t n = c.n;
  std::vector<long double> d(n + 2, 0.0L);
  const long double X = x;
  d[1] = r - c.k[0] * X * M[0] - (static_cast<long double>(c.p[0]) + c.q[0]) * M[0];
  for (std::size_t i = 1; i < n; ++i)
    d[1 + i] = c.k[i - 1] * X * M[i - 1] - c.k[i] * X * M[i] - (static_cast<long double>(c.p[i]) + c.q[i]) * M[i];
  d[1 + n] = c.k[n - 1] * X * M[n - 1] - (static_cast<long double>(c.p[n]) + c.q[n]) * M[n];
  long double uptake = 0.0L, release = 0.0L;
  for (std::size_t i = 0; i < n; ++i) uptake += static_cast<long double>(c.k[i]) * M[i];
  for (std::size_t i = 0; i <= n; ++i) release += static_cast<long double>(i) * c.q[i] * M[i];
  d[0] = alpha - X * uptake + release;
  return d;
}

/// Solution of the chain with k == 0 and r = 0:
///   M_i(t) = M_i(0) e^{-(p_i+q_i) t},
///   x(t) = x0 + alpha t + sum i q_i M_i(0) (1 - e^{-(p_i+q_i) t}) / (p_i+q_i).
struct Decoupled {
  double x0, alpha;
  std::vector<double> M0, p, q;

  double M(std::size_t i, double t) const { return M0[i] * std::exp(-(p[i] + q[i]) * t); }
  double x(double t) const {
    double v = x0 + alpha * t;
    for (std::size_t i = 0; i < M0.size(); ++i) {
      const double l = p[i] + q[i];
      const double frac = l > 0.0 ? -std::expm1(-l * t) / l : t;
      v += static_cast<double>(i) * q[i] * M0[i] * frac;
    }
    return v;
  }
};

/// Dense Gaussian elimination with partial pivoting (row-major A).
inline std::vector<double> dense_solve(std::vector<double> A, std::vector<double> b) {
  const std::size_t d = b.size();
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < d; ++r)
      if (std::abs(A[r * d + c]) > std::abs(A[piv * d + c])) piv = r;
    if (piv != c) {
      for (std::size_t j = 0; j < d; ++j) std::swap(A[c * d + j], A[piv * d + j]);
      std::swap(b[c], b[piv]);
    }
    for (std::size_t r = c + 1; r < d; ++r) {
      const double f = A[r * d + c] / A[c * d + c];
      for (std::size_t j = c; j < d; ++j) A[r * d + j] -= f * A[c * d + j];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(d);
  for (std::size_t c = d; c-- > 0;) {
    double s = b[c];
    for (std::size_t j = c + 1; j < d; ++j) s -= A[c * d + j] * x[j];
    x[c] = s / A[c * d + c];
  }
  return x;
}

}  // namespace oracle

namespace gen {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Random cone state with cohort mass decaying in i, sometimes with exact zeros.
inline silicosis::State state(Rng& rng, std::size_t n, double scale = 1.0) {
  silicosis::State s = silicosis::State::zero(n);
  s.x = uniform(rng, 0.0, 2.0 * scale);
  const double rho = uniform(rng, 0.2, 0.8);
  double level = uniform(rng, 0.1, 1.0) * scale;
  for (std::size_t i = 0; i <= n; ++i) {
    s.M[i] = uniform(rng, 0.0, 1.0) < 0.15 ? 0.0 : level * uniform(rng, 0.2, 1.0);
    level *= rho;
  }
  return s;
}

/// Random admissible families: k power law in [0,1], p constant, q power law.
struct Families {
  silicosis::CoefficientFamily k, p, q;
};

inline Families families(Rng& rng, double k_exponent) {
  return {silicosis::CoefficientFamily::power_law(uniform(rng, 0.1, 1.0), k_exponent),
          silicosis::CoefficientFamily::constant(uniform(rng, 0.05, 1.0)),
          silicosis::CoefficientFamily::power_law(uniform(rng, 0.0, 0.5), uniform(rng, 0.0, 1.0))};
}

inline silicosis::RateTable rates(Rng& rng, std::size_t n) {
  const auto f = families(rng, uniform(rng, 0.0, 1.0));
  return silicosis::realize_coefficients(f.k, f.p, f.q, n);
}

inline silicosis::ModelParams params(Rng& rng) { return {uniform(rng, 0.0, 2.0), uniform(rng, 0.0, 2.0)}; }

}  // namespace gen

#endif  // SILICOSIS_TESTS_SUPPORT_HPP

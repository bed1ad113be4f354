#ifndef SILICOSIS_MODEL_HPP
#define SILICOSIS_MODEL_HPP

// Domain types for the macrophage/quartz coagulation-fragmentation-death
// system: supply rates, coefficient families, realized rate tables, phase
// points and moment weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "silicosis/errors.hpp"

namespace silicosis {

/// External supply rates: r feeds empty macrophages into cohort 0, alpha
/// feeds free quartz.
struct ModelParams {
  double r = 0.0;
  double alpha = 0.0;

  void validate() const {
    if (!std::isfinite(r) || r < 0.0)
      throw InvalidArgument("ModelParams.r must be finite and >= 0");
    if (!std::isfinite(alpha) || alpha < 0.0)
      throw InvalidArgument("ModelParams.alpha must be finite and >= 0");
  }
};

enum class FamilyKind { power_law, constant, table };
enum class TailRule { constant_extend, zero_extend };

/// Which rate sequence a family is realized for; the admissible exponents
/// differ between them.
enum class RateRole { k, p, q };

inline const char* to_string(RateRole role) {
  switch (role) {
    case RateRole::k: return "k";
    case RateRole::p: return "p";
    case RateRole::q: return "q";
  }
  return "?";
}

/// Recipe for a nonnegative coefficient sequence c_0, c_1, ...
///
/// power_law realizes c_i = amplitude * (i+1)^exponent (shifted so that
/// c_0 = amplitude), constant realizes c_i = amplitude, and table takes the
/// listed values and extends them past the end by `tail`.
struct CoefficientFamily {
  FamilyKind kind = FamilyKind::constant;
  double amplitude = 0.0;
  double exponent = 0.0;
  std::vector<double> values;
  TailRule tail = TailRule::constant_extend;

  static CoefficientFamily power_law(double amplitude, double exponent) {
    return {FamilyKind::power_law, amplitude, exponent, {}, TailRule::constant_extend};
  }
  static CoefficientFamily constant(double amplitude) {
    return {FamilyKind::constant, amplitude, 0.0, {}, TailRule::constant_extend};
  }
  static CoefficientFamily table(std::vector<double> values,
                                 TailRule tail = TailRule::constant_extend) {
    return {FamilyKind::table, 0.0, 0.0, std::move(values), tail};
  }

  void validate(RateRole role) const {
    const std::string who = std::string("coefficient family ") + to_string(role);
    switch (kind) {
      case FamilyKind::power_law:
        if (!std::isfinite(exponent))
          throw InvalidArgument(who + ": exponent must be finite");
        if (role == RateRole::k && (exponent < 0.0 || exponent > 1.0))
          throw InvalidArgument(who + ": exponent must lie in [0,1]");
        if (role == RateRole::p && exponent != 0.0)
          throw InvalidArgument(who + ": power_law exponent for p must be 0");
        if (role == RateRole::q && exponent < 0.0)
          throw InvalidArgument(who + ": exponent must be >= 0");
        [[fallthrough]];
      case FamilyKind::constant:
        if (!std::isfinite(amplitude) || amplitude < 0.0)
          throw InvalidArgument(who + ": amplitude must be finite and >= 0");
        break;
      case FamilyKind::table:
        if (values.empty()) throw InvalidArgument(who + ": table is empty");
        for (double v : values)
          if (!std::isfinite(v) || v < 0.0)
            throw InvalidArgument(who + ": table entries must be finite and >= 0");
        break;
    }
  }

  double at(std::size_t i) const {
    switch (kind) {
      case FamilyKind::power_law:
        return exponent == 0.0 ? amplitude
                               : amplitude * std::pow(static_cast<double>(i + 1), exponent);
      case FamilyKind::constant:
        return amplitude;
      case FamilyKind::table:
        if (i < values.size()) return values[i];
        return tail == TailRule::constant_extend ? values.back() : 0.0;
    }
    return 0.0;
  }
};

/// Realized coefficients k_0..k_n, p_0..p_n, q_0..q_n for truncation order n.
/// k_n is stored but the truncated vector field treats it as zero.
struct RateTable {
  std::size_t n = 0;
  std::vector<double> k;
  std::vector<double> p;
  std::vector<double> q;

  /// Phagocytosis rate as seen by the truncated system (k_n masked).
  double k_active(std::size_t i) const { return i < n ? k[i] : 0.0; }
  double loss(std::size_t i) const { return p[i] + q[i]; }

  void validate() const {
    if (n < 2) throw InvalidArgument("RateTable.n must be >= 2");
    if (k.size() != n + 1 || p.size() != n + 1 || q.size() != n + 1)
      throw DimensionMismatch("RateTable sequences must have length n+1");
    for (const auto* seq : {&k, &p, &q})
      for (double v : *seq)
        if (!std::isfinite(v) || v < 0.0)
          throw InvalidArgument("RateTable entries must be finite and >= 0");
  }
};

inline RateTable realize_coefficients(const CoefficientFamily& family_k,
                                      const CoefficientFamily& family_p,
                                      const CoefficientFamily& family_q, std::size_t n) {
  if (n < 2) throw InvalidArgument("truncation order n must be >= 2");
  family_k.validate(RateRole::k);
  family_p.validate(RateRole::p);
  family_q.validate(RateRole::q);
  RateTable rates;
  rates.n = n;
  rates.k.resize(n + 1);
  rates.p.resize(n + 1);
  rates.q.resize(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    rates.k[i] = family_k.at(i);
    rates.p[i] = family_p.at(i);
    rates.q[i] = family_q.at(i);
  }
  rates.validate();
  return rates;
}

/// Truncated phase point (x, M_0..M_n) at time t.
struct State {
  double t = 0.0;
  double x = 0.0;
  std::vector<double> M;

  State() = default;
  State(double t_, double x_, std::vector<double> M_) : t(t_), x(x_), M(std::move(M_)) {}

  static State zero(std::size_t n, double t = 0.0) { return {t, 0.0, std::vector<double>(n + 1, 0.0)}; }

  std::size_t order() const { return M.empty() ? 0 : M.size() - 1; }
  std::size_t dimension() const { return M.size() + 1; }

  bool in_cone() const {
    return x >= 0.0 && std::all_of(M.begin(), M.end(), [](double v) { return v >= 0.0; });
  }
  bool finite() const {
    return std::isfinite(t) && std::isfinite(x) &&
           std::all_of(M.begin(), M.end(), [](double v) { return std::isfinite(v); });
  }
};

/// Weighted norm |x| + sum_j (j+1)^mu |M_j|; mu = 1 is the X-norm.
inline double norm_mu(double x, std::span<const double> M, double mu) {
  double sum = std::abs(x);
  for (std::size_t j = 0; j < M.size(); ++j) {
    const double v = std::abs(M[j]);
    if (v == 0.0) continue;
    const double w = mu == 1.0 ? static_cast<double>(j + 1) : std::pow(static_cast<double>(j + 1), mu);
    sum += w * v;
  }
  return sum;
}

inline double norm_mu(const State& s, double mu) { return norm_mu(s.x, s.M, mu); }

/// norm_mu of a - b, padding the shorter cohort vector with zeros.
inline double norm_mu_difference(const State& a, const State& b, double mu) {
  const std::size_t len = std::max(a.M.size(), b.M.size());
  std::vector<double> diff(len, 0.0);
  for (std::size_t j = 0; j < a.M.size(); ++j) diff[j] += a.M[j];
  for (std::size_t j = 0; j < b.M.size(); ++j) diff[j] -= b.M[j];
  return norm_mu(a.x - b.x, diff, mu);
}

/// Weight sequence g_0..g_n with the constants it is claimed to satisfy:
/// g_{i+1} - g_i >= delta and (g_{i+1} - g_i) k_i <= C g_i.
struct MomentWeights {
  std::vector<double> g;
  double delta = 0.0;
  double C = 0.0;
};

struct WeightCheck {
  bool delta_ok = false;
  double C_min = 0.0;
};

inline WeightCheck validate_weights(const MomentWeights& w, const RateTable& rates) {
  if (w.g.size() != rates.n + 1)
    throw DimensionMismatch("MomentWeights.g must have length n+1");
  for (double gi : w.g)
    if (!std::isfinite(gi) || gi < 0.0) throw InvalidWeights("weights must be finite and >= 0");
  WeightCheck out;
  out.delta_ok = w.delta > 0.0;
  for (std::size_t i = 0; i < rates.n; ++i) {
    const double inc = w.g[i + 1] - w.g[i];
    if (!(inc >= w.delta)) out.delta_ok = false;
    const double num = inc * rates.k[i];
    double ratio;
    if (num == 0.0)
      ratio = 0.0;
    else if (w.g[i] == 0.0)
      ratio = std::numeric_limits<double>::infinity();
    else
      ratio = num / w.g[i];
    out.C_min = std::max(out.C_min, ratio);
  }
  return out;
}

/// Weights with the tightest constants for `rates`: delta is the smallest
/// increment and C the smallest admissible growth constant.
inline MomentWeights fitted_weights(std::vector<double> g, const RateTable& rates) {
  MomentWeights w{std::move(g), 0.0, 0.0};
  if (w.g.size() != rates.n + 1)
    throw DimensionMismatch("MomentWeights.g must have length n+1");
  double delta = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rates.n; ++i) delta = std::min(delta, w.g[i + 1] - w.g[i]);
  w.delta = delta;
  w.C = validate_weights(w, rates).C_min;
  return w;
}

/// g_i = (i+1)^mu for i = 0..n.
inline std::vector<double> power_weights(std::size_t n, double mu) {
  std::vector<double> g(n + 1);
  for (std::size_t i = 0; i <= n; ++i) g[i] = std::pow(static_cast<double>(i + 1), mu);
  return g;
}

}  // namespace silicosis

#endif  // SILICOSIS_MODEL_HPP

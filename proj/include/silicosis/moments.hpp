#ifndef SILICOSIS_MOMENTS_HPP
#define SILICOSIS_MOMENTS_HPP

// Physical moments of a state and the integrated balance identities of the
// truncated flow, evaluated as residuals along a trajectory.  Every residual
// is LHS - RHS and vanishes for the exact flow.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "silicosis/errors.hpp"
#include "silicosis/integrator.hpp"
#include "silicosis/model.hpp"

namespace silicosis {

struct MomentSnapshot {
  double t = 0.0;
  double total_macrophages = 0.0;  // sum M_i
  double total_quartz = 0.0;       // x + sum i M_i
  double total_matter = 0.0;       // quartz + macrophages
  double Q = 0.0;                  // sum i q_i M_i
  double P = 0.0;                  // sum i p_i M_i
};

inline MomentSnapshot compute_moments(double t, double x, std::span<const double> M,
                                      const RateTable& rates) {
  if (M.size() != rates.n + 1)
    throw DimensionMismatch("compute_moments: state and rate table orders differ");
  MomentSnapshot out;
  out.t = t;
  double loaded = 0.0;
  for (std::size_t i = 0; i < M.size(); ++i) {
    const double di = static_cast<double>(i);
    out.total_macrophages += M[i];
    loaded += di * M[i];
    out.Q += di * rates.q[i] * M[i];
    out.P += di * rates.p[i] * M[i];
  }
  out.total_quartz = x + loaded;
  out.total_matter = out.total_quartz + out.total_macrophages;
  return out;
}

inline MomentSnapshot compute_moments(const State& s, const RateTable& rates) {
  return compute_moments(s.t, s.x, s.M, rates);
}

namespace detail {

inline MomentSnapshot moments_of_raw(const Trajectory& traj, std::span<const double> raw, double t) {
  const std::size_t n = traj.system().order();
  return compute_moments(t, raw[0], raw.subspan(1, n + 1), traj.system().rates());
}

/// Exact sample when t hits one, dense output otherwise.
inline std::vector<double> raw_at(const Trajectory& traj, double t) { return traj.eval_raw(t); }

}  // namespace detail

/// U(t) - U(t0) - (r + alpha)(t - t0) + A1(t) + A2(t).
inline double mass_balance_residual(const Trajectory& traj, double t) {
  const auto& L = traj.layout();
  const auto y0 = traj.raw(0);
  const auto yt = detail::raw_at(traj, t);
  const auto& prm = traj.system().params();
  const double U0 = detail::moments_of_raw(traj, y0, traj.t_begin()).total_matter;
  const double Ut = detail::moments_of_raw(traj, yt, t).total_matter;
  return Ut - U0 - (prm.r + prm.alpha) * (t - traj.t_begin()) +
         L.accumulator(yt, Accumulator::losses) + L.accumulator(yt, Accumulator::escalator_load);
}

/// Quartz balance: X(t) - X(t0) - alpha (t - t0) + A2(t).
inline double quartz_balance_residual(const Trajectory& traj, double t) {
  const auto& L = traj.layout();
  const auto yt = detail::raw_at(traj, t);
  const double X0 = detail::moments_of_raw(traj, traj.raw(0), traj.t_begin()).total_quartz;
  const double Xt = detail::moments_of_raw(traj, yt, t).total_quartz;
  return Xt - X0 - traj.system().params().alpha * (t - traj.t_begin()) +
         L.accumulator(yt, Accumulator::escalator_load);
}

/// Macrophage balance: M(t) - M(t0) - r (t - t0) + A1(t).
inline double macrophage_balance_residual(const Trajectory& traj, double t) {
  const auto& L = traj.layout();
  const auto yt = detail::raw_at(traj, t);
  const double M0 = detail::moments_of_raw(traj, traj.raw(0), traj.t_begin()).total_macrophages;
  const double Mt = detail::moments_of_raw(traj, yt, t).total_macrophages;
  return Mt - M0 - traj.system().params().r * (t - traj.t_begin()) +
         L.accumulator(yt, Accumulator::losses);
}

/// Integrated free-quartz equation: x(t) - x(t0) - alpha (t - t0) + A4(t) - A3(t).
inline double x_equation_residual(const Trajectory& traj, double t) {
  const auto& L = traj.layout();
  const auto yt = detail::raw_at(traj, t);
  return yt[0] - traj.raw(0)[0] - traj.system().params().alpha * (t - traj.t_begin()) +
         L.accumulator(yt, Accumulator::uptake) - L.accumulator(yt, Accumulator::release_load);
}

/// Weighted tail identity over cohorts m..n between t1 and t2:
///   sum g_i [M_i]_{t1}^{t2} + int sum g_i (p_i+q_i) M_i
///     - g_m int x k_{m-1} M_{m-1} - int sum_{i<n} (g_{i+1}-g_i) x k_i M_i.
/// Needs F_m and the cohort integrals to have been tracked.
inline double moment_identity_residual(const Trajectory& traj, const MomentWeights& w,
                                       std::size_t m, double t1, double t2) {
  const RateTable& rates = traj.system().rates();
  const std::size_t n = rates.n;
  if (w.g.size() != n + 1) throw DimensionMismatch("MomentWeights.g must have length n+1");
  if (m < 1 || m > n) throw InvalidArgument("moment identity needs 1 <= m <= n");
  if (!(t1 < t2)) throw InvalidArgument("moment identity needs t1 < t2");
  const auto& L = traj.layout();
  L.require_cohort_integrals();
  const auto y1 = detail::raw_at(traj, t1);
  const auto y2 = detail::raw_at(traj, t2);
  const auto& g = w.g;

  double stock = 0.0, outflow = 0.0, transfer = 0.0;
  for (std::size_t i = m; i <= n; ++i) {
    stock += g[i] * (y2[1 + i] - y1[1 + i]);
    outflow += g[i] * rates.loss(i) *
               (L.cohort_integral(y2, i) - L.cohort_integral(y1, i));
    if (i < n)
      transfer += (g[i + 1] - g[i]) * rates.k[i] *
                  (L.cohort_x_integral(y2, i) - L.cohort_x_integral(y1, i));
  }
  const double influx = g[m] * (L.flux(y2, m) - L.flux(y1, m));
  return stock + outflow - influx - transfer;
}

struct GronwallReport {
  bool ok = false;
  /// min over samples of (bound - LHS) / bound.
  double margin = 0.0;
  double C1 = 0.0;
  double C2 = 0.0;
  /// Exponential rate of the envelope, C * C2.
  double rate = 0.0;
  /// Smallest C1 for which the envelope C1 exp(rate t) still dominates.
  double C1_fitted = 0.0;
  /// The constant k_0 g_1 (C2/C)^2 T + sum g_i M_0i paired with exp(C2 t).
  double C1_literal = 0.0;
  double margin_literal = 0.0;
  bool literal_holds = false;
  double max_lhs = 0.0;
};

namespace detail {

inline void require_valid_weights(const MomentWeights& w, const RateTable& rates) {
  const WeightCheck chk = validate_weights(w, rates);
  if (!chk.delta_ok) throw InvalidWeights("weight increments fall below delta");
  if (!(chk.C_min <= w.C * (1.0 + 1e-12) + 1e-300))
    throw InvalidWeights("weights violate (g_{i+1}-g_i) k_i <= C g_i: need C >= " +
                         std::to_string(chk.C_min));
}

/// sum_{i>=1} g_i M_i(t) + int_0^t sum_{i>=1} g_i (p_i+q_i) M_i at sample k.
inline double gronwall_lhs(const Trajectory& traj, const std::vector<double>& g, std::size_t k) {
  const RateTable& rates = traj.system().rates();
  const auto& L = traj.layout();
  const auto y = traj.raw(k);
  double lhs = 0.0;
  for (std::size_t i = 1; i <= rates.n; ++i)
    lhs += g[i] * (y[1 + i] + rates.loss(i) * L.cohort_integral(y, i));
  return lhs;
}

}  // namespace detail

/// Checks the exponential envelope of the g-weighted moment plus its
/// dissipation integral at every sample.
///
/// From the m = 1 identity with x, M_0 <= C2 and (g_{i+1}-g_i) k_i <= C g_i:
///   LHS(t) <= sum_{i>=1} g_i M_i(0) + g_1 k_0 C2^2 T + C C2 int LHS
/// hence LHS(t) <= C1 exp(C C2 t) with C1 = sum g_i M_i(0) + g_1 k_0 C2^2 T.
/// `slack` is a relative allowance for integration error.
inline GronwallReport gronwall_check(const Trajectory& traj, const MomentWeights& w,
                                     double slack = 1e-6) {
  const RateTable& rates = traj.system().rates();
  const ModelParams& prm = traj.system().params();
  detail::require_valid_weights(w, rates);
  traj.layout().require_cohort_integrals();

  const State y0 = traj.initial_state();
  const double t0 = traj.t_begin();
  const double T = traj.t_end() - t0;
  GronwallReport rep;
  rep.C2 = norm_mu(y0, 1.0) + (prm.alpha + prm.r) * T;
  rep.rate = w.C * rep.C2;
  double initial = 0.0;
  for (std::size_t i = 1; i <= rates.n; ++i) initial += w.g[i] * y0.M[i];
  rep.C1 = initial + w.g[1] * rates.k_active(0) * rep.C2 * rep.C2 * T;
  const double kgc = rates.k_active(0) * w.g[1] * rep.C2 * rep.C2 * T;
  rep.C1_literal = kgc == 0.0 ? initial
                              : (w.C > 0.0 ? kgc / (w.C * w.C) + initial
                                           : std::numeric_limits<double>::infinity());

  rep.ok = true;
  rep.literal_holds = true;
  rep.margin = std::numeric_limits<double>::infinity();
  rep.margin_literal = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double tk = traj.time(k) - t0;
    const double lhs = detail::gronwall_lhs(traj, w.g, k);
    rep.max_lhs = std::max(rep.max_lhs, lhs);
    const double bound = rep.C1 * std::exp(rep.rate * tk);
    rep.C1_fitted = std::max(rep.C1_fitted, lhs * std::exp(-rep.rate * tk));
    if (lhs > bound + slack * std::max(1.0, bound)) rep.ok = false;
    rep.margin = std::min(rep.margin, bound > 0.0 ? (bound - lhs) / bound : (lhs > 0.0 ? -1.0 : 0.0));

    const double lit = rep.C1_literal * std::exp(rep.C2 * tk);
    if (lhs > lit + slack * std::max(1.0, lit)) rep.literal_holds = false;
    if (std::isfinite(lit))
      rep.margin_literal =
          std::min(rep.margin_literal, lit > 0.0 ? (lit - lhs) / lit : (lhs > 0.0 ? -1.0 : 0.0));
  }
  return rep;
}

}  // namespace silicosis

#endif  // SILICOSIS_MOMENTS_HPP

#ifndef SILICOSIS_ANALYSIS_HPP
#define SILICOSIS_ANALYSIS_HPP

// Numerical experiments on top of the integrator: truncation ladders,
// cross-method agreement, restart (semigroup) consistency, continuity in the
// initial data, weighted-norm envelopes, steady states and the pointwise
// differential form.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <future>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "silicosis/errors.hpp"
#include "silicosis/integrator.hpp"
#include "silicosis/model.hpp"
#include "silicosis/moments.hpp"
#include "silicosis/truncation.hpp"

namespace silicosis {

/// Initial cohort profile defined for every i, projected onto truncations.
struct InitialData {
  enum class Kind { explicit_list, geometric };

  Kind kind = Kind::explicit_list;
  double x0 = 0.0;
  std::vector<double> M;  // explicit_list: M_0i, zero beyond the list
  double b = 0.0;         // geometric: M_0i = b * rho^i
  double rho = 0.0;

  static InitialData explicit_list(double x0, std::vector<double> M) {
    return {Kind::explicit_list, x0, std::move(M), 0.0, 0.0};
  }
  static InitialData geometric(double x0, double b, double rho) {
    return {Kind::geometric, x0, {}, b, rho};
  }

  void validate() const {
    if (!std::isfinite(x0) || x0 < 0.0) throw InvalidArgument("initial x0 must be finite and >= 0");
    if (kind == Kind::explicit_list) {
      for (double v : M)
        if (!std::isfinite(v) || v < 0.0)
          throw InvalidArgument("initial cohorts must be finite and >= 0");
    } else {
      if (!std::isfinite(b) || b < 0.0) throw InvalidArgument("geometric amplitude b must be >= 0");
      if (!(rho >= 0.0 && rho < 1.0)) throw InvalidArgument("geometric ratio rho must lie in [0,1)");
    }
  }

  double cohort(std::size_t i) const {
    if (kind == Kind::explicit_list) return i < M.size() ? M[i] : 0.0;
    return b * std::pow(rho, static_cast<double>(i));
  }

  State project(std::size_t n) const {
    State s = State::zero(n);
    s.x = x0;
    for (std::size_t i = 0; i <= n; ++i) s.M[i] = cohort(i);
    return s;
  }
};

inline std::vector<double> uniform_grid(double t0, double t1, std::size_t points) {
  if (points < 2) return {t0, t1};
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i)
    g[i] = t0 + (t1 - t0) * static_cast<double>(i) / static_cast<double>(points - 1);
  g.back() = t1;
  return g;
}

// ---------------------------------------------------------------------------
// Truncation convergence

struct ConvergenceReport {
  std::vector<std::size_t> n_ladder;
  /// gaps[j] = sup_t || y^{n_{j+1}}(t) - y^{n_j}(t) ||_1 on the shared grid.
  std::vector<double> gaps;
  std::vector<double> x_gaps;
  bool decreasing = false;
};

struct RungFailure : Error {
  RungFailure(std::size_t n, const Error& inner)
      : Error(inner.name(), "truncation n=" + std::to_string(n) + ": " + inner.what()), order(n) {}
  std::size_t order;
};

inline ConvergenceReport convergence_study(const ModelParams& params, const CoefficientFamily& k,
                                           const CoefficientFamily& p, const CoefficientFamily& q,
                                           const InitialData& y0, const std::vector<std::size_t>& n_ladder,
                                           double T, IntegratorConfig cfg,
                                           std::size_t grid_points = 201, bool parallel = false) {
  if (n_ladder.size() < 2) throw InvalidArgument("n_ladder needs at least two rungs");
  if (n_ladder.front() < 2) throw InvalidArgument("n_ladder rungs must be >= 2");
  for (std::size_t j = 1; j < n_ladder.size(); ++j)
    if (n_ladder[j] <= n_ladder[j - 1]) throw InvalidArgument("n_ladder must be strictly increasing");
  if (!(T > 0.0)) throw InvalidArgument("T must be > 0");
  y0.validate();
  cfg.cohort_integrals = false;
  cfg.flux_cohorts.clear();

  const auto grid = uniform_grid(0.0, T, grid_points);
  auto run_rung = [&](std::size_t n) {
    try {
      TruncatedSystem sys(params, realize_coefficients(k, p, q, n));
      const Trajectory traj = integrate(sys, y0.project(n), T, cfg);
      std::vector<State> out;
      out.reserve(grid.size());
      for (double t : grid) out.push_back(dense_eval(traj, t));
      return out;
    } catch (const Error& e) {
      throw RungFailure(n, e);
    }
  };

  std::vector<std::vector<State>> samples(n_ladder.size());
  if (parallel) {
    std::vector<std::future<std::vector<State>>> jobs;
    for (std::size_t n : n_ladder) jobs.push_back(std::async(std::launch::async, run_rung, n));
    for (std::size_t j = 0; j < jobs.size(); ++j) samples[j] = jobs[j].get();
  } else {
    for (std::size_t j = 0; j < n_ladder.size(); ++j) samples[j] = run_rung(n_ladder[j]);
  }

  ConvergenceReport rep;
  rep.n_ladder = n_ladder;
  for (std::size_t j = 0; j + 1 < n_ladder.size(); ++j) {
    double gap = 0.0, xgap = 0.0;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      gap = std::max(gap, norm_mu_difference(samples[j + 1][g], samples[j][g], 1.0));
      xgap = std::max(xgap, std::abs(samples[j + 1][g].x - samples[j][g].x));
    }
    rep.gaps.push_back(gap);
    rep.x_gaps.push_back(xgap);
  }
  rep.decreasing = true;
  for (std::size_t j = 1; j < rep.gaps.size(); ++j)
    if (!(rep.gaps[j] < rep.gaps[j - 1])) rep.decreasing = false;
  return rep;
}

// ---------------------------------------------------------------------------
// Uniqueness, semigroup and continuity probes

namespace detail {

inline double sup_gap_on(const Trajectory& a, const Trajectory& b, const std::vector<double>& grid,
                         double mu) {
  double gap = 0.0;
  for (double t : grid) gap = std::max(gap, norm_mu_difference(dense_eval(a, t), dense_eval(b, t), mu));
  return gap;
}

inline State final_state(const Trajectory& traj) { return traj.state(traj.size() - 1); }

}  // namespace detail

/// Largest X-norm distance between two integrations of the same problem,
/// taken over the union of both sets of step times.
inline double uniqueness_probe(const TruncatedSystem& sys, const State& y0, double T,
                               const IntegratorConfig& cfgA, const IntegratorConfig& cfgB) {
  const Trajectory a = integrate(sys, y0, y0.t + T, cfgA);
  const Trajectory b = integrate(sys, y0, y0.t + T, cfgB);
  std::vector<double> grid = a.times();
  grid.insert(grid.end(), b.times().begin(), b.times().end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return detail::sup_gap_on(a, b, grid, 1.0);
}

/// || T(t+s) y0 - T(t) T(s) y0 ||_mu.  Zero-length legs are the identity, so
/// s = 0 or t = 0 reproduce the direct run bit for bit.
inline double semigroup_residual(const TruncatedSystem& sys, const State& y0, double t, double s,
                                 const IntegratorConfig& cfg, double mu = 1.0) {
  if (!(t >= 0.0) || !(s >= 0.0)) throw InvalidArgument("semigroup times must be >= 0");
  auto advance = [&](const State& from, double dt) {
    if (dt == 0.0) return from;
    return detail::final_state(integrate(sys, from, from.t + dt, cfg));
  };
  const State direct = advance(y0, t + s);
  const State composed = advance(advance(y0, s), t);
  return norm_mu_difference(direct, composed, mu);
}

struct ContinuityRow {
  double input_gap = 0.0;
  double output_gap = 0.0;
  /// output_gap / input_gap (0 when both vanish).
  double ratio = 0.0;
};

/// Sup-in-time output distance against initial distance, one row per
/// perturbed initial state.
inline std::vector<ContinuityRow> continuity_study(const TruncatedSystem& sys, const State& y0,
                                                   const std::vector<State>& perturbed, double T,
                                                   const IntegratorConfig& cfg, double mu = 1.0,
                                                   std::size_t grid_points = 101) {
  for (const State& s : perturbed) {
    sys.check_state(s);
    if (!s.in_cone()) throw InvalidArgument("perturbed initial data must stay in the cone");
  }
  const Trajectory base = integrate(sys, y0, y0.t + T, cfg);
  const auto grid = uniform_grid(y0.t, y0.t + T, grid_points);
  std::vector<ContinuityRow> rows;
  for (const State& s0 : perturbed) {
    State start = s0;
    start.t = y0.t;
    const Trajectory other = integrate(sys, start, y0.t + T, cfg);
    ContinuityRow row;
    row.input_gap = norm_mu_difference(start, y0, mu);
    row.output_gap = detail::sup_gap_on(base, other, grid, mu);
    row.ratio = row.input_gap > 0.0 ? row.output_gap / row.input_gap : 0.0;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Weighted-norm invariance

struct InvarianceReport {
  bool ok = false;
  double max_norm = 0.0;
  double margin = 0.0;
  GronwallReport envelope;
};

/// Checks || y(t) ||_{1+gamma} against the envelope
///   ||y0|| + (alpha+r) t + C1 exp(C C2 t)
/// built from gronwall_check with g_i = (i+1)^{1+gamma}; the first two terms
/// bound x + M_0.
inline InvarianceReport invariance_check(const Trajectory& traj, double gamma, double slack = 1e-6) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("gamma must lie in [0,1]");
  const double mu = 1.0 + gamma;
  const RateTable& rates = traj.system().rates();
  const ModelParams& prm = traj.system().params();
  InvarianceReport rep;
  rep.envelope = gronwall_check(traj, fitted_weights(power_weights(rates.n, mu), rates), slack);

  const double t0 = traj.t_begin();
  const double base = norm_mu(traj.initial_state(), 1.0);
  rep.ok = true;
  rep.margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double t = traj.time(k) - t0;
    const double value = norm_mu(traj.state(k), mu);
    const double linear = base + (prm.alpha + prm.r) * t;
    const double bound = linear + rep.envelope.C1 * std::exp(rep.envelope.rate * t);
    rep.max_norm = std::max(rep.max_norm, value);
    if (value > bound + slack * std::max(1.0, bound)) rep.ok = false;
    rep.margin = std::min(rep.margin, bound > 0.0 ? (bound - value) / bound : (value > 0.0 ? -1.0 : 0.0));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Steady states

struct EquilibriumResult {
  double x_star = 0.0;
  std::vector<double> M_star;
  /// X-norm of the vector field at (x_star, M_star).
  double residual = 0.0;
  /// (n+1) M_n*: the top cohort's share of the X-norm, a guide for sizing n.
  double tail_mass = 0.0;
  std::size_t iterations = 0;
};

/// Cohort steady state for a fixed free-quartz level x.
inline std::vector<double> steady_cohorts(const TruncatedSystem& sys, double x) {
  const RateTable& c = sys.rates();
  std::vector<double> M(c.n + 1, 0.0);
  for (std::size_t i = 0; i <= c.n; ++i) {
    const double inflow = i == 0 ? sys.params().r : c.k[i - 1] * x * M[i - 1];
    const double outflow = c.k_active(i) * x + c.loss(i);
    if (inflow == 0.0) {
      M[i] = 0.0;
      continue;
    }
    if (!(outflow > 0.0))
      throw DegenerateDenominator("cohort " + std::to_string(i) +
                                  " has inflow but no outflow at x=" + std::to_string(x));
    M[i] = inflow / outflow;
  }
  return M;
}

/// Net free-quartz production alpha - x sum k_i M_i*(x) + sum i q_i M_i*(x).
inline double equilibrium_residual(const TruncatedSystem& sys, double x) {
  const auto M = steady_cohorts(sys, x);
  std::vector<double> y(sys.dimension()), dy(sys.dimension());
  y[0] = x;
  std::copy(M.begin(), M.end(), y.begin() + 1);
  eval_rhs(sys, y, dy);
  return dy[0];
}

namespace detail {

/// d/dx of equilibrium_residual via the implicit function theorem on the
/// bordered Jacobian: J_MM dM/dx = -J_Mx, R' = J_xx + J_xM dM/dx.
inline double equilibrium_residual_slope(const TruncatedSystem& sys, double x,
                                         const std::vector<double>& M) {
  std::vector<double> y(sys.dimension());
  y[0] = x;
  std::copy(M.begin(), M.end(), y.begin() + 1);
  const BorderedJacobian J = eval_jacobian(sys, y);
  double slope = J.xx;
  double prev = 0.0;
  for (std::size_t j = 0; j <= J.n; ++j) {
    double rhs = -J.col[j];
    if (j > 0) rhs -= J.sub[j] * prev;
    const double dMj = J.diag[j] != 0.0 ? rhs / J.diag[j] : 0.0;
    slope += J.row[j] * dMj;
    prev = dMj;
  }
  return slope;
}

}  // namespace detail

inline EquilibriumResult find_equilibrium(const TruncatedSystem& sys,
                                          std::optional<std::pair<double, double>> x_bracket = std::nullopt,
                                          double tol = 1e-12) {
  if (!(tol > 0.0)) throw InvalidArgument("tol must be > 0");
  const RateTable& c = sys.rates();
  const ModelParams& prm = sys.params();
  EquilibriumResult res;

  auto finish = [&](double x) {
    res.x_star = x;
    res.M_star = steady_cohorts(sys, x);
    std::vector<double> y(sys.dimension()), dy(sys.dimension());
    y[0] = x;
    std::copy(res.M_star.begin(), res.M_star.end(), y.begin() + 1);
    eval_rhs(sys, y, dy);
    res.residual = norm_mu(dy[0], std::span<const double>(dy).subspan(1), 1.0);
    res.tail_mass = static_cast<double>(c.n + 1) * res.M_star.back();
    return res;
  };

  if (prm.r == 0.0) {
    // No macrophages at steady state, so dx/dt = alpha everywhere.
    if (prm.alpha == 0.0) return finish(0.0);
    throw NoBracket("r = 0 and alpha > 0: free quartz grows without bound");
  }

  double lo, hi;
  if (x_bracket) {
    lo = x_bracket->first;
    hi = x_bracket->second;
    if (!(lo >= 0.0 && hi > lo)) throw InvalidArgument("x_bracket must satisfy 0 <= lo < hi");
  } else {
    lo = 0.0;
    const auto M0 = steady_cohorts(sys, 0.0);
    double mass = 0.0, release = 0.0;
    for (std::size_t i = 0; i <= c.n; ++i) {
      mass += M0[i];
      release += static_cast<double>(i) * c.q[i] * M0[i];
    }
    double kmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < c.n; ++i)
      if (c.k[i] > 0.0) kmin = std::min(kmin, c.k[i]);
    hi = (prm.alpha + release) / (kmin * mass);
    if (!std::isfinite(hi) || !(hi > 0.0)) hi = 1.0;
    double r_hi = equilibrium_residual(sys, hi);
    int doublings = 0;
    while (r_hi > 0.0 && doublings < 200) {
      lo = hi;
      hi *= 2.0;
      r_hi = equilibrium_residual(sys, hi);
      ++doublings;
    }
  }

  double r_lo = equilibrium_residual(sys, lo);
  double r_hi = equilibrium_residual(sys, hi);
  if (r_lo == 0.0) return finish(lo);
  if (r_hi == 0.0) return finish(hi);
  if ((r_lo > 0.0) == (r_hi > 0.0))
    throw NoBracket("equilibrium residual does not change sign on [" + std::to_string(lo) + ", " +
                    std::to_string(hi) + "]");

  double x = 0.5 * (lo + hi);
  for (std::size_t it = 0; it < 500; ++it) {
    res.iterations = it + 1;
    const auto M = steady_cohorts(sys, x);
    const double rx = equilibrium_residual(sys, x);
    if (std::abs(rx) <= 0.1 * tol) break;
    if ((rx > 0.0) == (r_lo > 0.0)) {
      lo = x;
      r_lo = rx;
    } else {
      hi = x;
      r_hi = rx;
    }
    if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(x))) break;
    const double slope = detail::equilibrium_residual_slope(sys, x, M);
    double next = slope != 0.0 ? x - rx / slope : std::numeric_limits<double>::quiet_NaN();
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    x = next;
  }
  return finish(x);
}

// ---------------------------------------------------------------------------
// Differential form

/// Max over the grid of || D_h y(t) - F(y(t)) ||_inf / || F(y(t)) ||_inf,
/// where D_h is the central difference of the dense output.
inline double differential_form_check(const Trajectory& traj, const std::vector<double>& grid,
                                      double h = 1e-4) {
  if (!(h > 0.0)) throw InvalidArgument("h must be > 0");
  const TruncatedSystem& sys = traj.system();
  const std::size_t d = sys.dimension();
  std::vector<double> f(d);
  double worst = 0.0;
  for (double t : grid) {
    if (t - h < traj.t_begin() || t + h > traj.t_end())
      throw OutOfRange("differential_form_check: grid point too close to the trajectory ends");
    const auto yp = traj.eval_raw(t + h);
    const auto ym = traj.eval_raw(t - h);
    const auto y = traj.eval_raw(t);
    eval_rhs(sys, y, f);
    double scale = 0.0, defect = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      scale = std::max(scale, std::abs(f[i]));
      defect = std::max(defect, std::abs((yp[i] - ym[i]) / (2.0 * h) - f[i]));
    }
    worst = std::max(worst, scale > 0.0 ? defect / scale : defect);
  }
  return worst;
}

}  // namespace silicosis

#endif  // SILICOSIS_ANALYSIS_HPP

#ifndef SILICOSIS_INTEGRATOR_HPP
#define SILICOSIS_INTEGRATOR_HPP

// Adaptive integration of the truncated system together with its balance
// accumulators.  Two steppers share one trajectory format:
//   - Dormand-Prince 5(4) with its 4th-order continuous extension,
//   - variable-order (1..5) backward differentiation (NDF form) with a
//     simplified Newton iteration on the bordered Jacobian.
// Every accepted step stores y, f = y' and the interpolant's midpoint
// value, which pins down the quartic used by dense_eval.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "silicosis/augmented.hpp"
#include "silicosis/errors.hpp"
#include "silicosis/model.hpp"
#include "silicosis/truncation.hpp"

namespace silicosis {

enum class Method { dormand_prince, bdf };

inline const char* to_string(Method m) { return m == Method::bdf ? "bdf" : "dormand_prince"; }

struct IntegratorConfig {
  double rel_tol = 1e-9;
  double abs_tol = 1e-14;
  double max_step = std::numeric_limits<double>::infinity();
  /// 0 selects the initial step automatically.
  double initial_step = 0.0;
  /// Components in [floor, 0) are clamped to 0 after each step, anything
  /// lower aborts.  NaN means the default of -100 * abs_tol.
  double negativity_floor = std::numeric_limits<double>::quiet_NaN();
  Method method = Method::dormand_prince;
  std::vector<std::size_t> flux_cohorts;
  bool cohort_integrals = true;
  std::size_t max_steps = 5'000'000;

  double floor() const { return std::isnan(negativity_floor) ? -100.0 * abs_tol : negativity_floor; }

  void validate() const {
    if (!(rel_tol > 0.0) || !(abs_tol > 0.0))
      throw InvalidArgument("rel_tol and abs_tol must be > 0");
    if (!(max_step > 0.0)) throw InvalidArgument("max_step must be > 0");
    if (initial_step < 0.0) throw InvalidArgument("initial_step must be >= 0");
    if (!(floor() <= 0.0)) throw InvalidArgument("negativity_floor must be <= 0");
  }
};

struct IntegratorStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t rhs_evals = 0;
  std::size_t jacobian_evals = 0;
  std::size_t factorizations = 0;
  std::size_t clamped = 0;
};

/// Time-ordered samples of the augmented state with piecewise-quartic dense
/// output between them.
class Trajectory {
 public:
  Trajectory(TruncatedSystem sys, AugmentedLayout layout)
      : sys_(std::move(sys)), layout_(std::move(layout)), dim_(layout_.dimension()) {}

  const TruncatedSystem& system() const { return sys_; }
  const AugmentedLayout& layout() const { return layout_; }
  const IntegratorStats& stats() const { return stats_; }
  IntegratorStats& stats() { return stats_; }

  std::size_t size() const { return t_.size(); }
  std::size_t dimension() const { return dim_; }
  double time(std::size_t k) const { return t_[k]; }
  const std::vector<double>& times() const { return t_; }
  double t_begin() const { return t_.front(); }
  double t_end() const { return t_.back(); }

  std::span<const double> raw(std::size_t k) const { return {y_.data() + k * dim_, dim_}; }
  std::span<const double> raw_derivative(std::size_t k) const { return {f_.data() + k * dim_, dim_}; }
  State state(std::size_t k) const { return layout_.main_state(raw(k), t_[k]); }
  State initial_state() const { return state(0); }

  double accumulator(Accumulator a, std::size_t k) const { return layout_.accumulator(raw(k), a); }
  double flux(std::size_t m, std::size_t k) const { return layout_.flux(raw(k), m); }

  /// Interpolated augmented state at t (unclamped).
  std::vector<double> eval_raw(double t) const {
    if (t_.empty() || !(t >= t_.front() && t <= t_.back()))
      throw OutOfRange("time " + std::to_string(t) + " outside trajectory range");
    auto it = std::upper_bound(t_.begin(), t_.end(), t);
    std::size_t k = static_cast<std::size_t>(it - t_.begin());
    k = k == 0 ? 0 : k - 1;
    if (t == t_[k] || k + 1 >= t_.size()) {
      auto s = raw(k);
      return {s.begin(), s.end()};
    }
    const double h = t_[k + 1] - t_[k];
    const double th = (t - t_[k]) / h;
    const double th1 = 1.0 - th;
    const double* y0 = y_.data() + k * dim_;
    const double* y1 = y0 + dim_;
    const double* f0 = f_.data() + k * dim_;
    const double* f1 = f0 + dim_;
    const double* ym = mid_.data() + k * dim_;
    std::vector<double> out(dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
      const double r2 = y1[i] - y0[i];
      const double r3 = h * f0[i] - r2;
      const double r4 = r2 - h * f1[i] - r3;
      const double r5 = 16.0 * (ym[i] - y0[i] - 0.5 * r2 - 0.25 * r3 - 0.125 * r4);
      out[i] = y0[i] + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)));
    }
    return out;
  }

  // Recording interface used by the steppers.
  void push_first(double t, std::span<const double> y, std::span<const double> f) {
    t_.push_back(t);
    y_.insert(y_.end(), y.begin(), y.end());
    f_.insert(f_.end(), f.begin(), f.end());
  }
  void push_step(std::span<const double> y_mid, double t, std::span<const double> y,
                 std::span<const double> f) {
    mid_.insert(mid_.end(), y_mid.begin(), y_mid.end());
    push_first(t, y, f);
  }

 private:
  TruncatedSystem sys_;
  AugmentedLayout layout_;
  std::size_t dim_;
  std::vector<double> t_, y_, f_, mid_;
  IntegratorStats stats_;
};

/// Interpolated cohort state at t, clamped to the cone.
inline State dense_eval(const Trajectory& traj, double t) {
  auto raw = traj.eval_raw(t);
  State s = traj.layout().main_state(raw, t);
  s.x = std::max(s.x, 0.0);
  for (double& m : s.M) m = std::max(m, 0.0);
  return s;
}

struct NormBoundReport {
  bool ok = false;
  /// max over samples of ||y(t)||_1 - (||y0||_1 + (alpha+r) t); <= 0 when the bound holds.
  double max_excess = 0.0;
  /// Same for the single-cohort bound (i+1) M_i(t).
  double max_cohort_excess = 0.0;
};

/// Linear X-norm growth bound and the per-cohort bound it implies, checked at
/// every sample with an absolute allowance `slack`.
inline NormBoundReport norm_bound_check(const Trajectory& traj, double slack = 1e-6) {
  const ModelParams& prm = traj.system().params();
  const double base = norm_mu(traj.initial_state(), 1.0);
  NormBoundReport rep;
  rep.max_excess = -std::numeric_limits<double>::infinity();
  rep.max_cohort_excess = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const State s = traj.state(k);
    const double bound = base + (prm.alpha + prm.r) * (s.t - traj.t_begin());
    rep.max_excess = std::max(rep.max_excess, norm_mu(s, 1.0) - bound);
    for (std::size_t i = 0; i < s.M.size(); ++i)
      rep.max_cohort_excess =
          std::max(rep.max_cohort_excess, static_cast<double>(i + 1) * s.M[i] - bound);
  }
  rep.ok = rep.max_excess <= slack && rep.max_cohort_excess <= slack;
  return rep;
}

namespace detail {

/// Scaled max norm.  Unlike an RMS norm it ignores components that stay at
/// zero, so padding a state with inactive cohorts leaves step selection, and
/// hence the computed trajectory, bit-for-bit unchanged.
inline double scaled_max_norm(std::span<const double> v, std::span<const double> scale) {
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(v[i]) / scale[i]);
  return worst;
}

class AugmentedRhs {
 public:
  AugmentedRhs(const TruncatedSystem& sys, const AugmentedLayout& layout, IntegratorStats& stats)
      : sys_(sys), layout_(layout), stats_(stats) {}
  void operator()(std::span<const double> y, std::span<double> dy) const {
    ++stats_.rhs_evals;
    eval_augmented_rhs(sys_, layout_, y, dy);
  }
  const TruncatedSystem& system() const { return sys_; }
  const AugmentedLayout& layout() const { return layout_; }

 private:
  const TruncatedSystem& sys_;
  const AugmentedLayout& layout_;
  IntegratorStats& stats_;
};

inline double initial_step(const AugmentedRhs& rhs, double t0, std::span<const double> y0,
                           std::span<const double> f0, double t_end, int order,
                           const IntegratorConfig& cfg) {
  const std::size_t d = y0.size();
  std::vector<double> scale(d), y1(d), f1(d), diff(d);
  for (std::size_t i = 0; i < d; ++i) scale[i] = cfg.abs_tol + cfg.rel_tol * std::abs(y0[i]);
  const double d0 = scaled_max_norm(y0, scale);
  const double d1 = scaled_max_norm(f0, scale);
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min({h0, cfg.max_step, t_end - t0});
  for (std::size_t i = 0; i < d; ++i) y1[i] = y0[i] + h0 * f0[i];
  rhs(y1, f1);
  for (std::size_t i = 0; i < d; ++i) diff[i] = f1[i] - f0[i];
  const double d2 = scaled_max_norm(diff, scale) / h0;
  double h1;
  if (d1 <= 1e-15 && d2 <= 1e-15)
    h1 = std::max(1e-6, h0 * 1e-3);
  else
    h1 = std::pow(0.01 / std::max(d1, d2), 1.0 / (order + 1));
  return std::min({100.0 * h0, h1, cfg.max_step, t_end - t0});
}

/// Clamps shallow negativity in the cohort part; throws below the floor.
/// Returns true if anything was clamped.
inline bool apply_negativity_policy(std::span<double> y, std::size_t main_dim, double floor,
                                    double t) {
  bool clamped = false;
  for (std::size_t i = 0; i < main_dim; ++i) {
    if (y[i] >= 0.0) continue;
    if (y[i] < floor || std::isnan(y[i]))
      throw NegativityViolation("component " + std::to_string(i) + " reached " +
                                std::to_string(y[i]) + " at t=" + std::to_string(t) +
                                " (floor " + std::to_string(floor) + ")");
    y[i] = 0.0;
    clamped = true;
  }
  return clamped;
}

inline double min_step(double t, double span) {
  return 16.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(t), span);
}

// Dormand-Prince 5(4) tableau.
namespace dp {
constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                 a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                 a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                 a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                 e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;
}  // namespace dp

inline void integrate_dormand_prince(const AugmentedRhs& rhs, Trajectory& traj, std::vector<double> y,
                                     double t, double t_end, const IntegratorConfig& cfg) {
  const std::size_t d = y.size();
  const std::size_t main_dim = rhs.layout().main_dim();
  IntegratorStats& stats = traj.stats();
  std::vector<double> k1(d), k2(d), k3(d), k4(d), k5(d), k6(d), k7(d), ys(d), y1(d), err(d),
      scale(d), mid(d);
  rhs(y, k1);
  traj.push_first(t, y, k1);

  const double span = t_end - t;
  double h = cfg.initial_step > 0.0 ? std::min(cfg.initial_step, span)
                                    : initial_step(rhs, t, y, k1, t_end, 4, cfg);
  constexpr double beta = 0.04, safe = 0.9, expo1 = 0.2 - beta * 0.75;
  constexpr double fac_shrink = 1.0 / 0.2, fac_grow = 1.0 / 10.0;
  double facold = 1e-4;
  bool last_rejected = false;

  while (t < t_end) {
    if (stats.accepted + stats.rejected >= cfg.max_steps)
      throw StepSizeUnderflow("maximum number of steps exceeded at t=" + std::to_string(t));
    h = std::min(h, cfg.max_step);
    bool last = false;
    if (t + h >= t_end || t + 1.01 * h >= t_end) {
      h = t_end - t;
      last = true;
    }
    if (h < min_step(t, span))
      throw StepSizeUnderflow("step size underflow at t=" + std::to_string(t) +
                              "; the problem may be stiff, switch to the bdf method");

    for (std::size_t i = 0; i < d; ++i) ys[i] = y[i] + h * dp::a21 * k1[i];
    rhs(ys, k2);
    for (std::size_t i = 0; i < d; ++i) ys[i] = y[i] + h * (dp::a31 * k1[i] + dp::a32 * k2[i]);
    rhs(ys, k3);
    for (std::size_t i = 0; i < d; ++i)
      ys[i] = y[i] + h * (dp::a41 * k1[i] + dp::a42 * k2[i] + dp::a43 * k3[i]);
    rhs(ys, k4);
    for (std::size_t i = 0; i < d; ++i)
      ys[i] = y[i] + h * (dp::a51 * k1[i] + dp::a52 * k2[i] + dp::a53 * k3[i] + dp::a54 * k4[i]);
    rhs(ys, k5);
    for (std::size_t i = 0; i < d; ++i)
      ys[i] = y[i] + h * (dp::a61 * k1[i] + dp::a62 * k2[i] + dp::a63 * k3[i] + dp::a64 * k4[i] +
                          dp::a65 * k5[i]);
    rhs(ys, k6);
    for (std::size_t i = 0; i < d; ++i)
      y1[i] = y[i] + h * (dp::a71 * k1[i] + dp::a73 * k3[i] + dp::a74 * k4[i] + dp::a75 * k5[i] +
                          dp::a76 * k6[i]);
    rhs(y1, k7);
    for (std::size_t i = 0; i < d; ++i) {
      err[i] = h * (dp::e1 * k1[i] + dp::e3 * k3[i] + dp::e4 * k4[i] + dp::e5 * k5[i] +
                    dp::e6 * k6[i] + dp::e7 * k7[i]);
      scale[i] = cfg.abs_tol + cfg.rel_tol * std::max(std::abs(y[i]), std::abs(y1[i]));
    }
    const double err_norm = scaled_max_norm(err, scale);
    if (!std::isfinite(err_norm)) {
      ++stats.rejected;
      h *= 0.25;
      last_rejected = true;
      continue;
    }
    const double fac11 = std::pow(err_norm, expo1);
    if (err_norm <= 1.0) {
      double fac = fac11 / std::pow(facold, beta);
      fac = std::max(fac_grow, std::min(fac_shrink, fac / safe));
      double h_new = h / fac;
      facold = std::max(err_norm, 1e-4);
      if (last_rejected) h_new = std::min(h_new, h);
      last_rejected = false;
      ++stats.accepted;

      for (std::size_t i = 0; i < d; ++i) {
        const double r2 = y1[i] - y[i];
        const double r3 = h * k1[i] - r2;
        const double r4 = r2 - h * k7[i] - r3;
        const double r5 = h * (dp::d1 * k1[i] + dp::d3 * k3[i] + dp::d4 * k4[i] +
                               dp::d5 * k5[i] + dp::d6 * k6[i] + dp::d7 * k7[i]);
        mid[i] = y[i] + 0.5 * (r2 + 0.5 * (r3 + 0.5 * (r4 + 0.5 * r5)));
      }
      const double t_new = last ? t_end : t + h;
      if (apply_negativity_policy(y1, main_dim, cfg.floor(), t_new)) {
        ++stats.clamped;
        rhs(y1, k7);
      }
      traj.push_step(mid, t_new, y1, k7);
      std::swap(y, y1);
      std::swap(k1, k7);
      t = t_new;
      h = h_new;
    } else {
      ++stats.rejected;
      h /= std::min(fac_shrink, fac11 / safe);
      last_rejected = true;
    }
  }
}

// Backward differentiation in the fixed-leading-coefficient NDF form of
// Shampine & Reichelt, kept as a table of backward differences.
namespace bdf {
constexpr int max_order = 5;
constexpr int newton_maxiter = 4;
constexpr double min_factor = 0.2;
constexpr double max_factor = 10.0;
constexpr double kappa[max_order + 1] = {0.0, -0.1850, -1.0 / 9.0, -0.0823, -0.0415, 0.0};

struct Coefficients {
  double gamma[max_order + 2];
  double alpha[max_order + 2];
  double error_const[max_order + 2];
  Coefficients() {
    gamma[0] = 0.0;
    for (int i = 1; i <= max_order + 1; ++i) gamma[i] = gamma[i - 1] + 1.0 / i;
    for (int i = 0; i <= max_order; ++i) {
      alpha[i] = (1.0 - kappa[i]) * gamma[i];
      error_const[i] = kappa[i] * gamma[i] + 1.0 / (i + 1);
    }
    alpha[max_order + 1] = gamma[max_order + 1];
    error_const[max_order + 1] = 1.0 / (max_order + 2);
  }
};

/// Re-expresses the difference table D[0..order] for a step size scaled by
/// `factor`.
inline void change_differences(std::vector<std::vector<double>>& D, int order, double factor) {
  auto compute_r = [order](double f) {
    const int s = order + 1;
    std::vector<double> R(s * s, 0.0);
    // M[0][*] = 1, M[i][j] = (i - 1 - f*j)/i, then cumulative product down rows.
    for (int j = 0; j < s; ++j) R[j] = 1.0;
    for (int i = 1; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        const double mij = j == 0 ? 0.0 : (i - 1 - f * j) / static_cast<double>(i);
        R[i * s + j] = R[(i - 1) * s + j] * mij;
      }
    return R;
  };
  const int s = order + 1;
  const auto R = compute_r(factor);
  const auto U = compute_r(1.0);
  std::vector<double> RU(s * s, 0.0);
  for (int i = 0; i < s; ++i)
    for (int l = 0; l < s; ++l)
      for (int j = 0; j < s; ++j) RU[i * s + j] += R[i * s + l] * U[l * s + j];
  const std::size_t d = D[0].size();
  std::vector<std::vector<double>> out(s, std::vector<double>(d, 0.0));
  // D_new[j] = sum_i RU[i][j] * D[i]
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i) {
      const double w = RU[i * s + j];
      if (w == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) out[j][c] += w * D[i][c];
    }
  for (int j = 0; j < s; ++j) D[j] = std::move(out[j]);
}
}  // namespace bdf

inline void integrate_bdf(const AugmentedRhs& rhs, Trajectory& traj, std::vector<double> y, double t,
                          double t_end, const IntegratorConfig& cfg) {
  using namespace bdf;
  static const Coefficients coef;
  const TruncatedSystem& sys = rhs.system();
  const AugmentedLayout& layout = rhs.layout();
  const std::size_t d = y.size();
  const std::size_t main_dim = layout.main_dim();
  IntegratorStats& stats = traj.stats();

  std::vector<double> f(d);
  rhs(y, f);
  traj.push_first(t, y, f);

  const double span = t_end - t;
  double h_abs = cfg.initial_step > 0.0 ? std::min(cfg.initial_step, span)
                                        : initial_step(rhs, t, y, f, t_end, 1, cfg);
  const double newton_tol =
      std::max(10.0 * std::numeric_limits<double>::epsilon() / cfg.rel_tol,
               std::min(0.03, std::sqrt(cfg.rel_tol)));

  std::vector<std::vector<double>> D(max_order + 3, std::vector<double>(d, 0.0));
  D[0] = y;
  for (std::size_t i = 0; i < d; ++i) D[1][i] = f[i] * h_abs;
  int order = 1;
  int n_equal_steps = 0;

  auto jacobian_at = [&](std::span<const double> yj) {
    ++stats.jacobian_evals;
    return eval_jacobian(sys, yj);
  };
  std::vector<double> y_jac(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(main_dim));
  BorderedJacobian J = jacobian_at(y_jac);
  std::optional<AugmentedShiftedSolver> lu;
  double lu_c = 0.0;

  std::vector<double> y_predict(d), psi(d), scale(d), y_new(d), dcorr(d), fk(d), dy(d), err(d),
      mid(d);

  while (t < t_end) {
    if (stats.accepted + stats.rejected >= cfg.max_steps)
      throw StepSizeUnderflow("maximum number of steps exceeded at t=" + std::to_string(t));
    const double hmin = min_step(t, span);
    if (h_abs > cfg.max_step) {
      change_differences(D, order, cfg.max_step / h_abs);
      h_abs = cfg.max_step;
      n_equal_steps = 0;
      lu.reset();
    } else if (h_abs < hmin) {
      change_differences(D, order, hmin / h_abs);
      h_abs = hmin;
      n_equal_steps = 0;
      lu.reset();
    }

    bool current_jac = false;
    bool accepted = false;
    int n_iter = 0;
    double t_new = t;
    double error_norm = 0.0;
    double safety = 0.9;
    while (!accepted) {
      if (h_abs < hmin)
        throw StepSizeUnderflow("step size underflow at t=" + std::to_string(t));
      t_new = t + h_abs;
      if (t_new >= t_end || t + 1.01 * h_abs >= t_end) {
        const double factor = (t_end - t) / h_abs;
        t_new = t_end;
        change_differences(D, order, factor);
        n_equal_steps = 0;
        lu.reset();
        h_abs = t_end - t;
      }
      const double h = h_abs;

      std::fill(y_predict.begin(), y_predict.end(), 0.0);
      for (int j = 0; j <= order; ++j)
        for (std::size_t i = 0; i < d; ++i) y_predict[i] += D[j][i];
      for (std::size_t i = 0; i < d; ++i) scale[i] = cfg.abs_tol + cfg.rel_tol * std::abs(y_predict[i]);
      std::fill(psi.begin(), psi.end(), 0.0);
      for (int j = 1; j <= order; ++j)
        for (std::size_t i = 0; i < d; ++i) psi[i] += D[j][i] * coef.gamma[j];
      for (std::size_t i = 0; i < d; ++i) psi[i] /= coef.alpha[order];

      const double c = h / coef.alpha[order];
      bool converged = false;
      while (!converged) {
        if (!lu || lu_c != c) {
          lu.emplace(sys, layout, y_jac, J, c);
          lu_c = c;
          ++stats.factorizations;
        }
        // Simplified Newton iteration.
        y_new = y_predict;
        std::fill(dcorr.begin(), dcorr.end(), 0.0);
        double dy_norm_old = -1.0;
        n_iter = 0;
        for (int k = 0; k < newton_maxiter; ++k) {
          n_iter = k + 1;
          rhs(y_new, fk);
          bool finite = true;
          for (double v : fk) finite = finite && std::isfinite(v);
          if (!finite) break;
          for (std::size_t i = 0; i < d; ++i) dy[i] = c * fk[i] - psi[i] - dcorr[i];
          lu->solve(dy);
          const double dy_norm = scaled_max_norm(dy, scale);
          double rate = -1.0;
          if (dy_norm_old > 0.0) rate = dy_norm / dy_norm_old;
          if (rate >= 0.0 &&
              (rate >= 1.0 ||
               std::pow(rate, newton_maxiter - k) / (1.0 - rate) * dy_norm > newton_tol))
            break;
          for (std::size_t i = 0; i < d; ++i) {
            y_new[i] += dy[i];
            dcorr[i] += dy[i];
          }
          if (dy_norm == 0.0 || (rate >= 0.0 && rate / (1.0 - rate) * dy_norm < newton_tol)) {
            converged = true;
            break;
          }
          dy_norm_old = dy_norm;
        }
        if (!converged) {
          if (current_jac) break;
          std::copy(y_predict.begin(), y_predict.begin() + static_cast<std::ptrdiff_t>(main_dim),
                    y_jac.begin());
          J = jacobian_at(y_jac);
          lu.reset();
          current_jac = true;
        }
      }
      if (!converged) {
        ++stats.rejected;
        h_abs *= 0.5;
        change_differences(D, order, 0.5);
        n_equal_steps = 0;
        lu.reset();
        continue;
      }

      safety = 0.9 * (2 * newton_maxiter + 1) / (2 * newton_maxiter + n_iter);
      for (std::size_t i = 0; i < d; ++i) {
        scale[i] = cfg.abs_tol + cfg.rel_tol * std::abs(y_new[i]);
        err[i] = coef.error_const[order] * dcorr[i];
      }
      error_norm = scaled_max_norm(err, scale);
      if (error_norm > 1.0) {
        ++stats.rejected;
        const double factor =
            std::max(min_factor, safety * std::pow(error_norm, -1.0 / (order + 1)));
        h_abs *= factor;
        change_differences(D, order, factor);
        n_equal_steps = 0;
      } else {
        accepted = true;
      }
    }

    ++stats.accepted;
    ++n_equal_steps;
    // D^{j+1} y_n = D^j y_n - D^j y_{n-1}; dcorr = D^{order+1} y_n.
    for (std::size_t i = 0; i < d; ++i) {
      D[order + 2][i] = dcorr[i] - D[order + 1][i];
      D[order + 1][i] = dcorr[i];
    }
    for (int j = order; j >= 0; --j)
      for (std::size_t i = 0; i < d; ++i) D[j][i] += D[j + 1][i];

    // Midpoint of the step from the interpolating polynomial through the
    // last order+1 points.
    {
      const double h = h_abs;
      std::fill(mid.begin(), mid.end(), 0.0);
      double p = 1.0;
      for (int j = 1; j <= order; ++j) {
        const double shift = t_new - h * (j - 1);
        p *= ((t_new - 0.5 * h) - shift) / (h * j);
        for (std::size_t i = 0; i < d; ++i) mid[i] += D[j][i] * p;
      }
      for (std::size_t i = 0; i < d; ++i) mid[i] += D[0][i];
    }

    y_new = D[0];
    if (apply_negativity_policy(y_new, main_dim, cfg.floor(), t_new)) {
      ++stats.clamped;
      D[0] = y_new;
    }
    rhs(y_new, f);
    traj.push_step(mid, t_new, y_new, f);
    t = t_new;

    if (n_equal_steps < order + 1) continue;

    double error_m_norm = std::numeric_limits<double>::infinity();
    double error_p_norm = std::numeric_limits<double>::infinity();
    if (order > 1) {
      for (std::size_t i = 0; i < d; ++i) err[i] = coef.error_const[order - 1] * D[order][i];
      error_m_norm = scaled_max_norm(err, scale);
    }
    if (order < max_order) {
      for (std::size_t i = 0; i < d; ++i) err[i] = coef.error_const[order + 1] * D[order + 2][i];
      error_p_norm = scaled_max_norm(err, scale);
    }
    const double norms[3] = {error_m_norm, error_norm, error_p_norm};
    double best = -1.0;
    int best_idx = 1;
    for (int j = 0; j < 3; ++j) {
      const double fac = norms[j] == 0.0 ? std::numeric_limits<double>::infinity()
                                         : std::pow(norms[j], -1.0 / (order + j));
      if (fac > best) {
        best = fac;
        best_idx = j;
      }
    }
    order += best_idx - 1;
    const double factor = std::min(max_factor, safety * best);
    h_abs *= factor;
    change_differences(D, order, factor);
    n_equal_steps = 0;
    lu.reset();
  }
}

}  // namespace detail

/// Integrates the truncated system from y0 to t_end.
inline Trajectory integrate(const TruncatedSystem& sys, const State& y0, double t_end,
                            const IntegratorConfig& cfg = {}) {
  cfg.validate();
  sys.check_state(y0);
  if (!y0.finite()) throw InvalidArgument("initial state must be finite");
  if (!y0.in_cone()) throw InvalidArgument("initial state must lie in the nonnegative cone");
  if (!(t_end > y0.t)) throw InvalidArgument("t_end must exceed the initial time");

  Trajectory traj(sys, AugmentedLayout(sys.order(), cfg.flux_cohorts, cfg.cohort_integrals));
  const AugmentedLayout& layout = traj.layout();
  std::vector<double> y(layout.dimension(), 0.0);
  y[0] = y0.x;
  std::copy(y0.M.begin(), y0.M.end(), y.begin() + 1);

  detail::AugmentedRhs rhs(traj.system(), layout, traj.stats());
  if (cfg.method == Method::dormand_prince)
    detail::integrate_dormand_prince(rhs, traj, std::move(y), y0.t, t_end, cfg);
  else
    detail::integrate_bdf(rhs, traj, std::move(y), y0.t, t_end, cfg);
  return traj;
}

}  // namespace silicosis

#endif  // SILICOSIS_INTEGRATOR_HPP

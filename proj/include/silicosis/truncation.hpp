#ifndef SILICOSIS_TRUNCATION_HPP
#define SILICOSIS_TRUNCATION_HPP

// The (n+2)-dimensional truncated vector field and its Jacobian.
//
// Flat state layout used throughout: y[0] = x, y[1 + i] = M_i, i = 0..n.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "silicosis/errors.hpp"
#include "silicosis/model.hpp"

namespace silicosis {

class TruncatedSystem {
 public:
  TruncatedSystem(ModelParams params, RateTable rates)
      : params_(params), rates_(std::move(rates)) {
    params_.validate();
    rates_.validate();
  }

  const ModelParams& params() const { return params_; }
  const RateTable& rates() const { return rates_; }
  std::size_t order() const { return rates_.n; }
  std::size_t dimension() const { return rates_.n + 2; }

  void check_state(const State& s) const {
    if (s.M.size() != rates_.n + 1)
      throw DimensionMismatch("state has " + std::to_string(s.M.size()) +
                              " cohorts, truncated system expects " +
                              std::to_string(rates_.n + 1));
  }

 private:
  ModelParams params_;
  RateTable rates_;
};

/// Writes d(x, M_0..M_n)/dt into `dy` for the flat state `y`.
inline void eval_rhs(const TruncatedSystem& sys, std::span<const double> y, std::span<double> dy) {
  const std::size_t n = sys.order();
  if (y.size() < n + 2 || dy.size() < n + 2)
    throw DimensionMismatch("eval_rhs: flat state must have n+2 entries");
  const RateTable& c = sys.rates();
  const double x = y[0];
  const double* M = y.data() + 1;
  double* dM = dy.data() + 1;

  double uptake = 0.0;   // sum_{i<n} k_i M_i
  double release = 0.0;  // sum_{i<=n} i q_i M_i
  for (std::size_t i = 0; i <= n; ++i) {
    const double ingest = c.k_active(i) * x * M[i];
    dM[i] = (i == 0 ? sys.params().r : c.k[i - 1] * x * M[i - 1]) - ingest - c.loss(i) * M[i];
    uptake += c.k_active(i) * M[i];
    release += static_cast<double>(i) * c.q[i] * M[i];
  }
  dy[0] = sys.params().alpha - x * uptake + release;
}

inline std::vector<double> eval_rhs(const TruncatedSystem& sys, const State& s) {
  sys.check_state(s);
  std::vector<double> y(sys.dimension()), dy(sys.dimension());
  y[0] = s.x;
  for (std::size_t i = 0; i < s.M.size(); ++i) y[i + 1] = s.M[i];
  eval_rhs(sys, y, dy);
  return dy;
}

/// Jacobian in banded-plus-border form.
///
/// The M-block is lower bidiagonal (diag, sub with sub[0] unused); the x row
/// and x column are dense.  Index j in the vectors refers to cohort M_j.
struct BorderedJacobian {
  std::size_t n = 0;
  double xx = 0.0;
  std::vector<double> row;   // d(dx/dt)/dM_j
  std::vector<double> col;   // d(dM_j/dt)/dx
  std::vector<double> diag;  // d(dM_j/dt)/dM_j
  std::vector<double> sub;   // d(dM_j/dt)/dM_{j-1}

  std::size_t dimension() const { return n + 2; }

  /// Entry (a, b) in the flat layout.
  double at(std::size_t a, std::size_t b) const {
    if (a == 0 && b == 0) return xx;
    if (a == 0) return row[b - 1];
    if (b == 0) return col[a - 1];
    const std::size_t i = a - 1, j = b - 1;
    if (i == j) return diag[i];
    if (i == j + 1) return sub[i];
    return 0.0;
  }

  /// Row-major dense copy.
  std::vector<double> to_dense() const {
    const std::size_t d = dimension();
    std::vector<double> out(d * d, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) out[a * d + b] = at(a, b);
    return out;
  }
};

inline BorderedJacobian eval_jacobian(const TruncatedSystem& sys, std::span<const double> y) {
  const std::size_t n = sys.order();
  if (y.size() < n + 2) throw DimensionMismatch("eval_jacobian: flat state must have n+2 entries");
  const RateTable& c = sys.rates();
  const double x = y[0];
  const double* M = y.data() + 1;

  BorderedJacobian J;
  J.n = n;
  J.row.resize(n + 1);
  J.col.resize(n + 1);
  J.diag.resize(n + 1);
  J.sub.assign(n + 1, 0.0);
  double uptake = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double ki = c.k_active(i);
    uptake += ki * M[i];
    J.row[i] = -ki * x + static_cast<double>(i) * c.q[i];
    J.col[i] = (i == 0 ? 0.0 : c.k[i - 1] * M[i - 1]) - ki * M[i];
    J.diag[i] = -ki * x - c.loss(i);
    if (i > 0) J.sub[i] = c.k[i - 1] * x;
  }
  J.xx = -uptake;
  return J;
}

inline BorderedJacobian eval_jacobian(const TruncatedSystem& sys, const State& s) {
  sys.check_state(s);
  std::vector<double> y(sys.dimension());
  y[0] = s.x;
  for (std::size_t i = 0; i < s.M.size(); ++i) y[i + 1] = s.M[i];
  return eval_jacobian(sys, y);
}

/// Factorization of I - c J for a bordered Jacobian, solved in O(n) through
/// the Schur complement of the bidiagonal M-block.
class ShiftedBorderedSolver {
 public:
  ShiftedBorderedSolver() = default;

  ShiftedBorderedSolver(const BorderedJacobian& J, double c) : n_(J.n) {
    diag_.resize(n_ + 1);
    sub_.resize(n_ + 1);
    row_.resize(n_ + 1);
    w_.resize(n_ + 1);
    for (std::size_t j = 0; j <= n_; ++j) {
      diag_[j] = 1.0 - c * J.diag[j];
      sub_[j] = -c * J.sub[j];
      row_[j] = -c * J.row[j];
      if (diag_[j] == 0.0 || !std::isfinite(diag_[j]))
        throw SingularMatrix("I - cJ has a zero pivot in the cohort block");
    }
    // w = A_MM^{-1} A_Mx
    for (std::size_t j = 0; j <= n_; ++j) {
      double rhs = -c * J.col[j];
      if (j > 0) rhs -= sub_[j] * w_[j - 1];
      w_[j] = rhs / diag_[j];
    }
    double s = 1.0 - c * J.xx;
    for (std::size_t j = 0; j <= n_; ++j) s -= row_[j] * w_[j];
    if (s == 0.0 || !std::isfinite(s)) throw SingularMatrix("I - cJ has a singular Schur complement");
    schur_ = s;
  }

  /// Solves in place; b has n+2 entries in the flat layout.
  void solve(std::span<double> b) const {
    double* v = b.data() + 1;
    for (std::size_t j = 0; j <= n_; ++j) {
      if (j > 0) v[j] -= sub_[j] * v[j - 1];
      v[j] /= diag_[j];
    }
    double z0 = b[0];
    for (std::size_t j = 0; j <= n_; ++j) z0 -= row_[j] * v[j];
    z0 /= schur_;
    b[0] = z0;
    for (std::size_t j = 0; j <= n_; ++j) v[j] -= w_[j] * z0;
  }

 private:
  std::size_t n_ = 0;
  std::vector<double> diag_, sub_, row_, w_;
  double schur_ = 1.0;
};

}  // namespace silicosis

#endif  // SILICOSIS_TRUNCATION_HPP

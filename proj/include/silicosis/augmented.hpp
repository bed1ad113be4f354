#ifndef SILICOSIS_AUGMENTED_HPP
#define SILICOSIS_AUGMENTED_HPP

// Truncated system extended by balance accumulators that are integrated by
// the same stepper as the state itself.
//
// Augmented layout:
//   [ x, M_0..M_n | A1 A2 A3 A4 | F_m for each tracked m | I_0..I_n | J_0..J_n ]
// with integrands
//   A1 = sum (p_i+q_i) M_i      A2 = sum i p_i M_i
//   A3 = sum i q_i M_i          A4 = x sum_{i<n} k_i M_i
//   F_m = x k_{m-1} M_{m-1}     I_i = M_i     J_i = x M_i
// The cohort integrals I, J are optional; they let any weighted moment
// identity be evaluated from accumulators after the fact.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "silicosis/errors.hpp"
#include "silicosis/truncation.hpp"

namespace silicosis {

enum class Accumulator { losses = 0, escalator_load = 1, release_load = 2, uptake = 3 };

class AugmentedLayout {
 public:
  AugmentedLayout() = default;
  AugmentedLayout(std::size_t n, std::vector<std::size_t> flux_cohorts, bool cohort_integrals)
      : n_(n), flux_(std::move(flux_cohorts)), cohort_integrals_(cohort_integrals) {
    std::sort(flux_.begin(), flux_.end());
    flux_.erase(std::unique(flux_.begin(), flux_.end()), flux_.end());
    for (std::size_t m : flux_)
      if (m < 1 || m > n_)
        throw InvalidArgument("flux cohort m=" + std::to_string(m) + " outside 1..n");
  }

  std::size_t order() const { return n_; }
  std::size_t main_dim() const { return n_ + 2; }
  std::size_t accumulator_offset() const { return n_ + 2; }
  std::size_t flux_offset() const { return n_ + 6; }
  std::size_t cohort_offset() const { return flux_offset() + flux_.size(); }
  std::size_t cohort_x_offset() const { return cohort_offset() + n_ + 1; }
  std::size_t dimension() const {
    return cohort_offset() + (cohort_integrals_ ? 2 * (n_ + 1) : 0);
  }
  const std::vector<std::size_t>& flux_cohorts() const { return flux_; }
  bool has_cohort_integrals() const { return cohort_integrals_; }

  std::optional<std::size_t> flux_index(std::size_t m) const {
    auto it = std::lower_bound(flux_.begin(), flux_.end(), m);
    if (it == flux_.end() || *it != m) return std::nullopt;
    return flux_offset() + static_cast<std::size_t>(it - flux_.begin());
  }

  double accumulator(std::span<const double> y, Accumulator a) const {
    return y[accumulator_offset() + static_cast<std::size_t>(a)];
  }
  double flux(std::span<const double> y, std::size_t m) const {
    auto idx = flux_index(m);
    if (!idx)
      throw MissingAccumulator("flux integral F_" + std::to_string(m) +
                               " was not requested at integration time");
    return y[*idx];
  }
  double cohort_integral(std::span<const double> y, std::size_t i) const {
    require_cohort_integrals();
    return y[cohort_offset() + i];
  }
  double cohort_x_integral(std::span<const double> y, std::size_t i) const {
    require_cohort_integrals();
    return y[cohort_x_offset() + i];
  }
  void require_cohort_integrals() const {
    if (!cohort_integrals_)
      throw MissingAccumulator("cohort integrals were not tracked at integration time");
  }

  State main_state(std::span<const double> y, double t) const {
    return {t, y[0], std::vector<double>(y.begin() + 1, y.begin() + static_cast<std::ptrdiff_t>(n_ + 2))};
  }

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> flux_;
  bool cohort_integrals_ = true;
};

inline void eval_augmented_rhs(const TruncatedSystem& sys, const AugmentedLayout& layout,
                               std::span<const double> y, std::span<double> dy) {
  eval_rhs(sys, y, dy);
  const std::size_t n = sys.order();
  const RateTable& c = sys.rates();
  const double x = y[0];
  const double* M = y.data() + 1;
  double a1 = 0.0, a2 = 0.0, a3 = 0.0, uptake = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double di = static_cast<double>(i);
    a1 += c.loss(i) * M[i];
    a2 += di * c.p[i] * M[i];
    a3 += di * c.q[i] * M[i];
    uptake += c.k_active(i) * M[i];
  }
  const std::size_t a0 = layout.accumulator_offset();
  dy[a0 + 0] = a1;
  dy[a0 + 1] = a2;
  dy[a0 + 2] = a3;
  dy[a0 + 3] = x * uptake;
  const auto& flux = layout.flux_cohorts();
  for (std::size_t f = 0; f < flux.size(); ++f) {
    const std::size_t m = flux[f];
    dy[layout.flux_offset() + f] = x * c.k[m - 1] * M[m - 1];
  }
  if (layout.has_cohort_integrals()) {
    const std::size_t io = layout.cohort_offset(), jo = layout.cohort_x_offset();
    for (std::size_t i = 0; i <= n; ++i) {
      dy[io + i] = M[i];
      dy[jo + i] = x * M[i];
    }
  }
}

/// Solver for (I - c J_aug) z = b, where J_aug = [[J, 0], [G, 0]] and G holds
/// the gradients of the accumulator integrands.
class AugmentedShiftedSolver {
 public:
  AugmentedShiftedSolver(const TruncatedSystem& sys, const AugmentedLayout& layout,
                         std::span<const double> y_jac, const BorderedJacobian& J, double c)
      : sys_(&sys), layout_(&layout), c_(c), main_(J, c),
        y_jac_(y_jac.begin(), y_jac.begin() + static_cast<std::ptrdiff_t>(layout.main_dim())) {}

  void solve(std::span<double> b) const {
    const std::size_t n = sys_->order();
    const RateTable& rc = sys_->rates();
    main_.solve(b.first(layout_->main_dim()));
    const double zx = b[0];
    const double* zM = b.data() + 1;
    const double x = y_jac_[0];
    const double* M = y_jac_.data() + 1;
    double g1 = 0.0, g2 = 0.0, g3 = 0.0, uptake = 0.0, uptake_dir = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      const double di = static_cast<double>(i);
      g1 += rc.loss(i) * zM[i];
      g2 += di * rc.p[i] * zM[i];
      g3 += di * rc.q[i] * zM[i];
      uptake += rc.k_active(i) * M[i];
      uptake_dir += rc.k_active(i) * zM[i];
    }
    const std::size_t a0 = layout_->accumulator_offset();
    b[a0 + 0] += c_ * g1;
    b[a0 + 1] += c_ * g2;
    b[a0 + 2] += c_ * g3;
    b[a0 + 3] += c_ * (zx * uptake + x * uptake_dir);
    const auto& flux = layout_->flux_cohorts();
    for (std::size_t f = 0; f < flux.size(); ++f) {
      const std::size_t j = flux[f] - 1;
      b[layout_->flux_offset() + f] += c_ * rc.k[j] * (zx * M[j] + x * zM[j]);
    }
    if (layout_->has_cohort_integrals()) {
      const std::size_t io = layout_->cohort_offset(), jo = layout_->cohort_x_offset();
      for (std::size_t i = 0; i <= n; ++i) {
        b[io + i] += c_ * zM[i];
        b[jo + i] += c_ * (zx * M[i] + x * zM[i]);
      }
    }
  }

 private:
  const TruncatedSystem* sys_;
  const AugmentedLayout* layout_;
  double c_;
  ShiftedBorderedSolver main_;
  std::vector<double> y_jac_;
};

}  // namespace silicosis

#endif  // SILICOSIS_AUGMENTED_HPP

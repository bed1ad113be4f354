#include <gtest/gtest.h>

#include <cmath>

#include "silicosis/moments.hpp"
#include "support.hpp"

using namespace silicosis;

namespace {

const auto kZero = CoefficientFamily::constant(0.0);

IntegratorConfig fine() {
  IntegratorConfig cfg;
  cfg.rel_tol = 1e-11;
  cfg.abs_tol = 1e-14;
  return cfg;
}

std::vector<double> constant_weights(std::size_t n, double v) { return std::vector<double>(n + 1, v); }

std::vector<double> index_weights(std::size_t n) {
  std::vector<double> g(n + 1);
  for (std::size_t i = 0; i <= n; ++i) g[i] = static_cast<double>(i);
  return g;
}

}  // namespace

TEST(Snapshot, HandSums) {
  const RateTable rates = realize_coefficients(kZero, kZero, kZero, 3);
  State s = State::zero(3);
  s.x = 1.0;
  s.M[0] = 1.0;
  s.M[1] = 1.0;
  const MomentSnapshot m = compute_moments(s, rates);
  EXPECT_EQ(m.total_macrophages, 2.0);
  EXPECT_EQ(m.total_quartz, 2.0);
  EXPECT_EQ(m.total_matter, 4.0);
  const MomentSnapshot z = compute_moments(State::zero(3), rates);
  EXPECT_EQ(z.total_matter, 0.0);
  EXPECT_EQ(z.Q, 0.0);
  EXPECT_EQ(z.P, 0.0);
  EXPECT_THROW(compute_moments(State::zero(4), rates), DimensionMismatch);
}

TEST(SnapshotProperty, ExtendedPrecisionAgreement) {
  gen::Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 300.0));
    const RateTable rates = gen::rates(rng, n);
    const State s = gen::state(rng, n);
    long double M = 0, X = s.x, Q = 0, P = 0;
    for (std::size_t i = 0; i <= n; ++i) {
      M += s.M[i];
      X += static_cast<long double>(i) * s.M[i];
      Q += static_cast<long double>(i) * rates.q[i] * s.M[i];
      P += static_cast<long double>(i) * rates.p[i] * s.M[i];
    }
    const MomentSnapshot m = compute_moments(s, rates);
    const double ulps = 64 * std::numeric_limits<double>::epsilon();
    EXPECT_NEAR(m.total_macrophages, static_cast<double>(M), ulps * static_cast<double>(M));
    EXPECT_NEAR(m.total_quartz, static_cast<double>(X), ulps * static_cast<double>(X));
    EXPECT_NEAR(m.Q, static_cast<double>(Q), ulps * static_cast<double>(Q) + 1e-300);
    EXPECT_NEAR(m.P, static_cast<double>(P), ulps * static_cast<double>(P) + 1e-300);
    EXPECT_EQ(m.total_matter, m.total_quartz + m.total_macrophages);
  }
}

TEST(MassBalance, ZeroRatesGrowExactlyLinearly) {
  const TruncatedSystem sys({0.7, 1.1}, realize_coefficients(kZero, kZero, kZero, 5));
  gen::Rng rng(32);
  const Trajectory traj = integrate(sys, gen::state(rng, 5), 3.0);
  for (double t : {0.3, 1.0, 2.2, 3.0}) EXPECT_NEAR(mass_balance_residual(traj, t), 0.0, 1e-13);
}

TEST(MassBalance, LosslessRunsBalance) {
  gen::Rng rng(33);
  const TruncatedSystem sys({0.5, 0.5}, realize_coefficients(CoefficientFamily::power_law(1.0, 1.0), kZero, kZero, 20));
  const Trajectory traj = integrate(sys, gen::state(rng, 20), 5.0);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    EXPECT_EQ(traj.accumulator(Accumulator::losses, k), 0.0);
    EXPECT_EQ(traj.accumulator(Accumulator::escalator_load, k), 0.0);
    EXPECT_NEAR(mass_balance_residual(traj, traj.time(k)), 0.0, 1e-11);
  }
}

TEST(MassBalance, DecoupledOracleRun) {
  gen::Rng rng(34);
  const auto rates = realize_coefficients(kZero, CoefficientFamily::constant(0.4),
                                          CoefficientFamily::power_law(0.3, 1.0), 12);
  const TruncatedSystem sys({0.0, 0.8}, rates);
  const State y0 = gen::state(rng, 12);
  const Trajectory traj = integrate(sys, y0, 5.0);
  const oracle::Decoupled ref{y0.x, 0.8, y0.M, rates.p, rates.q};
  for (double t : {0.5, 1.0, 5.0}) {
    EXPECT_LT(std::abs(mass_balance_residual(traj, t)), 1e-8);
    EXPECT_NEAR(dense_eval(traj, t).x, ref.x(t), 1e-8 * ref.x(t));
  }
}

TEST(Balances, RandomRunsSatisfyAllIntegratedBalances) {
  gen::Rng rng(35);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 60.0));
    const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
    const Trajectory traj = integrate(sys, gen::state(rng, n), 5.0);
    for (double t : {0.5, 1.7, 3.3, 5.0}) {
      EXPECT_LT(std::abs(mass_balance_residual(traj, t)), 1e-8);
      EXPECT_LT(std::abs(quartz_balance_residual(traj, t)), 1e-8);
      EXPECT_LT(std::abs(macrophage_balance_residual(traj, t)), 1e-8);
      EXPECT_LT(std::abs(x_equation_residual(traj, t)), 1e-8);
    }
  }
}

TEST(MomentIdentity, ZeroTrajectory) {
  const TruncatedSystem sys({0.0, 0.0}, realize_coefficients(kZero, kZero, kZero, 4));
  IntegratorConfig cfg;
  cfg.flux_cohorts = {1, 3};
  const Trajectory traj = integrate(sys, State::zero(4), 2.0, cfg);
  const MomentWeights w{power_weights(4, 1.5), 0.0, 0.0};
  EXPECT_EQ(moment_identity_residual(traj, w, 1, 0.0, 2.0), 0.0);
  EXPECT_EQ(moment_identity_residual(traj, w, 3, 0.5, 1.5), 0.0);
}

TEST(MomentIdentity, TelescopingUnitWeightsOnSmallChain) {
  const TruncatedSystem sys({0.6, 0.9}, realize_coefficients(CoefficientFamily::power_law(1.2, 0.5),
                                                             CoefficientFamily::constant(0.3),
                                                             CoefficientFamily::power_law(0.2, 1.0), 3));
  IntegratorConfig cfg = fine();
  cfg.flux_cohorts = {1, 2, 3};
  State y0 = State::zero(3);
  y0.x = 1.5;
  y0.M = {1.0, 0.5, 0.25, 0.1};
  const Trajectory traj = integrate(sys, y0, 4.0, cfg);
  const MomentWeights ones{constant_weights(3, 1.0), 0.0, 0.0};
  for (std::size_t m = 1; m <= 3; ++m)
    for (auto [a, b] : {std::pair{0.0, 4.0}, std::pair{0.5, 2.5}, std::pair{1.0, 1.3}})
      EXPECT_LT(std::abs(moment_identity_residual(traj, ones, m, a, b)), 1e-8) << m << " " << a << " " << b;
}

TEST(MomentIdentity, IndexWeightsPlusFreeQuartzGiveQuartzBalance) {
  gen::Rng rng(36);
  const std::size_t n = 25;
  const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
  IntegratorConfig cfg;
  cfg.flux_cohorts = {1};
  const Trajectory traj = integrate(sys, gen::state(rng, n), 3.0, cfg);
  const MomentWeights gi{index_weights(n), 0.0, 0.0};
  for (double t : {0.4, 1.9, 3.0}) {
    const double identity = moment_identity_residual(traj, gi, 1, 0.0, t);
    const double free = x_equation_residual(traj, t);
    EXPECT_LT(std::abs(identity), 1e-8);
    // The sum cancels the uptake and release integrals, leaving the quartz balance.
    EXPECT_NEAR(identity + free, quartz_balance_residual(traj, t), 1e-8);
  }
}

TEST(MomentIdentity, MissingAccumulatorsAreReported) {
  const TruncatedSystem sys({1.0, 1.0}, realize_coefficients(CoefficientFamily::constant(1.0), kZero, kZero, 4));
  State y0 = State::zero(4);
  y0.M[0] = 1.0;
  IntegratorConfig cfg;
  cfg.flux_cohorts = {1};
  const Trajectory traj = integrate(sys, y0, 1.0, cfg);
  const MomentWeights w{constant_weights(4, 1.0), 0.0, 0.0};
  EXPECT_THROW(moment_identity_residual(traj, w, 2, 0.0, 1.0), MissingAccumulator);
  EXPECT_THROW(moment_identity_residual(traj, w, 1, 1.0, 0.5), InvalidArgument);
  cfg.cohort_integrals = false;
  const Trajectory bare = integrate(sys, y0, 1.0, cfg);
  EXPECT_THROW(moment_identity_residual(bare, w, 1, 0.0, 1.0), MissingAccumulator);
}

TEST(Gronwall, ZeroRatesZeroCohorts) {
  const TruncatedSystem sys({0.0, 0.0}, realize_coefficients(kZero, kZero, kZero, 5));
  State y0 = State::zero(5);
  y0.x = 2.0;
  const Trajectory traj = integrate(sys, y0, 1.0);
  const GronwallReport rep = gronwall_check(traj, fitted_weights(power_weights(5, 1.0), sys.rates()));
  EXPECT_TRUE(rep.ok);
  EXPECT_EQ(rep.max_lhs, 0.0);
}

TEST(Gronwall, DecoupledDecay) {
  gen::Rng rng(37);
  const TruncatedSystem sys({0.0, 0.0}, realize_coefficients(kZero, CoefficientFamily::constant(0.5), kZero, 10));
  const State y0 = gen::state(rng, 10);
  const Trajectory traj = integrate(sys, y0, 3.0);
  const auto g = power_weights(10, 1.5);
  double initial = 0.0;
  for (std::size_t i = 1; i <= 10; ++i) initial += g[i] * y0.M[i];
  const GronwallReport rep = gronwall_check(traj, fitted_weights(g, sys.rates()));
  EXPECT_TRUE(rep.ok);
  // Without uptake the weighted stock plus its dissipation is conserved.
  EXPECT_NEAR(rep.max_lhs, initial, 1e-8 * initial);
}

TEST(GronwallProperty, EnvelopeHoldsOnRandomRuns) {
  gen::Rng rng(38);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 60.0));
    const double gamma = gen::uniform(rng, 0.0, 1.0);
    const auto f = gen::families(rng, gamma);
    const TruncatedSystem sys(gen::params(rng), realize_coefficients(f.k, f.p, f.q, n));
    const Trajectory traj = integrate(sys, gen::state(rng, n), 5.0);
    const GronwallReport rep = gronwall_check(traj, fitted_weights(power_weights(n, 1.0 + gamma), sys.rates()));
    EXPECT_TRUE(rep.ok);
    EXPECT_GT(rep.margin, 0.0);
    EXPECT_LE(rep.C1_fitted, rep.C1 * (1.0 + 1e-9));
  }
}

TEST(Gronwall, RejectsInadmissibleWeights) {
  const TruncatedSystem sys({1.0, 1.0}, realize_coefficients(CoefficientFamily::power_law(1.0, 1.0), kZero, kZero, 5));
  const Trajectory traj = integrate(sys, State::zero(5), 1.0);
  EXPECT_THROW(gronwall_check(traj, {power_weights(5, 2.0), 1.0, 0.5}), InvalidWeights);
  EXPECT_THROW(gronwall_check(traj, {constant_weights(5, 1.0), 1.0, 1.0}), InvalidWeights);
}

TEST(MomentRates, DerivativesAlongDenseOutput) {
  gen::Rng rng(39);
  const std::size_t n = 30;
  const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
  const Trajectory traj = integrate(sys, gen::state(rng, n), 4.0);
  const auto& c = sys.rates();
  const double h = 1e-4;
  for (double t : {0.5, 1.5, 2.5, 3.5}) {
    const auto mp = compute_moments(dense_eval(traj, t + h), c);
    const auto mm = compute_moments(dense_eval(traj, t - h), c);
    const State s = dense_eval(traj, t);
    double losses = 0.0, escalator = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      losses += c.loss(i) * s.M[i];
      escalator += static_cast<double>(i) * c.p[i] * s.M[i];
    }
    EXPECT_NEAR((mp.total_macrophages - mm.total_macrophages) / (2 * h), sys.params().r - losses, 1e-6);
    EXPECT_NEAR((mp.total_quartz - mm.total_quartz) / (2 * h), sys.params().alpha - escalator, 1e-6);
  }
}

TEST(MomentRates, ReleaseAndEscalatorLoadsAreContinuous) {
  gen::Rng rng(40);
  const std::size_t n = 40;
  const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
  const Trajectory traj = integrate(sys, gen::state(rng, n), 4.0);
  for (std::size_t k = 1; k < traj.size(); ++k) {
    const auto a = compute_moments(traj.state(k - 1), sys.rates());
    const auto b = compute_moments(traj.state(k), sys.rates());
    const double dt = traj.time(k) - traj.time(k - 1);
    // Q and P are Lipschitz along the flow; bound their slope by the vector field's size.
    const auto fa = eval_rhs(sys, traj.state(k - 1));
    double slope = 0.0;
    for (std::size_t i = 0; i <= n; ++i)
      slope += static_cast<double>(i) * std::max(sys.rates().p[i], sys.rates().q[i]) * std::abs(fa[1 + i]);
    EXPECT_LE(std::abs(b.Q - a.Q), 2.0 * slope * dt + 1e-9);
    EXPECT_LE(std::abs(b.P - a.P), 2.0 * slope * dt + 1e-9);
  }
}

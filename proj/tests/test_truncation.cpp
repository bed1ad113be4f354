#include <gtest/gtest.h>

#include <cmath>

#include "silicosis/truncation.hpp"
#include "support.hpp"

using namespace silicosis;

namespace {

TruncatedSystem zero_rates(std::size_t n, double r, double alpha) {
  const auto z = CoefficientFamily::constant(0.0);
  return TruncatedSystem({r, alpha}, realize_coefficients(z, z, z, n));
}

}  // namespace

TEST(Rhs, ZeroStateFeedsSources) {
  gen::Rng rng(1);
  const TruncatedSystem sys({2.0, 3.0}, gen::rates(rng, 5));
  const auto d = eval_rhs(sys, State::zero(5));
  EXPECT_EQ(d[0], 3.0);
  EXPECT_EQ(d[1], 2.0);
  for (std::size_t i = 2; i < d.size(); ++i) EXPECT_EQ(d[i], 0.0);
}

TEST(Rhs, DecoupledWithoutLosses) {
  gen::Rng rng(2);
  const auto sys = zero_rates(6, 0.7, 1.3);
  const State s = gen::state(rng, 6);
  const auto d = eval_rhs(sys, s);
  EXPECT_EQ(d[0], 1.3);
  EXPECT_EQ(d[1], 0.7);
  for (std::size_t i = 2; i < d.size(); ++i) EXPECT_EQ(d[i], 0.0);
}

TEST(Rhs, HandEvaluatedThreeCohortChain) {
  RateTable t;
  t.n = 2;
  t.k = {1.0, 1.0, 5.0};
  t.p = {0.0, 0.0, 0.0};
  t.q = {0.0, 1.0, 1.0};
  const TruncatedSystem sys({0.0, 0.0}, t);
  State s = State::zero(2);
  s.x = 1.0;
  s.M = {1.0, 1.0, 1.0};
  const auto d = eval_rhs(sys, s);
  EXPECT_EQ(d[1], -1.0);
  EXPECT_EQ(d[2], -1.0);
  EXPECT_EQ(d[3], 0.0);
  EXPECT_EQ(d[0], 1.0);
}

TEST(Rhs, DimensionMismatchIsRejected) {
  const auto sys = zero_rates(4, 0.0, 0.0);
  EXPECT_THROW(eval_rhs(sys, State::zero(3)), DimensionMismatch);
  std::vector<double> y(3), dy(6);
  EXPECT_THROW(eval_rhs(sys, y, dy), DimensionMismatch);
  EXPECT_THROW(eval_jacobian(sys, State::zero(5)), DimensionMismatch);
}

TEST(RhsProperty, MatchesExtendedPrecisionOracle) {
  gen::Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 80.0));
    const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
    const State s = gen::state(rng, n);
    const auto d = eval_rhs(sys, s);
    const auto ref = oracle::rhs(sys.params().r, sys.params().alpha, sys.rates(), s.x, s.M);
    for (std::size_t j = 0; j < d.size(); ++j)
      EXPECT_NEAR(d[j], static_cast<double>(ref[j]), 1e-13 * (1.0 + std::abs(static_cast<double>(ref[j]))));
  }
}

TEST(RhsProperty, QuasiPositivityOnConeBoundary) {
  gen::Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 30.0));
    const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
    State s = gen::state(rng, n);
    const std::size_t j = static_cast<std::size_t>(gen::uniform(rng, 0.0, static_cast<double>(n + 2)));
    if (j == 0)
      s.x = 0.0;
    else
      s.M[j - 1] = 0.0;
    EXPECT_GE(eval_rhs(sys, s)[j], 0.0) << "component " << j;
  }
}

TEST(RhsProperty, TotalMatterBalance) {
  gen::Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 100.0));
    const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
    const State s = gen::state(rng, n);
    const auto d = eval_rhs(sys, s);
    const auto& c = sys.rates();
    double dU = d[0], expected = sys.params().r + sys.params().alpha, scale = expected;
    for (std::size_t i = 0; i <= n; ++i) {
      dU += (static_cast<double>(i) + 1.0) * d[1 + i];
      const double loss = (c.p[i] + c.q[i]) * s.M[i] + static_cast<double>(i) * c.p[i] * s.M[i];
      expected -= loss;
      scale += loss + c.k[i] * s.x * s.M[i] * static_cast<double>(i + 1);
    }
    EXPECT_NEAR(dU, expected, 1e-13 * scale);
  }
}

TEST(Jacobian, ZeroRatesGiveZeroMatrix) {
  gen::Rng rng(8);
  const auto sys = zero_rates(5, 1.0, 2.0);
  const auto J = eval_jacobian(sys, gen::state(rng, 5)).to_dense();
  for (double v : J) EXPECT_EQ(v, 0.0);
}

TEST(Jacobian, DecoupledIsDiagonalDecay) {
  gen::Rng rng(9);
  const auto z = CoefficientFamily::constant(0.0);
  const TruncatedSystem sys({1.0, 1.0}, realize_coefficients(z, CoefficientFamily::constant(0.3),
                                                             CoefficientFamily::power_law(0.2, 1.0), 6));
  const BorderedJacobian J = eval_jacobian(sys, gen::state(rng, 6));
  for (std::size_t a = 1; a < J.dimension(); ++a)
    for (std::size_t b = 1; b < J.dimension(); ++b) {
      const double expect = a == b ? -(sys.rates().p[a - 1] + sys.rates().q[a - 1]) : 0.0;
      EXPECT_EQ(J.at(a, b), expect);
    }
}

TEST(JacobianProperty, CentralDifferenceAgreement) {
  gen::Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 40.0));
    const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
    const State s = gen::state(rng, n);
    const std::size_t d = n + 2;
    std::vector<double> y(d);
    y[0] = s.x;
    for (std::size_t i = 0; i <= n; ++i) y[1 + i] = s.M[i];
    const auto J = eval_jacobian(sys, y).to_dense();
    double jmax = 0.0;
    for (double v : J) jmax = std::max(jmax, std::abs(v));
    std::vector<double> yp(d), ym(d), fp(d), fm(d);
    for (std::size_t b = 0; b < d; ++b) {
      const double h = 1e-6 * std::max(1.0, std::abs(y[b]));
      yp = y;
      ym = y;
      yp[b] += h;
      ym[b] -= h;
      eval_rhs(sys, yp, fp);
      eval_rhs(sys, ym, fm);
      for (std::size_t a = 0; a < d; ++a) {
        const double fd = (fp[a] - fm[a]) / (2.0 * h);
        EXPECT_LE(std::abs(fd - J[a * d + b]), 1e-6 * std::max(1.0, jmax)) << "entry " << a << "," << b;
      }
    }
  }
}

TEST(ShiftedSolver, MatchesDenseElimination) {
  gen::Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(gen::uniform(rng, 0.0, 50.0));
    const TruncatedSystem sys(gen::params(rng), gen::rates(rng, n));
    const BorderedJacobian J = eval_jacobian(sys, gen::state(rng, n));
    const double c = gen::uniform(rng, 0.01, 2.0);
    const std::size_t d = n + 2;
    auto A = J.to_dense();
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) A[a * d + b] = (a == b ? 1.0 : 0.0) - c * A[a * d + b];
    std::vector<double> rhs(d);
    for (double& v : rhs) v = gen::uniform(rng, -1.0, 1.0);
    const auto ref = oracle::dense_solve(A, rhs);
    ShiftedBorderedSolver solver(J, c);
    solver.solve(rhs);
    for (std::size_t a = 0; a < d; ++a) EXPECT_NEAR(rhs[a], ref[a], 1e-10 * (1.0 + std::abs(ref[a])));
  }
}

TEST(ShiftedSolver, ZeroPivotIsSingular) {
  BorderedJacobian J;
  J.n = 2;
  J.row = {0, 0, 0};
  J.col = {0, 0, 0};
  J.diag = {1.0, 0.0, 0.0};
  J.sub = {0, 0, 0};
  EXPECT_THROW(ShiftedBorderedSolver(J, 1.0), SingularMatrix);
}

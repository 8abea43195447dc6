#include "grokking/diagnostics.hpp"
#include "grokking/ref_solvers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace grokking;

namespace {

LabeledDataset binary(const Mat& X, const Vec& y) {
  LabeledDataset ds;
  ds.task = Task::BinaryClassification;
  ds.train.X = X;
  ds.train.y = y;
  return ds;
}

// Diagonal-net parameters realizing the effective weight w.
ParamVector diagonal_params(const HomogeneousModel& m, const Vec& w) {
  Vec th(2 * w.size());
  th << w.cwiseMax(0).cwiseSqrt(), (-w).cwiseMax(0).cwiseSqrt();
  return ParamVector(m, th);
}

}  // namespace

TEST(FLL, Examples) {
  EXPECT_EQ(f_ll(1.0), 0.0);
  EXPECT_NEAR(f_ll(std::numbers::e), std::numbers::e, 1e-15);
  EXPECT_EQ(f_ll_inv(0.0), 1.0);
  EXPECT_THROW(f_ll(0.5), ConfigError);
  EXPECT_THROW(f_ll_inv(-1.0), ConfigError);
}

TEST(FLL, LowerBoundOnInverse) {
  for (double y : {0.5, 5.0, 50.0, 5000.0}) EXPECT_GE(f_ll_inv(y), y / std::log(y + 1.0)) << y;
}

TEST(FLL, InverseIdentityOnLogGrid) {
  for (int k = 0; k <= 600; ++k) {
    const double x = std::pow(10.0, k / 100.0);
    EXPECT_NEAR(f_ll_inv(f_ll(x)), x, 1e-10 * x) << x;
    const double y = std::pow(10.0, -3.0 + k / 60.0);
    EXPECT_NEAR(f_ll(f_ll_inv(y)), y, 1e-12 * std::max(1.0, y)) << y;
  }
}

TEST(LossBound, InitialValue) {
  EXPECT_DOUBLE_EQ(loss_upper_bound_classification(64, 1e-3, 2, 0.1, 0.0), 1.0);
  const double y2 = 3.0;
  EXPECT_DOUBLE_EQ(loss_upper_bound(BoundKind::Regression, 64, 1e-3, 2, 0.5, 10, 0.0, y2), y2 / 10.0);
}

TEST(LossBound, VanishesAsScaleGrows) {
  double prev = 1.0;
  for (double alpha : {1e1, 1e2, 1e3, 1e4, 1e5}) {
    const double b = loss_upper_bound_classification(alpha, 1e-2, 2, 0.1, 1.0);
    EXPECT_LT(b, prev);
    prev = b;
  }
  EXPECT_LT(prev, 1e-6);
  EXPECT_LT(loss_upper_bound_regression(1e5, 1e-2, 2, 0.5, 10, 3.0, 1.0), 1e-10);
}

TEST(LossBound, BranchArithmetic) {
  const double alpha = 4, lambda = 0.01, gamma = 0.3, t = 20;
  const int L = 2;
  const double A = alpha * alpha / lambda;
  const double first = 1.0 / (1.0 + gamma * gamma * A * (1 - std::exp(-2 * lambda * t)) / 16.0);
  const double second = std::exp(2 * lambda * t) / (f_ll_inv(gamma * gamma * A / 16.0) - 1.0);
  EXPECT_NEAR(loss_upper_bound_classification(alpha, lambda, L, gamma, t), std::max(first, second), 1e-15);
  // late times hit the growing branch
  EXPECT_GT(loss_upper_bound_classification(alpha, lambda, L, gamma, 500.0),
            loss_upper_bound_classification(alpha, lambda, L, gamma, 100.0));
  const double nu = 2, y2 = 5;
  const int n = 4;
  const double r1 = y2 / n * std::exp(-nu * A * (1 - std::exp(-2 * lambda * t)) / (8.0 * n));
  const double r2 = 16.0 * n * 4 * y2 * lambda * lambda * std::exp(4 * lambda * t) / (nu * nu * std::pow(alpha, 4));
  EXPECT_NEAR(loss_upper_bound_regression(alpha, lambda, L, nu, n, y2, t), std::max(r1, r2), 1e-15);
}

TEST(LossBound, CurveIsPositiveAndFinite) {
  std::vector<double> times;
  for (int i = 0; i <= 50; ++i) times.push_back(100.0 * i);
  const auto c = bound_curve(BoundKind::Classification, 64, 1e-3, 2, 0.2, 8, times);
  ASSERT_EQ(c.values.size(), times.size());
  for (double v : c.values) {
    EXPECT_GT(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_THROW(loss_upper_bound_classification(2, 0.1, 1, 0.1, 1), ConfigError);
}

TEST(KktR1, ConstructedKktPoint) {
  const auto m = HomogeneousModel::diagonal_linear(2);
  Mat X(1, 2);
  X << 1, 0;
  Vec th(4);
  th << 1, 0, 0, 0;
  const auto cert = kkt_residual_r1(m, ParamVector(m, th), binary(X, Vec::Ones(1)));
  EXPECT_TRUE(cert.passed);
  EXPECT_LE(cert.residual("stationarity"), 1e-14);
  EXPECT_LE(cert.residual("complementarity"), 1e-14);
  EXPECT_EQ(cert.residual("feasibility"), 0.0);
  ASSERT_TRUE(cert.multipliers.has_value());
  EXPECT_NEAR((*cert.multipliers)(0), 0.5, 1e-14);
}

TEST(KktR1, L1MaxMarginSolutionIsKktForDiagonalNet) {
  const auto m = HomogeneousModel::diagonal_linear(15);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto ds = gen_sparse_linear(15, 3, 20, 0, seed);
    const Vec w = solve_l1_max_margin(ds).w;
    const auto cert = kkt_residual_r1(m, diagonal_params(m, w), ds);
    for (const auto& [name, value] : cert.residuals) EXPECT_LE(value, 1e-6) << name;
  }
}

TEST(KktR1, ScaleInvariance) {
  const auto m = HomogeneousModel::diagonal_linear(10);
  const auto ds = gen_sparse_linear(10, 3, 12, 0, 1);
  const ParamVector th = diagonal_params(m, solve_l2_max_margin(ds).w);
  const auto base = kkt_residual_r1(m, th, ds);
  for (double c : {0.1, 3.0, 50.0}) {
    const auto scaled = kkt_residual_r1(m, ParamVector(m, c * th.values), ds);
    for (const auto& [name, value] : base.residuals) EXPECT_NEAR(scaled.residual(name), value, 1e-10) << name;
  }
}

TEST(KktR1, StationarityGrowsWithNoise) {
  const auto m = HomogeneousModel::diagonal_linear(15);
  const auto ds = gen_sparse_linear(15, 3, 20, 0, 4);
  const ParamVector th = diagonal_params(m, solve_l1_max_margin(ds).w);
  Rng rng = make_rng(9);
  std::normal_distribution<double> nd;
  Vec z(th.size());
  for (auto& v : z) v = nd(rng);
  z.normalize();
  std::vector<double> res;
  for (int k = 0; k <= 10; ++k) {
    const double sigma = 1e-5 * std::pow(2.0, k);
    res.push_back(kkt_residual_r1(m, ParamVector(m, th.values + sigma * th.values.norm() * z), ds).residual("stationarity"));
  }
  int monotone = 0;
  for (std::size_t i = 1; i < res.size(); ++i) monotone += res[i] >= res[i - 1];
  EXPECT_GE(monotone, 9);
}

TEST(KktR1, NonPositiveMarginFailsOnFeasibility) {
  const auto m = HomogeneousModel::diagonal_linear(2);
  Mat X(1, 2);
  X << 1, 0;
  Vec th(4);
  th << 0, 0, 1, 0;  // f = −1
  const auto cert = kkt_residual_r1(m, ParamVector(m, th), binary(X, Vec::Ones(1)));
  EXPECT_FALSE(cert.passed);
  EXPECT_DOUBLE_EQ(cert.residual("feasibility"), 2.0);
  EXPECT_EQ(cert.residuals.count("stationarity"), 0u);
}

TEST(KktR2, Examples) {
  const auto m = HomogeneousModel::diagonal_linear(2);
  LabeledDataset ds;
  ds.task = Task::Regression;
  ds.train.X = Mat::Identity(2, 2);
  ds.train.y = Vec{{1.0, -2.0}};
  Vec th(4);
  th << 1, 0, 0, std::sqrt(2.0);
  const auto exact = kkt_residual_r2(m, ParamVector(m, th), ds, 0.0);
  EXPECT_LE(exact.residual("stationarity"), 1e-9);
  EXPECT_LE(exact.residual("interpolation"), 1e-9);
  EXPECT_TRUE(exact.passed);
  const auto zero = kkt_residual_r2(m, ParamVector(m, Vec::Zero(4)), ds, 0.1);
  EXPECT_DOUBLE_EQ(zero.residual("interpolation"), 2.0);
  EXPECT_FALSE(zero.passed);
  // an interpolant with weight decay is off by exactly λθ
  const auto decayed = kkt_residual_r2(m, ParamVector(m, th), ds, 0.1);
  EXPECT_NEAR(decayed.residual("stationarity"), 0.1 * th.norm() / std::max(1.0, th.norm()), 1e-12);
}

TEST(NuclearCertificate, SingleEntryAnalyticCase) {
  const double lambda = 0.2;
  LabeledDataset ds;
  ds.task = Task::Regression;
  ds.train.X.setZero(1, 2);
  ds.train.y = Vec::Constant(1, 1.0 + lambda / 4.0);
  Mat W = Mat::Zero(2, 2);
  W(0, 0) = 1.0;
  const auto ok = nuclear_subgrad_certificate(W, ds, lambda);
  EXPECT_TRUE(ok.passed);
  for (const auto& [name, value] : ok.residuals) EXPECT_LE(value, 1e-12) << name;
  ds.train.y(0) = 1.0 + lambda;
  EXPECT_FALSE(nuclear_subgrad_certificate(W, ds, lambda).passed);
}

TEST(NuclearCertificate, SolverOutputPassesWithMatchedLambda) {
  const auto ds = gen_multiplication_table(8, 0.6, 0);
  const auto sol = solve_min_nuclear(ds, 8);
  const auto cert = nuclear_subgrad_certificate(sol.W, ds, sol.matched_lambda);
  for (const auto& [name, value] : cert.residuals) EXPECT_LE(value, 1e-4) << name;
  EXPECT_TRUE(cert.passed);
}

TEST(NuclearCertificate, PerturbedSolutionsFail) {
  const auto ds = gen_multiplication_table(8, 0.6, 0);
  const auto sol = solve_min_nuclear(ds, 8);
  const Mat& X = ds.meta.target;
  Rng rng = make_rng(5);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 10; ++trial) {
    Mat P(8, 8);
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = nd(rng);
    P = 0.5 * (P + P.transpose()).eval();
    P *= 0.1 * X.norm() / P.norm();
    EXPECT_FALSE(nuclear_subgrad_certificate(sol.W + P, ds, sol.matched_lambda).passed) << trial;
  }
  // a weight decay far too large for the fitted residuals
  EXPECT_FALSE(nuclear_subgrad_certificate(sol.W, ds, 100.0 * sol.matched_lambda + 1.0).passed);
}

TEST(NuclearCertificate, RejectsAsymmetricInput) {
  const auto ds = gen_multiplication_table(3, 1.0, 0);
  Mat W = Mat::Zero(3, 3);
  W(0, 1) = 1;
  EXPECT_THROW(nuclear_subgrad_certificate(W, ds, 0.1), ConfigError);
}

TEST(Transition, StepFunction) {
  std::vector<double> t, v;
  for (int i = 1; i <= 2000; ++i) {
    t.push_back(i);
    v.push_back(i < 1000 ? 0.5 : 1.0);
  }
  const auto tr = detect_transition(t, v, 0.55, 0.95);
  ASSERT_TRUE(tr.has_value());
  EXPECT_EQ(tr->t_star, 1000.0);
  EXPECT_EQ(tr->t_low, 999.0);
  EXPECT_NEAR(tr->sharpness, 1e-3, 1e-12);
}

TEST(Transition, LinearRamp) {
  std::vector<double> t, v;
  const double T = 400;
  for (int i = 0; i <= 400; ++i) {
    t.push_back(i);
    v.push_back(i / T);
  }
  const auto tr = detect_transition(t, v, 0.25, 0.75);
  ASSERT_TRUE(tr.has_value());
  EXPECT_DOUBLE_EQ(tr->sharpness, 0.5 * T / tr->t_star);
}

TEST(Transition, NeverCrossingAndNoLowSample) {
  const std::vector<double> t{1, 2, 3}, flat{0.1, 0.2, 0.3}, high{0.9, 0.99, 1.0};
  EXPECT_FALSE(detect_transition(t, flat, 0.05, 0.95).has_value());
  const auto tr = detect_transition(t, high, 0.05, 0.95);
  ASSERT_TRUE(tr.has_value());
  EXPECT_EQ(tr->t_star, 2.0);
  EXPECT_EQ(tr->t_low, 1.0);
}

TEST(Transition, FromLogRowsAndUnknownMetric) {
  TrajectoryLog log;
  for (int i = 1; i <= 5; ++i) {
    TrajectoryRow r;
    r.time = i;
    r.test_acc = i >= 4 ? 1.0 : 0.0;
    log.rows.push_back(r);
  }
  EXPECT_EQ(detect_transition(log, "test_acc", 0.05, 0.95)->t_star, 4.0);
  EXPECT_THROW(detect_transition(log, "bogus", 0, 1), ConfigError);
}

TEST(RecoveryBound, Scaling) {
  EXPECT_EQ(recovery_error_bound(0.0, 5.0, 1.0, 8.0), 0.0);
  const double a = recovery_error_bound(1e-3, 5.0, 1.5, 32.0);
  EXPECT_NEAR(recovery_error_bound(4e-3, 5.0, 1.5, 32.0), 2.0 * a, 1e-15);
  const auto ds = gen_multiplication_table(32, 1.0, 0);
  const double nuc = Eigen::JacobiSVD<Mat>(ds.meta.target).singularValues().sum();
  EXPECT_NEAR(recovery_error_bound(1e-3, nuc, 1.0, 32), std::sqrt(1e-3 * nuc) * std::log(32.0), 1e-12);
}

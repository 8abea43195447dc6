#include "grokking/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace grokking;

namespace {

Vec random_vec(Eigen::Index n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Vec v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

// One input drawn from the model's input domain.
Vec random_input(const HomogeneousModel& m, Rng& rng) {
  if (m.is<TwoLayerReLU>()) {
    const auto p = m.as<TwoLayerReLU>().p;
    std::uniform_int_distribution<Eigen::Index> pick(0, p - 1);
    Vec x = Vec::Zero(2 * p);
    x(pick(rng)) = 1.0;
    x(p + pick(rng)) = 1.0;
    return x;
  }
  if (m.is<MatrixFactorization>()) {
    std::uniform_int_distribution<Eigen::Index> pick(0, m.as<MatrixFactorization>().d - 1);
    Vec x(2);
    x << static_cast<double>(pick(rng)), static_cast<double>(pick(rng));
    return x;
  }
  return random_vec(m.input_dim(), rng);
}

// Smallest |pre-activation| of the hidden layer; finite differences are only
// meaningful away from the ReLU kink.
double kink_distance(const HomogeneousModel& m, const Vec& theta, const Vec& x) {
  if (!m.is<TwoLayerReLU>()) return 1.0;
  const auto& k = m.as<TwoLayerReLU>();
  Eigen::Map<const Mat> W1(theta.data(), k.h, 2 * k.p);
  Eigen::Map<const Vec> b1(theta.data() + k.h * 2 * k.p, k.h);
  return (W1 * x + b1).cwiseAbs().minCoeff();
}

std::vector<HomogeneousModel> zoo() {
  return {HomogeneousModel::two_layer_relu(5, 8), HomogeneousModel::diagonal_linear(7),
          HomogeneousModel::matrix_factorization(4)};
}

}  // namespace

TEST(Forward, DiagonalExamples) {
  const auto m = HomogeneousModel::diagonal_linear(2);
  Vec th(4), x(2);
  th << 1, 0, 0, 1;
  x << 1, 1;
  EXPECT_EQ(forward(m, ParamVector(m, th), x)(0), 0.0);
  th << 2, 0, 0, 0;
  x << 1, 0;
  EXPECT_DOUBLE_EQ(forward(m, ParamVector(m, th), x)(0), 4.0);
}

TEST(Forward, MatrixIdentityFactor) {
  const auto m = HomogeneousModel::matrix_factorization(2);
  Vec th = Vec::Zero(8);
  Eigen::Map<Mat>(th.data(), 2, 2).setIdentity();
  Vec x(2);
  x << 1, 1;
  EXPECT_DOUBLE_EQ(forward(m, ParamVector(m, th), x)(0), 1.0);
  x << 0, 1;
  EXPECT_DOUBLE_EQ(forward(m, ParamVector(m, th), x)(0), 0.0);
}

TEST(Forward, MatrixUsesSymmetrizedProbe) {
  // ⟨½(e_i e_jᵀ + e_j e_iᵀ), W⟩ for an asymmetric-looking factor product.
  const auto m = HomogeneousModel::matrix_factorization(3);
  Rng rng = make_rng(11);
  const ParamVector th(m, random_vec(m.param_count(), rng));
  const Mat W = completed_matrix(m, th);
  Vec x(2);
  x << 0, 2;
  EXPECT_NEAR(forward(m, th, x)(0), 0.5 * (W(0, 2) + W(2, 0)), 1e-14);
}

TEST(Forward, ShapeMismatchIsConfigError) {
  const auto m = HomogeneousModel::diagonal_linear(3);
  EXPECT_THROW(forward(m, ParamVector(m, Vec::Ones(5)), Vec::Ones(3)), ConfigError);
  EXPECT_THROW(forward(m, ParamVector(m, Vec::Ones(6)), Vec::Ones(4)), ConfigError);
  const auto mf = HomogeneousModel::matrix_factorization(2);
  Vec bad(2);
  bad << 0, 2;
  EXPECT_THROW(forward(mf, ParamVector(mf, Vec::Ones(8)), bad), ConfigError);
}

TEST(Grad, DiagonalHandExamples) {
  const auto m = HomogeneousModel::diagonal_linear(1);
  Vec th(2), x(1);
  th << 3, 1;
  x << 2;
  const Vec g = grad(m, ParamVector(m, th), x).values;
  EXPECT_DOUBLE_EQ(g(0), 12.0);
  EXPECT_DOUBLE_EQ(g(1), -4.0);
}

TEST(Grad, DiagonalNtkFeatureAtUnitInit) {
  const auto m = HomogeneousModel::diagonal_linear(4);
  Vec x(4);
  x << 1, -2, 0.5, 3;
  const Vec g = grad(m, base_init(m), x).values;
  EXPECT_TRUE(g.head(4).isApprox(2 * x));
  EXPECT_TRUE(g.tail(4).isApprox(-2 * x));
}

TEST(Grad, OutIndexOutOfRange) {
  const auto m = HomogeneousModel::two_layer_relu(3, 4);
  const ParamVector th = make_init(m, 1.0, 0.0, 1);
  EXPECT_THROW(grad(m, th, Vec::Ones(6), 3), ConfigError);
  EXPECT_THROW(grad(m, th, Vec::Ones(6), -1), ConfigError);
}

TEST(Grad, MatchesCentralDifferences) {
  constexpr double h = 1e-5;
  for (const auto& m : zoo()) {
    Rng rng = make_rng(2024, static_cast<std::uint64_t>(m.param_count()));
    int probes = 0;
    while (probes < 100) {
      Vec th = random_vec(m.param_count(), rng);
      const Vec x = random_input(m, rng);
      if (kink_distance(m, th, x) < 1e-3) continue;
      std::uniform_int_distribution<Eigen::Index> pick(0, m.output_dim() - 1);
      const Eigen::Index out = pick(rng);
      const Vec g = grad(m, ParamVector(m, th), x, out).values;
      for (Eigen::Index k = 0; k < th.size(); ++k) {
        Vec tp = th, tm = th;
        tp(k) += h;
        tm(k) -= h;
        const double fd = (forward(m, ParamVector(m, tp), x)(out) - forward(m, ParamVector(m, tm), x)(out)) / (2 * h);
        ASSERT_LE(std::abs(fd - g(k)), 1e-5 * std::max(1.0, std::abs(fd))) << m.id() << " component " << k;
      }
      ++probes;
    }
  }
}

TEST(Homogeneity, DegreeTwoScaling) {
  for (const auto& m : zoo()) {
    EXPECT_EQ(m.degree(), 2);
    Rng rng = make_rng(99);
    for (int trial = 0; trial < 20; ++trial) {
      const Vec th = random_vec(m.param_count(), rng);
      const Vec x = random_input(m, rng);
      const Vec f = forward(m, ParamVector(m, th), x);
      for (double c : {0.5, 2.0, 7.0}) {
        const Vec fc = forward(m, ParamVector(m, c * th), x);
        for (Eigen::Index o = 0; o < f.size(); ++o)
          EXPECT_LE(std::abs(fc(o) - c * c * f(o)), 1e-9 * (1 + std::abs(f(o)))) << m.id();
      }
    }
  }
}

TEST(Homogeneity, EulerIdentity) {
  for (const auto& m : zoo()) {
    Rng rng = make_rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const ParamVector th(m, random_vec(m.param_count(), rng));
      const Vec x = random_input(m, rng);
      const Vec f = forward(m, th, x);
      for (Eigen::Index o = 0; o < m.output_dim(); ++o) {
        const double lhs = grad(m, th, x, o).values.dot(th.values);
        EXPECT_LE(std::abs(lhs - 2 * f(o)), 1e-9 * std::max(1.0, std::abs(2 * f(o)))) << m.id();
      }
    }
  }
}

TEST(Pullback, EqualsSumOfSingleGradients) {
  for (const auto& m : zoo()) {
    Rng rng = make_rng(8);
    const ParamVector th(m, random_vec(m.param_count(), rng));
    Mat X(6, m.input_dim());
    for (Eigen::Index i = 0; i < 6; ++i) X.row(i) = random_input(m, rng).transpose();
    const Mat dout = Mat::Random(6, m.output_dim());
    Vec expected = Vec::Zero(m.param_count());
    for (Eigen::Index i = 0; i < 6; ++i)
      for (Eigen::Index o = 0; o < m.output_dim(); ++o)
        expected += dout(i, o) * grad(m, th, X.row(i).transpose(), o).values;
    EXPECT_LE((pullback(m, th, X, dout) - expected).norm(), 1e-12 * (1 + expected.norm())) << m.id();
  }
}

TEST(Init, DiagonalUniformScale) {
  const auto m = HomogeneousModel::diagonal_linear(3);
  const ParamVector th = make_init(m, 2.0, 0.0, 0);
  EXPECT_TRUE(th.values.isApprox(Vec::Constant(6, 2.0)));
  EXPECT_TRUE(effective_weight(m, th).isZero(0.0));
}

TEST(Init, MatrixIdentityTimesAlpha) {
  const auto m = HomogeneousModel::matrix_factorization(2);
  const ParamVector th = make_init(m, 10.0, 0.0, 0);
  Vec expected = Vec::Zero(8);
  expected << 10, 0, 0, 10, 10, 0, 0, 10;
  EXPECT_EQ(th.values, expected);
}

TEST(Init, MatrixPerturbationStatistics) {
  const auto m = HomogeneousModel::matrix_factorization(40);
  const ParamVector th = make_init(m, 3.0, 0.5, 17);
  Eigen::Map<const Mat> U(th.values.data(), 40, 40);
  const Mat noise = U - 3.0 * Mat::Identity(40, 40);
  const double mean = noise.mean();
  const double sd = std::sqrt((noise.array() - mean).square().sum() / (noise.size() - 1));
  EXPECT_NEAR(mean, 0.0, 4 * 0.5 / 40);
  EXPECT_NEAR(sd, 0.5, 0.05);
}

TEST(Init, ReluSecondLayerZeroAndScaled) {
  const auto m = HomogeneousModel::two_layer_relu(4, 6);
  const ParamVector a = make_init(m, 1.0, 0.0, 3);
  const ParamVector b = make_init(m, 5.0, 0.0, 3);
  EXPECT_TRUE(b.values.isApprox(5.0 * a.values));
  EXPECT_TRUE(b.values.tail(4 * 6).isZero(0.0));
  EXPECT_GT(a.values.head(6 * 8).norm(), 0.0);
}

TEST(Init, ZeroOutputEverywhere) {
  for (const auto& m : zoo()) {
    Rng rng = make_rng(1);
    const ParamVector th = make_init(m, 7.5, 0.0, 9);
    Mat X(50, m.input_dim());
    for (Eigen::Index i = 0; i < 50; ++i) X.row(i) = random_input(m, rng).transpose();
    EXPECT_EQ(forward_batch(m, th, X).cwiseAbs().maxCoeff(), 0.0) << m.id();
  }
}

TEST(Init, RejectsBadArguments) {
  const auto m = HomogeneousModel::diagonal_linear(3);
  EXPECT_THROW(make_init(m, 0.0, 0.0, 0), ConfigError);
  EXPECT_THROW(make_init(m, 1.0, 0.1, 0), ConfigError);
  EXPECT_THROW(make_init(HomogeneousModel::two_layer_relu(3, 2), 1.0, 0.1, 0), ConfigError);
}

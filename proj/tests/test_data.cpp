#include "grokking/data.hpp"

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include <set>
#include <utility>

using namespace grokking;

namespace {

std::set<std::pair<int, int>> pairs_of(const Split& s, Eigen::Index p) {
  std::set<std::pair<int, int>> out;
  for (Eigen::Index r = 0; r < s.size(); ++r) {
    int a = -1, b = -1;
    for (Eigen::Index c = 0; c < p; ++c) {
      if (s.X(r, c) == 1.0) a = static_cast<int>(c);
      if (s.X(r, p + c) == 1.0) b = static_cast<int>(c);
    }
    out.emplace(a, b);
  }
  return out;
}

}  // namespace

TEST(ModularAddition, TrainSizeIsRoundedFraction) {
  const auto ds = gen_modular_addition(97, 0.4, 0);
  // round(0.4 * 9409) = round(3763.6)
  EXPECT_EQ(ds.train.size(), 3764);
  EXPECT_EQ(ds.test.size(), 9409 - 3764);
  EXPECT_EQ(ds.task, Task::MultiClass);
  EXPECT_EQ(ds.num_classes(), 97);
}

TEST(ModularAddition, ExhaustiveP2) {
  const auto ds = gen_modular_addition(2, 0.5, 4);
  EXPECT_EQ(ds.train.size(), 2);
  std::set<std::pair<int, int>> seen;
  for (const Split* s : {&ds.train, &ds.test}) {
    const auto ps = pairs_of(*s, 2);
    for (Eigen::Index r = 0; r < s->size(); ++r) {
      const int a = s->X(r, 1) == 1.0, b = s->X(r, 3) == 1.0;
      EXPECT_EQ(s->X.row(r).sum(), 2.0);
      EXPECT_EQ(s->y(r), (a + b) % 2);
    }
    seen.insert(ps.begin(), ps.end());
  }
  EXPECT_EQ(seen.size(), 4u);
}

TEST(ModularAddition, DisjointCoveringSplit) {
  const auto ds = gen_modular_addition(13, 0.3, 8);
  const auto tr = pairs_of(ds.train, 13), te = pairs_of(ds.test, 13);
  EXPECT_EQ(tr.size() + te.size(), 169u);
  for (const auto& pr : tr) EXPECT_EQ(te.count(pr), 0u);
}

TEST(ModularAddition, Deterministic) {
  const auto a = gen_modular_addition(11, 0.4, 5), b = gen_modular_addition(11, 0.4, 5);
  EXPECT_EQ(a.train.X, b.train.X);
  EXPECT_EQ(a.test.y, b.test.y);
  const auto c = gen_modular_addition(11, 0.4, 6);
  EXPECT_NE(a.train.X, c.train.X);
}

TEST(ModularAddition, RejectsBadArguments) {
  EXPECT_THROW(gen_modular_addition(1, 0.4, 0), ConfigError);
  EXPECT_THROW(gen_modular_addition(5, 1.0, 0), ConfigError);
  EXPECT_THROW(gen_modular_addition(5, 0.0, 0), ConfigError);
}

TEST(SparseLinear, LabelsFollowSparseTruth) {
  const auto ds = gen_sparse_linear(30, 3, 200, 50, 1);
  const Vec& w = ds.meta.w_star;
  EXPECT_EQ((w.array() != 0).count(), 3);
  EXPECT_EQ(w.cwiseAbs().sum(), 3.0);
  for (const Split* s : {&ds.train, &ds.test}) {
    EXPECT_TRUE((s->X.array().abs() == 1.0).all());
    for (Eigen::Index i = 0; i < s->size(); ++i) EXPECT_EQ(s->y(i), s->X.row(i).dot(w) > 0 ? 1.0 : -1.0);
  }
}

TEST(SparseLinear, HandExampleSignOfSum) {
  Vec x(3), w(3);
  x << 1, 1, -1;
  w << 1, 1, 1;
  EXPECT_EQ(detail::sign_label(x.dot(w)), 1.0);
  Vec x5 = Vec::Ones(5), e1 = Vec::Zero(5);
  e1(0) = -1;
  EXPECT_EQ(detail::sign_label(x5.dot(e1)), -1.0);
}

TEST(SparseLinear, L1MarginIsOneOverK) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = gen_sparse_linear(40, 5, 300, 0, seed);
    const Vec& w = ds.meta.w_star;
    const double margin = (ds.train.y.array() * (ds.train.X * w).array()).minCoeff() / w.lpNorm<1>();
    EXPECT_DOUBLE_EQ(margin, 1.0 / 5.0);
  }
}

TEST(SparseLinear, SupportIsPermutedBySeed) {
  const auto a = gen_sparse_linear(200, 3, 4, 0, 1), b = gen_sparse_linear(200, 3, 4, 0, 2);
  EXPECT_EQ(a.meta.permutation.size(), 200u);
  EXPECT_NE(a.meta.permutation, b.meta.permutation);
}

TEST(SparseLinear, RejectsEvenK) {
  EXPECT_THROW(gen_sparse_linear(10, 2, 5, 5, 0), ConfigError);
  EXPECT_THROW(gen_sparse_linear(10, 11, 5, 5, 0), ConfigError);
}

TEST(MarginGaussian, EverySampleHasMargin) {
  const double gamma = 25.0;
  const auto ds = gen_margin_gaussian(64, 32, gamma, 3, 200);
  const Vec& w = ds.meta.w_star;
  EXPECT_NEAR(w.norm(), 1.0, 1e-12);
  for (const Split* s : {&ds.train, &ds.test})
    for (Eigen::Index i = 0; i < s->size(); ++i) {
      EXPECT_GE(s->y(i) * s->X.row(i).dot(w), gamma / 2);
      // the pre-shift Gaussian point carries the label's sign
      const Vec z = s->X.row(i).transpose() - 0.5 * gamma * s->y(i) * w;
      EXPECT_GT(s->y(i) * z.dot(w), 0.0);
    }
}

TEST(MarginGaussian, TinyGammaLeavesGaussian) {
  const auto ds = gen_margin_gaussian(5, 200, 1e-12, 0, 0);
  const Vec mean = ds.train.X.colwise().mean();
  EXPECT_LT(mean.norm(), 0.5);
  const double var = ds.train.X.array().square().mean();
  EXPECT_NEAR(var, 1.0, 0.25);
}

TEST(MultiplicationTable, EntriesAndRankOne) {
  const auto ds = gen_multiplication_table(4, 0.5, 0);
  EXPECT_DOUBLE_EQ(ds.meta.target(2, 3), 0.375);
  Vec u(4);
  u << 0, 0.25, 0.5, 0.75;
  EXPECT_TRUE(ds.meta.target.isApprox(u * u.transpose()));
  const auto big = gen_multiplication_table(16, 0.3, 1);
  const Vec sv = Eigen::JacobiSVD<Mat>(big.meta.target).singularValues();
  EXPECT_GT(sv(0), 0.1);
  EXPECT_LT(sv(1), 1e-14);
}

TEST(MultiplicationTable, SplitPartitionsGrid) {
  const auto ds = gen_multiplication_table(9, 0.25, 7);
  EXPECT_EQ(ds.train.size(), 20);  // round(0.25 * 81)
  std::set<std::pair<int, int>> seen;
  for (const Split* s : {&ds.train, &ds.test})
    for (Eigen::Index r = 0; r < s->size(); ++r) {
      const int i = static_cast<int>(s->X(r, 0)), j = static_cast<int>(s->X(r, 1));
      EXPECT_TRUE(seen.emplace(i, j).second);
      EXPECT_DOUBLE_EQ(s->y(r), static_cast<double>(i * j) / 81.0);
    }
  EXPECT_EQ(seen.size(), 81u);
}

TEST(MultiplicationTable, FullObservationHasEmptyTest) {
  const auto ds = gen_multiplication_table(5, 1.0, 0);
  EXPECT_EQ(ds.train.size(), 25);
  EXPECT_EQ(ds.test.size(), 0);
}

TEST(Json, RoundTripPreservesEverything) {
  for (const auto& ds : {gen_sparse_linear(12, 3, 10, 5, 2), gen_multiplication_table(6, 0.4, 3),
                         gen_modular_addition(5, 0.4, 1), gen_margin_gaussian(7, 9, 3.0, 4, 3)}) {
    const auto back = dataset_from_json(nlohmann::json::parse(to_json(ds).dump()));
    EXPECT_EQ(back.task, ds.task);
    EXPECT_EQ(back.train.X, ds.train.X);
    EXPECT_EQ(back.train.y, ds.train.y);
    EXPECT_EQ(back.test.X, ds.test.X);
    EXPECT_EQ(back.test.y, ds.test.y);
    EXPECT_EQ(back.meta.w_star, ds.meta.w_star);
    EXPECT_EQ(back.meta.target, ds.meta.target);
    EXPECT_EQ(back.meta.generator, ds.meta.generator);
    EXPECT_EQ(back.meta.seed, ds.meta.seed);
  }
}

TEST(Json, MalformedInputIsConfigError) {
  EXPECT_THROW(dataset_from_json(nlohmann::json::parse(R"({"task":"binary"})")), ConfigError);
  EXPECT_THROW(dataset_from_json(nlohmann::json::parse(R"({"task":"nope","meta":{}})")), ConfigError);
}

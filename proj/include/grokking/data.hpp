#pragma once

// Seeded dataset generators and JSON round-tripping.

#include "grokking/core.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace grokking {

enum class Task { BinaryClassification, MultiClass, Regression };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::BinaryClassification: return "binary";
    case Task::MultiClass: return "multiclass";
    case Task::Regression: return "regression";
  }
  return "?";
}

inline Task task_from_string(const std::string& s) {
  if (s == "binary") return Task::BinaryClassification;
  if (s == "multiclass") return Task::MultiClass;
  if (s == "regression") return Task::Regression;
  throw ConfigError("unknown task '" + s + "'");
}

/// Inputs as rows of X, targets in y.
struct Split {
  Mat X;
  Vec y;
  Eigen::Index size() const noexcept { return X.rows(); }
};

struct DatasetMeta {
  std::string generator;
  std::int64_t p = 0, d = 0, k = 0, n = 0;
  double gamma = 0.0;
  double observe_fraction = 0.0;
  double train_fraction = 0.0;
  std::uint64_t seed = 0;
  Vec w_star;                       // ground-truth direction (sparse / margin-gaussian)
  std::vector<std::int64_t> permutation;  // coordinate permutation applied to the sparse support
  Mat target;                       // full X* for matrix completion
};

struct LabeledDataset {
  Task task = Task::BinaryClassification;
  Split train;
  Split test;
  DatasetMeta meta;

  Eigen::Index input_dim() const noexcept { return train.X.cols(); }
  /// Number of logits needed for multi-class targets.
  Eigen::Index num_classes() const noexcept { return task == Task::MultiClass ? meta.p : 1; }
};

namespace detail {

inline std::vector<std::int64_t> shuffled_indices(std::int64_t n, Rng& rng) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::int64_t> pick(0, i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  return idx;
}

inline std::int64_t rounded_count(double fraction, std::int64_t total) {
  return static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(total)));
}

inline double sign_label(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

inline Mat rademacher(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat X(rows, cols);
  std::bernoulli_distribution coin(0.5);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) X(r, c) = coin(rng) ? 1.0 : -1.0;
  return X;
}

}  // namespace detail

/// All p² ordered pairs (a, b) labelled (a+b) mod p; inputs are concatenated
/// one-hots of length 2p; labels are class indices.
inline LabeledDataset gen_modular_addition(std::int64_t p, double train_fraction, std::uint64_t seed) {
  require(p >= 2, "modular addition needs p >= 2");
  require(train_fraction > 0 && train_fraction < 1, "train_fraction must lie in (0, 1)");
  const std::int64_t total = p * p;
  const std::int64_t n_train = detail::rounded_count(train_fraction, total);
  Rng rng = make_rng(seed, 1);
  const auto order = detail::shuffled_indices(total, rng);

  auto fill = [&](Split& s, std::size_t begin, std::size_t end) {
    s.X = Mat::Zero(static_cast<Eigen::Index>(end - begin), 2 * p);
    s.y.resize(static_cast<Eigen::Index>(end - begin));
    for (std::size_t r = begin; r < end; ++r) {
      const auto row = static_cast<Eigen::Index>(r - begin);
      const std::int64_t a = order[r] / p, b = order[r] % p;
      s.X(row, a) = 1.0;
      s.X(row, p + b) = 1.0;
      s.y(row) = static_cast<double>((a + b) % p);
    }
  };
  LabeledDataset ds;
  ds.task = Task::MultiClass;
  fill(ds.train, 0, static_cast<std::size_t>(n_train));
  fill(ds.test, static_cast<std::size_t>(n_train), static_cast<std::size_t>(total));
  ds.meta.generator = "modular_addition";
  ds.meta.p = p;
  ds.meta.n = n_train;
  ds.meta.train_fraction = train_fraction;
  ds.meta.seed = seed;
  return ds;
}

/// x uniform on {±1}^d, y = sign⟨w*, x⟩ with w* having k random ±1 entries on
/// a seed-dependent support.
inline LabeledDataset gen_sparse_linear(std::int64_t d, std::int64_t k, std::int64_t n_train, std::int64_t n_test,
                                        std::uint64_t seed) {
  require(d >= 1 && k >= 1 && k <= d, "sparse linear needs 1 <= k <= d");
  require(k % 2 == 1, "sparse linear needs odd k (even k allows zero labels)");
  require(n_train >= 1 && n_test >= 0, "sample counts must be positive");
  Rng rng = make_rng(seed, 2);
  Vec unpermuted = Vec::Zero(d);
  std::bernoulli_distribution coin(0.5);
  for (std::int64_t j = 0; j < k; ++j) unpermuted(j) = coin(rng) ? 1.0 : -1.0;
  const auto perm = detail::shuffled_indices(d, rng);
  Vec w = Vec::Zero(d);
  for (std::int64_t j = 0; j < d; ++j) w(perm[static_cast<std::size_t>(j)]) = unpermuted(j);

  LabeledDataset ds;
  ds.task = Task::BinaryClassification;
  ds.train.X = detail::rademacher(n_train, d, rng);
  ds.test.X = detail::rademacher(n_test, d, rng);
  ds.train.y = (ds.train.X * w).unaryExpr(&detail::sign_label);
  ds.test.y = (ds.test.X * w).unaryExpr(&detail::sign_label);
  ds.meta.generator = "sparse_linear";
  ds.meta.d = d;
  ds.meta.k = k;
  ds.meta.n = n_train;
  ds.meta.seed = seed;
  ds.meta.w_star = std::move(w);
  ds.meta.permutation = perm;
  return ds;
}

/// z ~ N(0, I_d), x = z + (γ/2)·sign⟨z, w*⟩·w*, y = sign⟨z, w*⟩ for a random unit w*.
inline LabeledDataset gen_margin_gaussian(std::int64_t d, std::int64_t n_train, double gamma, std::uint64_t seed,
                                          std::int64_t n_test = 0) {
  require(d >= 1 && n_train >= 1 && n_test >= 0, "margin gaussian needs d, n >= 1");
  require(gamma > 0 && std::isfinite(gamma), "gamma must be positive");
  Rng rng = make_rng(seed, 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec w(d);
  for (auto& v : w) v = normal(rng);
  w.normalize();

  auto sample = [&](Split& s, std::int64_t n) {
    s.X.resize(n, d);
    s.y.resize(n);
    Vec z(d);
    for (std::int64_t i = 0; i < n; ++i) {
      double proj = 0;
      do {
        for (auto& v : z) v = normal(rng);
        proj = z.dot(w);
      } while (proj == 0.0);
      const double y = proj > 0 ? 1.0 : -1.0;
      s.X.row(i) = (z + (0.5 * gamma * y) * w).transpose();
      s.y(i) = y;
    }
  };
  LabeledDataset ds;
  ds.task = Task::BinaryClassification;
  sample(ds.train, n_train);
  sample(ds.test, n_test);
  ds.meta.generator = "margin_gaussian";
  ds.meta.d = d;
  ds.meta.n = n_train;
  ds.meta.gamma = gamma;
  ds.meta.seed = seed;
  ds.meta.w_star = std::move(w);
  return ds;
}

/// X*_ij = i·j/d²; a uniformly random set Ω of round(fraction·d²) positions is
/// observed (train), the rest is test. Inputs are (i, j) index pairs.
inline LabeledDataset gen_multiplication_table(std::int64_t d, double observe_fraction, std::uint64_t seed) {
  require(d >= 1, "multiplication table needs d >= 1");
  require(observe_fraction > 0 && observe_fraction <= 1, "observe_fraction must lie in (0, 1]");
  const std::int64_t total = d * d;
  const std::int64_t n_obs = std::max<std::int64_t>(1, detail::rounded_count(observe_fraction, total));
  Rng rng = make_rng(seed, 4);
  const auto order = detail::shuffled_indices(total, rng);

  Mat target(d, d);
  const double scale = 1.0 / static_cast<double>(d * d);
  for (std::int64_t i = 0; i < d; ++i)
    for (std::int64_t j = 0; j < d; ++j) target(i, j) = static_cast<double>(i * j) * scale;

  auto fill = [&](Split& s, std::size_t begin, std::size_t end) {
    const auto n = static_cast<Eigen::Index>(end - begin);
    s.X.resize(n, 2);
    s.y.resize(n);
    for (std::size_t r = begin; r < end; ++r) {
      const auto row = static_cast<Eigen::Index>(r - begin);
      const std::int64_t i = order[r] / d, j = order[r] % d;
      s.X(row, 0) = static_cast<double>(i);
      s.X(row, 1) = static_cast<double>(j);
      s.y(row) = target(i, j);
    }
  };
  LabeledDataset ds;
  ds.task = Task::Regression;
  fill(ds.train, 0, static_cast<std::size_t>(n_obs));
  fill(ds.test, static_cast<std::size_t>(n_obs), static_cast<std::size_t>(total));
  ds.meta.generator = "multiplication_table";
  ds.meta.d = d;
  ds.meta.n = n_obs;
  ds.meta.observe_fraction = observe_fraction;
  ds.meta.seed = seed;
  ds.meta.target = std::move(target);
  return ds;
}

// ---- JSON ----

namespace detail {

inline nlohmann::json matrix_to_json(const Mat& M) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(M.size()));
  for (Eigen::Index r = 0; r < M.rows(); ++r)
    for (Eigen::Index c = 0; c < M.cols(); ++c) flat.push_back(M(r, c));
  return {{"rows", M.rows()}, {"cols", M.cols()}, {"data", std::move(flat)}};
}

inline Mat matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ConfigError("matrix data has the wrong length");
  Mat M(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) M(r, c) = data[k++].get<double>();
  return M;
}

inline nlohmann::json vector_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec vector_from_json(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace detail

inline nlohmann::json to_json(const LabeledDataset& ds) {
  using detail::matrix_to_json;
  using detail::vector_to_json;
  nlohmann::json meta = {{"generator", ds.meta.generator}, {"p", ds.meta.p},
                         {"d", ds.meta.d},                 {"k", ds.meta.k},
                         {"n", ds.meta.n},                 {"gamma", ds.meta.gamma},
                         {"observe_fraction", ds.meta.observe_fraction},
                         {"train_fraction", ds.meta.train_fraction},
                         {"seed", ds.meta.seed}};
  if (ds.meta.w_star.size()) meta["w_star"] = vector_to_json(ds.meta.w_star);
  if (!ds.meta.permutation.empty()) meta["permutation"] = ds.meta.permutation;
  if (ds.meta.target.size()) meta["target"] = matrix_to_json(ds.meta.target);
  return {{"task", to_string(ds.task)},
          {"meta", std::move(meta)},
          {"train", {{"X", matrix_to_json(ds.train.X)}, {"y", vector_to_json(ds.train.y)}}},
          {"test", {{"X", matrix_to_json(ds.test.X)}, {"y", vector_to_json(ds.test.y)}}}};
}

inline LabeledDataset dataset_from_json(const nlohmann::json& j) {
  try {
    LabeledDataset ds;
    ds.task = task_from_string(j.at("task").get<std::string>());
    const auto& m = j.at("meta");
    ds.meta.generator = m.value("generator", std::string{});
    ds.meta.p = m.value("p", std::int64_t{0});
    ds.meta.d = m.value("d", std::int64_t{0});
    ds.meta.k = m.value("k", std::int64_t{0});
    ds.meta.n = m.value("n", std::int64_t{0});
    ds.meta.gamma = m.value("gamma", 0.0);
    ds.meta.observe_fraction = m.value("observe_fraction", 0.0);
    ds.meta.train_fraction = m.value("train_fraction", 0.0);
    ds.meta.seed = m.value("seed", std::uint64_t{0});
    if (m.contains("w_star")) ds.meta.w_star = detail::vector_from_json(m["w_star"]);
    if (m.contains("permutation")) ds.meta.permutation = m["permutation"].get<std::vector<std::int64_t>>();
    if (m.contains("target")) ds.meta.target = detail::matrix_from_json(m["target"]);
    for (auto [name, split] : {std::pair{"train", &ds.train}, std::pair{"test", &ds.test}}) {
      split->X = detail::matrix_from_json(j.at(name).at("X"));
      split->y = detail::vector_from_json(j.at(name).at("y"));
      if (split->y.size() != split->X.rows()) throw ConfigError(std::string(name) + ": X and y disagree in length");
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset JSON: ") + e.what());
  }
}

}  // namespace grokking

#pragma once

// Rich-regime reference problems: L¹/L² max-margin linear classifiers,
// minimum-nuclear-norm symmetric completion, and the margin-based
// generalization bounds.

#include "grokking/data.hpp"
#include "grokking/ntk.hpp"
#include "grokking/simplex.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace grokking {

enum class NormKind { L1, L2 };

inline std::string to_string(NormKind k) { return k == NormKind::L1 ? "l1" : "l2"; }

struct LinearMaxMargin {
  Vec w;  // minimum-norm solution of y_i⟨w, x_i⟩ ≥ 1
  NormKind norm_kind = NormKind::L2;
  double margin = 0.0;  // min_i y_i⟨w, x_i⟩ / ‖w‖
  std::vector<Eigen::Index> support_set;  // samples with active margin constraints
  LpResult lp;                            // L¹ only

  Vec direction() const {
    return norm_kind == NormKind::L1 ? Vec(w / w.lpNorm<1>()) : Vec(w.normalized());
  }
};

struct CompletionSolution {
  Mat W;
  double nuclear_norm = 0.0;
  double feasibility_residual = 0.0;
  double tau = 0.0;             // regularization weight of the final stage
  double matched_lambda = 0.0;  // 4τ/n: the weight decay whose optimality condition W satisfies
  std::int64_t iterations = 0;
  std::vector<double> stage_nuclear_norms;
  std::vector<double> stage_residuals;
};

struct NuclearOptions {
  double feasibility_tol = 1e-7;
  double nuclear_rel_tol = 1e-6;
  double inner_tol = 1e-13;
  std::int64_t max_inner = 200'000;
  int max_stages = 80;
  std::int64_t max_dim = 200;
};

namespace detail {

inline std::vector<Eigen::Index> active_samples(const Mat& X, const Vec& y, const Vec& w, double tol = 1e-7) {
  std::vector<Eigen::Index> out;
  const Vec m = y.cwiseProduct(X * w);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (m(i) <= 1.0 + tol) out.push_back(i);
  return out;
}

inline void require_binary(const LabeledDataset& ds) {
  require(ds.task == Task::BinaryClassification, "max-margin solvers need a binary dataset");
  require(ds.train.size() > 0, "max-margin solvers need data");
}

}  // namespace detail

/// Hard-margin SVM on raw inputs (dual coordinate ascent, linear kernel).
inline LinearMaxMargin solve_l2_max_margin(const LabeledDataset& ds, const SvmOptions& opt = {}) {
  detail::require_binary(ds);
  const MarginSolution sol = solve_kernel_svm(linear_kernel_system(ds), opt);
  LinearMaxMargin out;
  out.norm_kind = NormKind::L2;
  out.w = sol.h;
  out.margin = (ds.train.y.cwiseProduct(ds.train.X * out.w)).minCoeff() / out.w.norm();
  out.support_set = detail::active_samples(ds.train.X, ds.train.y, out.w);
  return out;
}

/// min ‖w‖₁ s.t. y_i⟨w, x_i⟩ ≥ 1 as an LP over (w⁺, w⁻, slack) ≥ 0.
inline LinearMaxMargin solve_l1_max_margin(const LabeledDataset& ds, const LpOptions& opt = {}) {
  detail::require_binary(ds);
  const Eigen::Index n = ds.train.size(), d = ds.train.X.cols();
  Mat A = Mat::Zero(n, 2 * d + n);
  const Mat YX = ds.train.y.asDiagonal() * ds.train.X;
  A.leftCols(d) = YX;
  A.middleCols(d, d) = -YX;
  A.rightCols(n) = -Mat::Identity(n, n);
  Vec c = Vec::Zero(2 * d + n);
  c.head(2 * d).setOnes();
  LinearMaxMargin out;
  out.lp = solve_lp(A, Vec::Ones(n), c, opt);
  out.norm_kind = NormKind::L1;
  out.w = out.lp.x.head(d) - out.lp.x.segment(d, d);
  out.margin = (ds.train.y.cwiseProduct(ds.train.X * out.w)).minCoeff() / out.w.lpNorm<1>();
  out.support_set = detail::active_samples(ds.train.X, ds.train.y, out.w);
  return out;
}

namespace detail {

struct Observations {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> idx;
  Vec y;
};

inline Observations observations(const LabeledDataset& ds, Eigen::Index d) {
  Observations o;
  o.y = ds.train.y;
  for (Eigen::Index r = 0; r < ds.train.size(); ++r) {
    const double a = ds.train.X(r, 0), b = ds.train.X(r, 1);
    require(a >= 0 && b >= 0 && a < static_cast<double>(d) && b < static_cast<double>(d) && a == std::floor(a) &&
                b == std::floor(b),
            "completion inputs must be index pairs in [0, d)");
    o.idx.emplace_back(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
  }
  return o;
}

/// ⟨P_k, W⟩ − y_k with P_k = ½(e_i e_jᵀ + e_j e_iᵀ).
inline Vec completion_residuals(const Observations& o, const Mat& W) {
  Vec r(o.y.size());
  for (std::size_t k = 0; k < o.idx.size(); ++k) {
    const auto [i, j] = o.idx[k];
    r(static_cast<Eigen::Index>(k)) = 0.5 * (W(i, j) + W(j, i)) - o.y(static_cast<Eigen::Index>(k));
  }
  return r;
}

/// Σ_k c_k P_k.
inline Mat adjoint(const Observations& o, const Vec& c, Eigen::Index d) {
  Mat S = Mat::Zero(d, d);
  for (std::size_t k = 0; k < o.idx.size(); ++k) {
    const auto [i, j] = o.idx[k];
    const double v = 0.5 * c(static_cast<Eigen::Index>(k));
    S(i, j) += v;
    S(j, i) += v;
  }
  return S;
}

/// Largest eigenvalue of the normal operator W ↦ Σ_k ⟨P_k, W⟩ P_k on symmetric
/// matrices: diagonal cells count observations, off-diagonal cells count half.
inline double normal_operator_norm(const Observations& o, Eigen::Index d) {
  Mat count = Mat::Zero(d, d);
  for (const auto& [i, j] : o.idx) {
    count(std::min(i, j), std::max(i, j)) += 1.0;
  }
  double best = 0.0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i; j < d; ++j) best = std::max(best, i == j ? count(i, j) : 0.5 * count(i, j));
  return best;
}

/// Soft-thresholds the eigenvalues of a symmetric matrix by τ (the proximal map
/// of τ‖·‖_* restricted to symmetric matrices). Returns an exactly symmetric matrix.
inline Mat symmetric_shrink(const Mat& Y, double tau) {
  Eigen::SelfAdjointEigenSolver<Mat> es(Y);
  Vec ev = es.eigenvalues();
  for (auto& v : ev) v = v > tau ? v - tau : (v < -tau ? v + tau : 0.0);
  Mat W = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (W + W.transpose());
}

inline double nuclear_norm_symmetric(const Mat& W) {
  return Eigen::SelfAdjointEigenSolver<Mat>(W, Eigen::EigenvaluesOnly).eigenvalues().cwiseAbs().sum();
}

}  // namespace detail

/// FISTA on ½Σ_k(⟨P_k, W⟩ − y_k)² + τ‖W‖_* over symmetric W, warm-started from W0.
inline Mat solve_nuclear_regularized(const LabeledDataset& ds, Eigen::Index d, double tau, const Mat& W0,
                                     std::int64_t& iterations, const NuclearOptions& opt = {}) {
  const auto obs = detail::observations(ds, d);
  const double step = 1.0 / std::max(detail::normal_operator_norm(obs, d), 1e-300);
  Mat W = W0, Wprev = W0, Y = W0;
  double t = 1.0;
  for (std::int64_t it = 0; it < opt.max_inner; ++it) {
    ++iterations;
    const Mat G = detail::adjoint(obs, detail::completion_residuals(obs, Y), d);
    Wprev = W;
    W = detail::symmetric_shrink(Y - step * G, step * tau);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double change = (W - Wprev).norm();
    // restart the momentum when it stops helping
    if ((Y - W).cwiseProduct(W - Wprev).sum() > 0) {
      Y = W;
      t = 1.0;
    } else {
      Y = W + ((t - 1.0) / tn) * (W - Wprev);
      t = tn;
    }
    if (change <= opt.inner_tol * std::max(1.0, W.norm())) break;
  }
  return W;
}

/// min ‖W‖_* s.t. W = Wᵀ, ⟨P_k, W⟩ = y_k, via the regularized path with τ halved
/// each stage from ‖y‖.
inline CompletionSolution solve_min_nuclear(const LabeledDataset& ds, Eigen::Index d, const NuclearOptions& opt = {}) {
  require(ds.task == Task::Regression, "nuclear completion needs a regression dataset");
  require(d >= 1 && d <= opt.max_dim, "matrix dimension exceeds the desk-scale cap");
  require(ds.train.size() > 0, "nuclear completion needs observations");
  const auto obs = detail::observations(ds, d);
  CompletionSolution sol;
  sol.W = Mat::Zero(d, d);
  double tau = ds.train.y.norm();
  if (tau == 0.0) {
    sol.tau = 0.0;
    return sol;
  }
  for (int stage = 0; stage < opt.max_stages; ++stage) {
    tau *= 0.5;
    sol.W = solve_nuclear_regularized(ds, d, tau, sol.W, sol.iterations, opt);
    sol.tau = tau;
    sol.feasibility_residual = detail::completion_residuals(obs, sol.W).cwiseAbs().maxCoeff();
    sol.nuclear_norm = detail::nuclear_norm_symmetric(sol.W);
    const bool stable = !sol.stage_nuclear_norms.empty() &&
                        std::abs(sol.nuclear_norm - sol.stage_nuclear_norms.back()) <=
                            opt.nuclear_rel_tol * std::max(sol.nuclear_norm, 1e-300);
    sol.stage_nuclear_norms.push_back(sol.nuclear_norm);
    sol.stage_residuals.push_back(sol.feasibility_residual);
    if (sol.feasibility_residual <= opt.feasibility_tol && stable) {
      sol.matched_lambda = 4.0 * tau / static_cast<double>(ds.train.size());
      return sol;
    }
  }
  throw NumericalError("nuclear-norm continuation did not reach feasibility", sol.feasibility_residual);
}

/// Margin-based generalization bounds for the L¹ (k-sparse) and L² predictors.
inline double generalization_bound(double k, double d, double n, double delta, NormKind norm) {
  require(k > 0 && d > 0 && n > 0, "bound arguments must be positive");
  require(delta > 0 && delta < 1, "delta must lie in (0, 1)");
  const double confidence = 3.0 * std::sqrt(std::log(2.0 / delta) / (2.0 * n));
  if (norm == NormKind::L1) return 4.0 * k * std::sqrt(2.0 * std::log(2.0 * d) / n) + confidence;
  return 4.0 * std::sqrt(k * d / n) + confidence;
}

}  // namespace grokking

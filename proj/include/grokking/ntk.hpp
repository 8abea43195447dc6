#pragma once

// Linearization at θ̄_init: NTK features, the kernel SVM and minimum-norm
// kernel regression, and the early-phase alignment diagnostic.

#include "grokking/data.hpp"
#include "grokking/model.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

namespace grokking {

struct KernelSystem {
  Mat features;  // n × D, row i = ∇f(θ̄_init; x_i)
  Mat gram;      // K = ΦΦᵀ
  Vec labels;
  Task task = Task::BinaryClassification;
  double nu_ntk = std::numeric_limits<double>::quiet_NaN();     // λ_min(K)
  double gamma_ntk = std::numeric_limits<double>::quiet_NaN();  // filled from the SVM solution
};

struct MarginSolution {
  Vec h;
  Vec coefficients;  // h = Φᵀ coefficients
  Vec dual;          // SVM multipliers (classification only)
  double margin_or_residual = 0.0;
  std::int64_t iterations = 0;
  bool converged = false;
};

struct SvmOptions {
  double tolerance = 1e-9;
  std::int64_t max_sweeps = 1'000'000;
};

namespace detail {

inline KernelSystem make_system(Mat features, Vec labels, Task task) {
  KernelSystem s;
  s.gram = features * features.transpose();
  s.gram = 0.5 * (s.gram + s.gram.transpose()).eval();
  s.features = std::move(features);
  s.labels = std::move(labels);
  s.task = task;
  if (s.gram.rows() > 0)
    s.nu_ntk = Eigen::SelfAdjointEigenSolver<Mat>(s.gram, Eigen::EigenvaluesOnly).eigenvalues()(0);
  return s;
}

/// Hard-margin SVM dual max Σa − ½aᵀQa, a ≥ 0, Q_ij = y_i y_j K_ij, by cyclic
/// exact coordinate ascent. Returns the multipliers.
inline Vec svm_dual(const Mat& K, const Vec& y, const SvmOptions& opt, std::int64_t& sweeps, bool& converged) {
  const Eigen::Index n = K.rows();
  const Mat Q = y.asDiagonal() * K * y.asDiagonal();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(Q(i, i) > 0)) throw InfeasibleError("sample " + std::to_string(i) + " has a zero feature vector");
  Vec a = Vec::Zero(n);
  Vec Qa = Vec::Zero(n);  // margins y_i⟨g_i, h⟩
  converged = false;
  for (sweeps = 0; sweeps < opt.max_sweeps; ++sweeps) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double next = std::max(0.0, a(i) + (1.0 - Qa(i)) / Q(i, i));
      const double delta = next - a(i);
      if (delta != 0.0) {
        Qa.noalias() += delta * Q.col(i);
        a(i) = next;
      }
    }
    double violation = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      violation = std::max(violation, a(i) > 0 ? std::abs(1.0 - Qa(i)) : std::max(0.0, 1.0 - Qa(i)));
    if (violation < opt.tolerance) {
      converged = true;
      ++sweeps;
      break;
    }
    if (!std::isfinite(a.sum()) || a.sum() > 1e15) break;
  }
  if (!converged) {
    // a bounded iterate whose margins are all positive still certifies separability
    if (!(Qa.minCoeff() > 0) || !a.allFinite()) throw InfeasibleError("data are not separable by the given features");
  }
  return a;
}

}  // namespace detail

/// Features at θ̄_init for every training input (scalar output 0).
inline KernelSystem build_kernel_system(const HomogeneousModel& model, const ParamVector& base,
                                        const LabeledDataset& ds) {
  require(ds.train.size() > 0, "kernel system needs a nonempty training set");
  require(model.output_dim() == 1, "kernel system needs a scalar-output model");
  require(ds.task != Task::MultiClass, "kernel system needs a binary or regression task");
  KernelSystem s = detail::make_system(jacobian(model, base, ds.train.X), ds.train.y, ds.task);
  if (ds.task == Task::Regression) {
    const double lmax = Eigen::SelfAdjointEigenSolver<Mat>(s.gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
    if (!(s.nu_ntk > 1e-12 * std::max(lmax, 1e-300)))
      throw NumericalError("NTK features are linearly dependent on the training set", s.nu_ntk);
  }
  return s;
}

/// Kernel system for raw inputs (linear kernel); used by the L² max-margin solver.
inline KernelSystem linear_kernel_system(const LabeledDataset& ds) {
  require(ds.train.size() > 0, "kernel system needs a nonempty training set");
  return detail::make_system(ds.train.X, ds.train.y, ds.task);
}

/// min ½‖h‖² s.t. y_i⟨g_i, h⟩ ≥ 1; margin_or_residual is γ_ntk = 1/‖h‖.
inline MarginSolution solve_kernel_svm(const KernelSystem& system, const SvmOptions& opt = {}) {
  require(system.task == Task::BinaryClassification, "kernel SVM needs a binary task");
  require(system.gram.rows() > 0, "kernel SVM needs data");
  for (Eigen::Index i = 0; i < system.labels.size(); ++i)
    require(system.labels(i) == 1.0 || system.labels(i) == -1.0, "kernel SVM labels must be ±1");
  MarginSolution sol;
  sol.dual = detail::svm_dual(system.gram, system.labels, opt, sol.iterations, sol.converged);
  sol.coefficients = sol.dual.cwiseProduct(system.labels);
  sol.h = system.features.transpose() * sol.coefficients;
  sol.margin_or_residual = 1.0 / sol.h.norm();
  return sol;
}

/// Minimum-norm interpolant h = Φᵀ K⁻¹ y; margin_or_residual is ‖Φh − y‖∞.
inline MarginSolution solve_kernel_regression(const KernelSystem& system) {
  require(system.gram.rows() > 0, "kernel regression needs data");
  const Eigen::Index n = system.gram.rows();
  Eigen::LLT<Mat> llt(system.gram);
  Mat K = system.gram;
  if (llt.info() != Eigen::Success) {
    K.diagonal().array() += 1e-12 * system.gram.trace() / static_cast<double>(n);
    llt.compute(K);
    if (llt.info() != Eigen::Success) throw NumericalError("kernel matrix is not positive definite", system.nu_ntk);
  }
  const Vec ev = Eigen::SelfAdjointEigenSolver<Mat>(K, Eigen::EigenvaluesOnly).eigenvalues();
  const double cond = ev(0) > 0 ? ev(n - 1) / ev(0) : std::numeric_limits<double>::infinity();
  if (cond > 1e12) throw NumericalError("kernel matrix is ill-conditioned", cond);
  MarginSolution sol;
  sol.coefficients = llt.solve(system.labels);
  sol.h = system.features.transpose() * sol.coefficients;
  sol.margin_or_residual = (system.features * sol.h - system.labels).cwiseAbs().maxCoeff();
  sol.converged = true;
  sol.iterations = 1;
  return sol;
}

/// ⟨∇f(θ̄_init; x), h⟩.
inline double kernel_predict(const HomogeneousModel& model, const ParamVector& base, const Vec& h,
                             const Eigen::Ref<const Vec>& x) {
  return grad(model, base, x).values.dot(h);
}

struct Alignment {
  double max_deviation = 0.0;  // over the probe set
  double cosine = 0.0;         // between h(t) and h*
};

/// Compares θ(t) with the kernel predictor. For classification the network
/// output is divided by Z(α) = (1/γ_ntk)·log(α^c/λ), c = 1 − λt/log α, and
/// compared with the unit-margin-normalized predictor ⟨g(x), γ_ntk·h*⟩; for
/// regression outputs are compared directly with ⟨g(x), h*⟩. The cosine uses
/// h(t) = α^L e^{−Lλt}((e^{λt}/α)θ(t) − θ̄_init).
inline Alignment kernel_alignment(const HomogeneousModel& model, const ParamVector& theta_t, const ParamVector& base,
                                  double alpha, double lambda, double t, const KernelSystem& system,
                                  const Vec& h_star, const Eigen::Ref<const Mat>& probes) {
  require(alpha > 1 && lambda > 0 && t >= 0, "alignment needs alpha > 1, lambda > 0, t >= 0");
  const int L = model.degree();
  Alignment out;
  const Vec ht = std::pow(alpha, L) * std::exp(-L * lambda * t) *
                 (std::exp(lambda * t) / alpha * theta_t.values - base.values);
  const double denom = ht.norm() * h_star.norm();
  out.cosine = denom > 0 ? ht.dot(h_star) / denom : 0.0;
  if (probes.rows() == 0) return out;
  const Vec f = forward_batch(model, theta_t, probes).col(0);
  const Mat G = jacobian(model, base, probes);
  Vec target = G * h_star;
  Vec scaled = f;
  if (system.task == Task::BinaryClassification) {
    const double gamma = 1.0 / h_star.norm();
    const double c = 1.0 - lambda * t / std::log(alpha);
    const double Z = std::log(std::pow(alpha, c) / lambda) / gamma;
    scaled /= Z;
    target *= gamma;
  }
  out.max_deviation = (scaled - target).cwiseAbs().maxCoeff();
  return out;
}

}  // namespace grokking

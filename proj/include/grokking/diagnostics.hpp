#pragma once

// Optimality certificates, loss-bound curves and transition detection.

#include "grokking/nnls.hpp"
#include "grokking/ref_solvers.hpp"
#include "grokking/trainer.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace grokking {

enum class CertificateKind { KktR1, KktR2, NuclearSubgrad };

inline std::string to_string(CertificateKind k) {
  switch (k) {
    case CertificateKind::KktR1: return "r1";
    case CertificateKind::KktR2: return "r2";
    case CertificateKind::NuclearSubgrad: return "nuclear";
  }
  return "?";
}

struct Certificate {
  CertificateKind kind = CertificateKind::KktR1;
  std::map<std::string, double> residuals;
  double tolerance = 0.0;
  bool passed = false;
  std::optional<Vec> multipliers;

  double residual(const std::string& name) const { return residuals.at(name); }

  void finalize() {
    passed = !residuals.empty();
    for (const auto& [name, value] : residuals) passed = passed && value <= tolerance;
  }
};

// ---- F_LL ----

/// x·log x on [1, ∞).
inline double f_ll(double x) {
  require(x >= 1.0, "f_ll is defined on [1, inf)");
  return x * std::log(x);
}

/// Inverse of f_ll on [0, ∞) → [1, ∞), by safeguarded Newton.
inline double f_ll_inv(double y) {
  require(y >= 0.0 && std::isfinite(y), "f_ll_inv is defined on [0, inf)");
  if (y == 0.0) return 1.0;
  double lo = 1.0, hi = std::max(2.0, 2.0 * y);
  while (f_ll(hi) < y) hi *= 2.0;
  double x = y > 1 ? y / std::log(y) : 1.0 + y;
  x = std::clamp(x, lo, hi);
  for (int it = 0; it < 200; ++it) {
    const double g = x * std::log(x) - y;
    if (g > 0) hi = x; else lo = x;
    double next = x - g / (std::log(x) + 1.0);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-15 * x) return next;
    x = next;
    if (hi - lo <= 1e-15 * hi) break;
  }
  return x;
}

// ---- loss bounds ----

enum class BoundKind { Classification, Regression };

struct BoundCurve {
  BoundKind kind = BoundKind::Classification;
  std::vector<double> times;
  std::vector<double> values;
};

/// Exponential-loss bound in the kernel regime, with A = α^{2(L−1)}/λ:
/// max{ 1/(1 + γ²A(1−e^{−2(L−1)λt})/(16(L−1))), e^{2(L−1)λt}/(F_LL⁻¹(γ²A/(8L)) − 1) }.
inline double loss_upper_bound_classification(double alpha, double lambda, int L, double gamma, double t) {
  require(alpha > 0 && lambda > 0 && gamma > 0, "bound parameters must be positive");
  require(L >= 2 && t >= 0, "bound needs L >= 2 and t >= 0");
  const double A = std::pow(alpha, 2.0 * (L - 1)) / lambda;
  const double decay = -std::expm1(-2.0 * (L - 1) * lambda * t);
  const double first = 1.0 / (1.0 + gamma * gamma / (16.0 * (L - 1)) * A * decay);
  const double second = std::exp(2.0 * (L - 1) * lambda * t) / (f_ll_inv(gamma * gamma * A / (8.0 * L)) - 1.0);
  return std::max(first, second);
}

/// Squared-loss analogue:
/// max{ ‖y‖²/n·exp(−νA(1−e^{−2(L−1)λt})/(8n(L−1))), 16nL²‖y‖²λ²e^{4(L−1)λt}/(ν²α^{4(L−1)}) }.
inline double loss_upper_bound_regression(double alpha, double lambda, int L, double nu, std::int64_t n,
                                          double y_sq_norm, double t) {
  require(alpha > 0 && lambda > 0 && nu > 0 && n > 0, "bound parameters must be positive");
  require(L >= 2 && t >= 0 && y_sq_norm >= 0, "bound needs L >= 2, t >= 0");
  const double nn = static_cast<double>(n);
  const double A = std::pow(alpha, 2.0 * (L - 1)) / lambda;
  const double decay = -std::expm1(-2.0 * (L - 1) * lambda * t);
  const double first = y_sq_norm / nn * std::exp(-nu * A * decay / (8.0 * nn * (L - 1)));
  const double second = 16.0 * nn * L * L * y_sq_norm * lambda * lambda * std::exp(4.0 * (L - 1) * lambda * t) /
                        (nu * nu * std::pow(alpha, 4.0 * (L - 1)));
  return std::max(first, second);
}

/// Dispatches on the bound kind; `y_sq_norm` is only used for regression.
inline double loss_upper_bound(BoundKind kind, double alpha, double lambda, int L, double gamma_or_nu,
                               std::int64_t n, double t, double y_sq_norm = 0.0) {
  return kind == BoundKind::Classification
             ? loss_upper_bound_classification(alpha, lambda, L, gamma_or_nu, t)
             : loss_upper_bound_regression(alpha, lambda, L, gamma_or_nu, n, y_sq_norm, t);
}

inline BoundCurve bound_curve(BoundKind kind, double alpha, double lambda, int L, double gamma_or_nu,
                              std::int64_t n, const std::vector<double>& times, double y_sq_norm = 0.0) {
  BoundCurve c;
  c.kind = kind;
  c.times = times;
  for (double t : times) c.values.push_back(loss_upper_bound(kind, alpha, lambda, L, gamma_or_nu, n, t, y_sq_norm));
  return c;
}

// ---- certificates ----

/// First-order conditions of min ½‖θ‖² s.t. y_i f_i(θ) ≥ 1 at θ rescaled to
/// min margin 1; multipliers fitted by nonnegative least squares on the
/// stationarity and complementarity residuals together.
inline Certificate kkt_residual_r1(const HomogeneousModel& model, const ParamVector& theta, const LabeledDataset& ds,
                                   double tolerance = 1e-6) {
  require(ds.task == Task::BinaryClassification && model.output_dim() == 1, "R1 certificate needs a binary task");
  require(ds.train.size() > 0, "R1 certificate needs data");
  Certificate cert;
  cert.kind = CertificateKind::KktR1;
  cert.tolerance = tolerance;
  const Vec& y = ds.train.y;
  const double m = y.cwiseProduct(forward_batch(model, theta, ds.train.X).col(0)).minCoeff();
  if (!(m > 0)) {
    cert.residuals["feasibility"] = std::isfinite(m) ? 1.0 - m : std::numeric_limits<double>::infinity();
    cert.finalize();
    return cert;
  }
  const ParamVector scaled(theta.values / std::pow(m, 1.0 / model.degree()), theta.model_id);
  const Vec margins = y.cwiseProduct(forward_batch(model, scaled, ds.train.X).col(0));
  const Mat A = jacobian(model, scaled, ds.train.X).transpose() * y.asDiagonal();  // D × n
  const double norm = scaled.values.norm();
  // extra rows ‖θ̂‖·(margin_i − 1)·μ_i steer the fit toward multipliers on active samples
  Mat A_aug(A.rows() + A.cols(), A.cols());
  A_aug << A, (norm * (margins.array() - 1.0)).matrix().asDiagonal().toDenseMatrix();
  Vec b_aug = Vec::Zero(A_aug.rows());
  b_aug.head(A.rows()) = scaled.values;
  const NnlsResult fit = nnls(A_aug, b_aug);
  const double stat = (A * fit.x - scaled.values).norm();
  cert.residuals["stationarity"] = norm > 0 ? stat / norm : stat;
  cert.residuals["complementarity"] = std::max(0.0, (fit.x.array() * (margins.array() - 1.0)).maxCoeff());
  cert.residuals["feasibility"] = std::max(0.0, 1.0 - margins.minCoeff());
  cert.multipliers = fit.x;
  cert.finalize();
  return cert;
}

/// Stationarity of the regularized squared loss and interpolation error.
inline Certificate kkt_residual_r2(const HomogeneousModel& model, const ParamVector& theta, const LabeledDataset& ds,
                                   double lambda, double tolerance = 1e-6) {
  require(model.output_dim() == 1, "R2 certificate needs a scalar-output model");
  Certificate cert;
  cert.kind = CertificateKind::KktR2;
  cert.tolerance = tolerance;
  const LossGrad lg = loss_and_grad(model, theta, ds, LossKind::Squared, lambda);
  cert.residuals["stationarity"] = lg.grad.norm() / std::max(1.0, theta.values.norm());
  cert.residuals["interpolation"] =
      ds.train.size() ? (lg.outputs.col(0) - ds.train.y).cwiseAbs().maxCoeff() : 0.0;
  cert.finalize();
  return cert;
}

/// Checks 0 ∈ (2/n)Σ_i(⟨P_i, W⟩ − y_i)P_i + (λ/2)∂‖W‖_* for symmetric W. With
/// G = −(2/λ)M and W = LΣRᵀ, E = G − LRᵀ must satisfy LᵀE = 0, ER = 0, ‖E‖₂ ≤ 1.
inline Certificate nuclear_subgrad_certificate(const Mat& W, const LabeledDataset& ds, double lambda,
                                               double tolerance = 1e-4, double rank_tol = 1e-8) {
  require(W.rows() == W.cols(), "W must be square");
  require((W - W.transpose()).norm() <= 1e-12 * std::max(1.0, W.norm()), "W must be symmetric");
  require(lambda > 0, "lambda must be positive");
  require(ds.train.size() > 0, "nuclear certificate needs observations");
  const Eigen::Index d = W.rows();
  const auto obs = detail::observations(ds, d);
  const double n = static_cast<double>(ds.train.size());
  const Mat M = (2.0 / n) * detail::adjoint(obs, detail::completion_residuals(obs, W), d);
  const Mat G = -(2.0 / lambda) * M;

  Eigen::SelfAdjointEigenSolver<Mat> es(W);
  const Vec ev = es.eigenvalues();
  const double smax = ev.cwiseAbs().maxCoeff();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < d; ++k)
    if (smax > 0 && std::abs(ev(k)) > rank_tol * smax) keep.push_back(k);
  const auto r = static_cast<Eigen::Index>(keep.size());
  Mat Lf(d, r), Rf(d, r);
  for (Eigen::Index c = 0; c < r; ++c) {
    Lf.col(c) = es.eigenvectors().col(keep[static_cast<std::size_t>(c)]);
    Rf.col(c) = Lf.col(c) * (ev(keep[static_cast<std::size_t>(c)]) > 0 ? 1.0 : -1.0);
  }
  const Mat E = G - Lf * Rf.transpose();
  const Mat Pl = Mat::Identity(d, d) - Lf * Lf.transpose();
  const Mat Pr = Mat::Identity(d, d) - Rf * Rf.transpose();
  const Mat E_proj = Pl * E * Pr;
  const double spectral = E_proj.size() ? Eigen::JacobiSVD<Mat>(E_proj).singularValues()(0) : 0.0;

  Certificate cert;
  cert.kind = CertificateKind::NuclearSubgrad;
  cert.tolerance = tolerance;
  cert.residuals["left_orthogonality"] = (Lf.transpose() * E).norm();
  cert.residuals["right_orthogonality"] = (E * Rf).norm();
  cert.residuals["spectral_excess"] = std::max(0.0, spectral - 1.0);
  cert.residuals["consistency"] = (G - Lf * Rf.transpose() - E_proj).norm();
  cert.finalize();
  return cert;
}

// ---- transitions ----

struct Transition {
  double t_star = 0.0;  // first time the metric reaches `high`
  double t_low = 0.0;   // last time at or below `low` before t_star
  double sharpness = 0.0;
};

inline std::optional<Transition> detect_transition(const std::vector<double>& times, const std::vector<double>& values,
                                                   double low, double high) {
  require(times.size() == values.size(), "times and values differ in length");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(values[i] >= high)) continue;
    Transition tr;
    tr.t_star = times[i];
    tr.t_low = times.empty() ? 0.0 : times[0];
    for (std::size_t j = i; j-- > 0;)
      if (values[j] <= low) {
        tr.t_low = times[j];
        break;
      }
    tr.sharpness = tr.t_star > 0 ? (tr.t_star - tr.t_low) / tr.t_star : 0.0;
    return tr;
  }
  return std::nullopt;
}

inline double metric_value(const TrajectoryRow& r, const std::string& metric) {
  if (metric == "train_loss") return r.train_loss;
  if (metric == "reg_loss") return r.reg_loss;
  if (metric == "train_acc") return r.train_acc;
  if (metric == "test_acc") return r.test_acc;
  if (metric == "test_loss") return r.test_loss;
  if (metric == "param_norm") return r.param_norm;
  if (metric == "dir_dist") return r.dir_dist;
  if (metric == "min_margin") return r.min_margin;
  throw ConfigError("unknown metric '" + metric + "'");
}

inline std::optional<Transition> detect_transition(const TrajectoryLog& log, const std::string& metric, double low,
                                                   double high) {
  std::vector<double> times, values;
  for (const auto& r : log.rows) {
    times.push_back(r.time);
    values.push_back(metric_value(r, metric));
  }
  return detect_transition(times, values, low, high);
}

/// √(λ‖X*‖_*)·μ²·log d.
inline double recovery_error_bound(double lambda, double nuclear_norm_target, double mu, double d) {
  require(lambda >= 0 && nuclear_norm_target >= 0 && mu > 0 && d >= 1, "recovery bound arguments out of range");
  return std::sqrt(lambda * nuclear_norm_target) * mu * mu * std::log(d);
}

}  // namespace grokking

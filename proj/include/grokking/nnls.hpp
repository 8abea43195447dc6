#pragma once

// Lawson–Hanson active-set nonnegative least squares: min ‖Ax − b‖ s.t. x ≥ 0.

#include "grokking/core.hpp"

#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace grokking {

struct NnlsResult {
  Vec x;
  double residual_norm = 0.0;
  std::int64_t iterations = 0;
  bool converged = false;
};

inline NnlsResult nnls(const Mat& A, const Vec& b, std::int64_t max_iter = 0) {
  const Eigen::Index m = A.rows(), n = A.cols();
  require(b.size() == m, "nnls: dimensions disagree");
  if (max_iter <= 0) max_iter = 3 * n + 10;
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() * A.cwiseAbs().colwise().sum().maxCoeff() *
                     static_cast<double>(std::max(m, n));
  NnlsResult r;
  r.x = Vec::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);

  auto solve_passive = [&]() {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < n; ++j)
      if (passive[static_cast<std::size_t>(j)]) cols.push_back(j);
    Mat Ap(m, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) Ap.col(static_cast<Eigen::Index>(k)) = A.col(cols[k]);
    const Vec zp = Ap.colPivHouseholderQr().solve(b);
    Vec z = Vec::Zero(n);
    for (std::size_t k = 0; k < cols.size(); ++k) z(cols[k]) = zp(static_cast<Eigen::Index>(k));
    return z;
  };

  Vec w = A.transpose() * (b - A * r.x);
  while (r.iterations < max_iter) {
    Eigen::Index enter = -1;
    double best = tol;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[static_cast<std::size_t>(j)] && w(j) > best) {
        best = w(j);
        enter = j;
      }
    if (enter < 0) {
      r.converged = true;
      break;
    }
    ++r.iterations;
    passive[static_cast<std::size_t>(enter)] = true;
    Vec z = solve_passive();
    while (true) {
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0) feasible = false;
      if (feasible) break;
      double alpha = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0) alpha = std::min(alpha, r.x(j) / (r.x(j) - z(j)));
      r.x += alpha * (z - r.x);
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && r.x(j) <= tol) {
          passive[static_cast<std::size_t>(j)] = false;
          r.x(j) = 0.0;
        }
      z = solve_passive();
    }
    r.x = z;
    w = A.transpose() * (b - A * r.x);
  }
  r.residual_norm = (A * r.x - b).norm();
  return r;
}

}  // namespace grokking

#pragma once

// Dense two-phase tableau simplex (Dantzig pricing, Bland's rule on stalls) for
//   min cᵀx  s.t.  Ax = b, x ≥ 0.

#include "grokking/core.hpp"

#include <Eigen/LU>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace grokking {

struct LpResult {
  Vec x;
  double objective = 0.0;
  Vec duals;           // y with Bᵀy = c_B
  Vec reduced_costs;   // c − Aᵀy, ≥ 0 at optimality
  std::vector<Eigen::Index> basis;
  std::int64_t pivots = 0;
};

struct LpOptions {
  double pivot_tol = 1e-9;
  double feasibility_tol = 1e-9;
  std::int64_t max_pivots = 1'000'000;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tableau {
 public:
  // rows 0..m-1 constraints, row m objective; column `cols` is the working rhs
  // (possibly perturbed), column `cols + 1` carries the original rhs through the same pivots
  Tableau(Eigen::Index m, Eigen::Index cols) : T_(RowMat::Zero(m + 1, cols + 2)), m_(m), cols_(cols), basis_(m) {}

  RowMat& data() { return T_; }
  std::vector<Eigen::Index>& basis() { return basis_; }
  Eigen::Index rhs_col() const { return cols_; }
  Eigen::Index orig_col() const { return cols_ + 1; }
  double rhs(Eigen::Index r) const { return T_(r, cols_); }
  double objective() const { return -T_(m_, cols_); }
  double original_objective() const { return -T_(m_, cols_ + 1); }

  void pivot(Eigen::Index row, Eigen::Index col) {
    T_.row(row) /= T_(row, col);
    for (Eigen::Index r = 0; r <= m_; ++r) {
      if (r == row) continue;
      const double f = T_(r, col);
      if (f != 0.0) T_.row(r) -= f * T_.row(row);
    }
    basis_[static_cast<std::size_t>(row)] = col;
  }

  /// Dantzig pricing, switching to Bland's rule after a long run without
  /// objective progress. Columns with allowed[j] == false never enter.
  /// Returns false when the iteration cap is hit.
  bool optimize(const std::vector<bool>& allowed, const LpOptions& opt, std::int64_t& pivots) {
    bool bland = false;
    double best_obj = objective();
    std::int64_t stalled = 0;
    while (pivots < opt.max_pivots) {
      Eigen::Index enter = -1;
      double most = -opt.pivot_tol;
      for (Eigen::Index j = 0; j < cols_; ++j) {
        if (!allowed[static_cast<std::size_t>(j)]) continue;
        const double rc = T_(m_, j);
        if (bland ? rc < -opt.pivot_tol : rc < most) {
          enter = j;
          most = rc;
          if (bland) break;
        }
      }
      if (enter < 0) return true;
      Eigen::Index leave = -1;
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index r = 0; r < m_; ++r) {
        const double a = T_(r, enter);
        if (a <= opt.pivot_tol) continue;
        const double ratio = std::max(0.0, rhs(r)) / a;
        const bool tie = leave >= 0 && std::abs(ratio - best) <= 1e-12 * std::max(1.0, best);
        const bool better_tie =
            tie && (bland ? basis_[static_cast<std::size_t>(r)] < basis_[static_cast<std::size_t>(leave)]
                          : a > T_(leave, enter));
        if ((!tie && ratio < best) || better_tie) {
          best = ratio;
          leave = r;
        }
      }
      if (leave < 0) throw InfeasibleError("linear program is unbounded");
      pivot(leave, enter);
      ++pivots;
      if (objective() < best_obj - 1e-12 * std::max(1.0, std::abs(best_obj))) {
        best_obj = objective();
        stalled = 0;
      } else if (++stalled > 50 * (m_ + 10)) {
        bland = true;
      }
    }
    return false;
  }

 private:
  RowMat T_;
  Eigen::Index m_, cols_;
  std::vector<Eigen::Index> basis_;
};

struct LpAttempt {
  LpResult result;
  bool retry_unperturbed = false;
};

inline LpAttempt solve_lp_impl(const Mat& A_in, const Vec& b_in, const Vec& c, const LpOptions& opt, bool perturb) {
  const Eigen::Index m = A_in.rows(), n = A_in.cols();
  Mat A = A_in;
  Vec b = b_in;
  for (Eigen::Index r = 0; r < m; ++r)
    if (b(r) < 0) {
      A.row(r) *= -1;
      b(r) *= -1;
    }
  // fixed, distinct rhs perturbation against degeneracy
  Vec bp = b;
  const double scale = std::max(1.0, b.lpNorm<Eigen::Infinity>());
  if (perturb)
    for (Eigen::Index r = 0; r < m; ++r)
      bp(r) += 1e-7 * scale * (1.0 + std::fmod(0.6180339887498949 * static_cast<double>(r + 1), 1.0));

  // phase 1: artificial columns n..n+m-1
  Tableau tab(m, n + m);
  RowMat& T = tab.data();
  T.topLeftCorner(m, n) = A;
  T.block(0, n, m, m).setIdentity();
  T.col(tab.rhs_col()).head(m) = bp;
  T.col(tab.orig_col()).head(m) = b;
  for (Eigen::Index r = 0; r < m; ++r) tab.basis()[static_cast<std::size_t>(r)] = n + r;
  T.row(m).head(n) = -A.colwise().sum();
  T(m, tab.rhs_col()) = -bp.sum();
  T(m, tab.orig_col()) = -b.sum();

  LpAttempt out;
  LpResult& res = out.result;
  std::vector<bool> allowed(static_cast<std::size_t>(n + m), true);
  if (!tab.optimize(allowed, opt, res.pivots)) throw NumericalError("simplex iteration cap reached in phase 1", tab.objective());
  const double feas_tol = opt.feasibility_tol * scale;
  if (tab.objective() > feas_tol + (perturb ? 1e-6 * scale * static_cast<double>(m) : 0.0)) {
    throw InfeasibleError("linear program is infeasible");
  }

  // drive remaining artificials out of the basis; rows with no candidate are redundant
  std::vector<bool> redundant(static_cast<std::size_t>(m), false);
  for (Eigen::Index r = 0; r < m; ++r) {
    if (tab.basis()[static_cast<std::size_t>(r)] < n) continue;
    if (perturb && std::abs(tab.rhs(r)) > feas_tol) {
      out.retry_unperturbed = true;  // a perturbed redundant row: the perturbation broke consistency
      return out;
    }
    Eigen::Index col = -1;
    for (Eigen::Index j = 0; j < n && col < 0; ++j)
      if (std::abs(T(r, j)) > opt.pivot_tol) col = j;
    if (col >= 0) {
      tab.pivot(r, col);
      ++res.pivots;
    } else {
      redundant[static_cast<std::size_t>(r)] = true;
    }
  }
  if (tab.objective() > feas_tol + (perturb ? 1e-6 * scale * static_cast<double>(m) : 0.0) ||
      tab.original_objective() > feas_tol)
    throw InfeasibleError("linear program is infeasible");

  // phase 2
  for (Eigen::Index j = n; j < n + m; ++j) allowed[static_cast<std::size_t>(j)] = false;
  T.row(m).setZero();
  T.row(m).head(n) = c.transpose();
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index bj = tab.basis()[static_cast<std::size_t>(r)];
    if (bj < n && c(bj) != 0.0) T.row(m) -= c(bj) * T.row(r);
  }
  if (!tab.optimize(allowed, opt, res.pivots)) throw NumericalError("simplex iteration cap reached in phase 2", tab.objective());

  // primal values for the original rhs from the final basis
  res.x = Vec::Zero(n);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index bj = tab.basis()[static_cast<std::size_t>(r)];
    if (bj >= n) continue;
    const double v = T(r, tab.orig_col());
    if (v < -feas_tol) {
      out.retry_unperturbed = true;
      return out;
    }
    res.x(bj) = std::max(0.0, v);
  }
  res.objective = c.dot(res.x);

  // duals from the non-redundant rows of the final basis
  std::vector<Eigen::Index> rows, cols;
  for (Eigen::Index r = 0; r < m; ++r)
    if (!redundant[static_cast<std::size_t>(r)]) {
      rows.push_back(r);
      cols.push_back(tab.basis()[static_cast<std::size_t>(r)]);
    }
  const auto k = static_cast<Eigen::Index>(rows.size());
  Mat B(k, k);
  Vec cB(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) B(i, j) = A(rows[static_cast<std::size_t>(i)], cols[static_cast<std::size_t>(j)]);
    cB(i) = c(cols[static_cast<std::size_t>(i)]);
  }
  const Vec y_sub = B.transpose().partialPivLu().solve(cB);
  res.duals = Vec::Zero(m);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::Index r = rows[static_cast<std::size_t>(i)];
    // undo the sign flip applied to rows with negative rhs
    res.duals(r) = b_in(r) < 0 ? -y_sub(i) : y_sub(i);
  }
  res.reduced_costs = c - A_in.transpose() * res.duals;
  res.basis = std::move(cols);
  return out;
}

}  // namespace detail

/// Solves with a small fixed rhs perturbation first (degenerate problems like
/// the max-margin LP otherwise stall); falls back to the unperturbed problem.
inline LpResult solve_lp(const Mat& A, const Vec& b, const Vec& c, const LpOptions& opt = {}) {
  require(b.size() == A.rows() && c.size() == A.cols(), "LP dimensions disagree");
  auto attempt = detail::solve_lp_impl(A, b, c, opt, true);
  if (attempt.retry_unperturbed) attempt = detail::solve_lp_impl(A, b, c, opt, false);
  return std::move(attempt.result);
}

}  // namespace grokking

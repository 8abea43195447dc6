#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace grokking {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Bad shapes, invalid parameters, unknown config keys.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A solver could not certify feasibility (non-separable data, infeasible LP, ...).
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ill-conditioned or rank-deficient linear algebra. Carries the offending
/// magnitude (min eigenvalue, condition estimate, last residual).
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, double value)
      : std::runtime_error(what), value_(value) {}
  double value() const noexcept { return value_; }

 private:
  double value_;
};

/// Non-finite values encountered while integrating.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// Independent stream for run `index` of a sweep seeded with `master`.
inline Rng make_rng(std::uint64_t master, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x9e3779b9u};
  return Rng(seq);
}

inline bool all_finite(const Eigen::Ref<const Vec>& v) { return v.allFinite(); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace grokking

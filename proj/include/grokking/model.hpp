#pragma once

// Homogeneous models: two-layer ReLU net on one-hot pairs, two-layer diagonal
// linear net, and symmetric matrix factorization. All three are 2-homogeneous
// in their parameters.

#include "grokking/core.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>

namespace grokking {

/// f(θ; x) = W2 ReLU(W1 x + b1), x ∈ ℝ^{2p} (concatenated one-hots), p logits.
/// b1 is treated as a weight on a constant input, so f is jointly 2-homogeneous.
struct TwoLayerReLU {
  Eigen::Index p = 0;
  Eigen::Index h = 0;
};

/// f(θ; x) = Σ_k (u_k² − v_k²) x_k with θ = (u, v).
struct DiagonalLinear {
  Eigen::Index d = 0;
};

/// f(θ; (i, j)) = ⟨P_ij, UUᵀ − VVᵀ⟩ with P_ij = ½(e_i e_jᵀ + e_j e_iᵀ),
/// θ = (vec U, vec V) in column-major order.
struct MatrixFactorization {
  Eigen::Index d = 0;
};

class HomogeneousModel {
 public:
  using Kind = std::variant<TwoLayerReLU, DiagonalLinear, MatrixFactorization>;

  explicit HomogeneousModel(Kind kind) : kind_(kind) {
    std::visit([](const auto& k) { validate(k); }, kind_);
  }

  static HomogeneousModel two_layer_relu(Eigen::Index p, Eigen::Index h) {
    return HomogeneousModel(TwoLayerReLU{p, h});
  }
  static HomogeneousModel diagonal_linear(Eigen::Index d) {
    return HomogeneousModel(DiagonalLinear{d});
  }
  static HomogeneousModel matrix_factorization(Eigen::Index d) {
    return HomogeneousModel(MatrixFactorization{d});
  }

  const Kind& kind() const noexcept { return kind_; }

  template <class T>
  bool is() const noexcept {
    return std::holds_alternative<T>(kind_);
  }
  template <class T>
  const T& as() const {
    return std::get<T>(kind_);
  }

  /// Homogeneity degree L. Every supported model is quadratic in θ.
  int degree() const noexcept { return 2; }

  Eigen::Index param_count() const {
    return std::visit(
        [](const auto& k) -> Eigen::Index {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, TwoLayerReLU>) return k.h * 2 * k.p + k.h + k.p * k.h;
          if constexpr (std::is_same_v<K, DiagonalLinear>) return 2 * k.d;
          if constexpr (std::is_same_v<K, MatrixFactorization>) return 2 * k.d * k.d;
        },
        kind_);
  }

  Eigen::Index input_dim() const {
    return std::visit(
        [](const auto& k) -> Eigen::Index {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, TwoLayerReLU>) return 2 * k.p;
          if constexpr (std::is_same_v<K, DiagonalLinear>) return k.d;
          if constexpr (std::is_same_v<K, MatrixFactorization>) return 2;
        },
        kind_);
  }

  Eigen::Index output_dim() const {
    if (const auto* k = std::get_if<TwoLayerReLU>(&kind_)) return k->p;
    return 1;
  }

  std::string id() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, TwoLayerReLU>)
            return "relu(p=" + std::to_string(k.p) + ",h=" + std::to_string(k.h) + ")";
          if constexpr (std::is_same_v<K, DiagonalLinear>)
            return "diagonal(d=" + std::to_string(k.d) + ")";
          if constexpr (std::is_same_v<K, MatrixFactorization>)
            return "matrix(d=" + std::to_string(k.d) + ")";
        },
        kind_);
  }

 private:
  static void validate(const TwoLayerReLU& k) {
    require(k.p >= 2 && k.h >= 1, "TwoLayerReLU needs p >= 2 and h >= 1");
  }
  static void validate(const DiagonalLinear& k) { require(k.d >= 1, "DiagonalLinear needs d >= 1"); }
  static void validate(const MatrixFactorization& k) {
    require(k.d >= 1, "MatrixFactorization needs d >= 1");
  }

  Kind kind_;
};

/// Flat parameter vector tagged with the model it belongs to.
struct ParamVector {
  Vec values;
  std::string model_id;

  ParamVector() = default;
  ParamVector(Vec v, std::string id) : values(std::move(v)), model_id(std::move(id)) {}
  ParamVector(const HomogeneousModel& model, Vec v) : values(std::move(v)), model_id(model.id()) {}

  Eigen::Index size() const noexcept { return values.size(); }
};

/// Starting point θ(0) = α·θ̄_init (+ Gaussian perturbation for matrix models).
struct InitSpec {
  ParamVector base;
  double alpha = 1.0;
  double sigma = 0.0;
};

namespace detail {

inline void check_params(const HomogeneousModel& model, const Eigen::Ref<const Vec>& theta) {
  if (theta.size() != model.param_count())
    throw ConfigError("parameter vector of length " + std::to_string(theta.size()) + " does not match " +
                      model.id() + " (" + std::to_string(model.param_count()) + ")");
}

inline void check_inputs(const HomogeneousModel& model, const Eigen::Ref<const Mat>& X) {
  if (X.cols() != model.input_dim())
    throw ConfigError("input dimension " + std::to_string(X.cols()) + " does not match " + model.id());
  if (const auto* mf = std::get_if<MatrixFactorization>(&model.kind())) {
    for (Eigen::Index r = 0; r < X.rows(); ++r)
      for (Eigen::Index c = 0; c < 2; ++c) {
        const double v = X(r, c);
        if (v < 0 || v >= static_cast<double>(mf->d) || v != std::floor(v))
          throw ConfigError("matrix-completion input must be an index pair in [0, d)");
      }
  }
}

struct ReluView {
  Eigen::Map<const Mat> W1, W2;
  Eigen::Map<const Vec> b1;
  ReluView(const TwoLayerReLU& k, const double* data)
      : W1(data, k.h, 2 * k.p),
        W2(data + k.h * 2 * k.p + k.h, k.p, k.h),
        b1(data + k.h * 2 * k.p, k.h) {}
};

inline Mat relu_forward(const TwoLayerReLU& k, const Vec& theta, const Eigen::Ref<const Mat>& X,
                        Mat* pre = nullptr) {
  ReluView v(k, theta.data());
  Mat Z = X * v.W1.transpose();
  Z.rowwise() += v.b1.transpose();
  Mat out = Z.cwiseMax(0.0) * v.W2.transpose();
  if (pre) *pre = std::move(Z);
  return out;
}

inline Vec relu_pullback(const TwoLayerReLU& k, const Vec& theta, const Eigen::Ref<const Mat>& X,
                         const Eigen::Ref<const Mat>& dout) {
  ReluView v(k, theta.data());
  Mat Z = X * v.W1.transpose();
  Z.rowwise() += v.b1.transpose();
  const Mat A = Z.cwiseMax(0.0);
  Vec g(theta.size());
  const Eigen::Index n1 = k.h * 2 * k.p;
  Eigen::Map<Mat> gW1(g.data(), k.h, 2 * k.p);
  Eigen::Map<Vec> gb1(g.data() + n1, k.h);
  Eigen::Map<Mat> gW2(g.data() + n1 + k.h, k.p, k.h);
  gW2.noalias() = dout.transpose() * A;
  // ReLU'(0) := 0
  const Mat dZ = ((dout * v.W2).array() * (Z.array() > 0.0).cast<double>()).matrix();
  gW1.noalias() = dZ.transpose() * X;
  gb1 = dZ.colwise().sum().transpose();
  return g;
}

inline Vec diagonal_weight(const DiagonalLinear& k, const Vec& theta) {
  const auto u = theta.head(k.d).array();
  const auto v = theta.tail(k.d).array();
  return ((u - v) * (u + v)).matrix();
}

inline Mat factor_matrix(const MatrixFactorization& k, const Vec& theta) {
  Eigen::Map<const Mat> U(theta.data(), k.d, k.d);
  Eigen::Map<const Mat> V(theta.data() + k.d * k.d, k.d, k.d);
  Mat W = U * U.transpose();
  W.noalias() -= V * V.transpose();
  return W;
}

}  // namespace detail

/// Effective linear weight u⊙u − v⊙v of a diagonal net.
inline Vec effective_weight(const HomogeneousModel& model, const ParamVector& theta) {
  detail::check_params(model, theta.values);
  return detail::diagonal_weight(model.as<DiagonalLinear>(), theta.values);
}

/// W(θ) = UUᵀ − VVᵀ of a factorization model.
inline Mat completed_matrix(const HomogeneousModel& model, const ParamVector& theta) {
  detail::check_params(model, theta.values);
  return detail::factor_matrix(model.as<MatrixFactorization>(), theta.values);
}

/// Outputs for every row of X; n × output_dim.
inline Mat forward_batch(const HomogeneousModel& model, const ParamVector& theta,
                         const Eigen::Ref<const Mat>& X) {
  detail::check_params(model, theta.values);
  detail::check_inputs(model, X);
  return std::visit(
      [&](const auto& k) -> Mat {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, TwoLayerReLU>) {
          return detail::relu_forward(k, theta.values, X);
        } else if constexpr (std::is_same_v<K, DiagonalLinear>) {
          return X * detail::diagonal_weight(k, theta.values);
        } else {
          const Mat W = detail::factor_matrix(k, theta.values);
          Mat out(X.rows(), 1);
          for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const auto i = static_cast<Eigen::Index>(X(r, 0));
            const auto j = static_cast<Eigen::Index>(X(r, 1));
            out(r, 0) = 0.5 * (W(i, j) + W(j, i));
          }
          return out;
        }
      },
      model.kind());
}

inline Vec forward(const HomogeneousModel& model, const ParamVector& theta, const Eigen::Ref<const Vec>& x) {
  return forward_batch(model, theta, x.transpose()).row(0).transpose();
}

/// Vector-Jacobian product Σ_i Σ_o dout(i, o) ∇_θ f_o(θ; x_i).
inline Vec pullback(const HomogeneousModel& model, const ParamVector& theta, const Eigen::Ref<const Mat>& X,
                    const Eigen::Ref<const Mat>& dout) {
  detail::check_params(model, theta.values);
  detail::check_inputs(model, X);
  if (dout.rows() != X.rows() || dout.cols() != model.output_dim())
    throw ConfigError("output cotangent has the wrong shape for " + model.id());
  return std::visit(
      [&](const auto& k) -> Vec {
        using K = std::decay_t<decltype(k)>;
        const Vec& th = theta.values;
        if constexpr (std::is_same_v<K, TwoLayerReLU>) {
          return detail::relu_pullback(k, th, X, dout);
        } else if constexpr (std::is_same_v<K, DiagonalLinear>) {
          const Vec gw = X.transpose() * dout.col(0);
          Vec g(th.size());
          g.head(k.d) = 2.0 * th.head(k.d).cwiseProduct(gw);
          g.tail(k.d) = -2.0 * th.tail(k.d).cwiseProduct(gw);
          return g;
        } else {
          Mat S = Mat::Zero(k.d, k.d);
          for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const auto i = static_cast<Eigen::Index>(X(r, 0));
            const auto j = static_cast<Eigen::Index>(X(r, 1));
            S(i, j) += 0.5 * dout(r, 0);
            S(j, i) += 0.5 * dout(r, 0);
          }
          Eigen::Map<const Mat> U(th.data(), k.d, k.d);
          Eigen::Map<const Mat> V(th.data() + k.d * k.d, k.d, k.d);
          Vec g(th.size());
          Eigen::Map<Mat>(g.data(), k.d, k.d).noalias() = 2.0 * S * U;
          Eigen::Map<Mat>(g.data() + k.d * k.d, k.d, k.d).noalias() = -2.0 * S * V;
          return g;
        }
      },
      model.kind());
}

/// Exact gradient of output `out_index` at a single input.
inline ParamVector grad(const HomogeneousModel& model, const ParamVector& theta, const Eigen::Ref<const Vec>& x,
                        Eigen::Index out_index = 0) {
  if (out_index < 0 || out_index >= model.output_dim())
    throw ConfigError("output index " + std::to_string(out_index) + " out of range for " + model.id());
  Mat dout = Mat::Zero(1, model.output_dim());
  dout(0, out_index) = 1.0;
  return ParamVector(pullback(model, theta, x.transpose(), dout), model.id());
}

/// Rows ∇_θ f_{out_index}(θ; x_i)ᵀ for every row of X; n × param_count.
inline Mat jacobian(const HomogeneousModel& model, const ParamVector& theta, const Eigen::Ref<const Mat>& X,
                    Eigen::Index out_index = 0) {
  Mat J(X.rows(), model.param_count());
  for (Eigen::Index i = 0; i < X.rows(); ++i) J.row(i) = grad(model, theta, X.row(i).transpose(), out_index).values.transpose();
  return J;
}

/// Unit-scale θ̄_init. Zero output everywhere: W2 = 0 for the ReLU net, u = v
/// for the diagonal net, U = V = I for the factorization.
inline ParamVector base_init(const HomogeneousModel& model, std::uint64_t seed = 0) {
  Vec th = Vec::Zero(model.param_count());
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, TwoLayerReLU>) {
          Rng rng = make_rng(seed, 0x5eed);
          const double he = std::sqrt(2.0 / static_cast<double>(2 * k.p));
          std::normal_distribution<double> normal(0.0, he);
          for (Eigen::Index i = 0; i < k.h * 2 * k.p + k.h; ++i) th(i) = normal(rng);
        } else if constexpr (std::is_same_v<K, DiagonalLinear>) {
          th.setOnes();
        } else {
          Eigen::Map<Mat>(th.data(), k.d, k.d).setIdentity();
          Eigen::Map<Mat>(th.data() + k.d * k.d, k.d, k.d).setIdentity();
        }
      },
      model.kind());
  return ParamVector(model, std::move(th));
}

/// θ(0) = α·θ̄_init, plus i.i.d. N(0, σ²) noise on every entry of U and V for
/// the factorization model (so entries are N(α·1{i=j}, σ²)).
inline ParamVector make_init(const HomogeneousModel& model, double alpha, double sigma, std::uint64_t rng_seed) {
  require(alpha > 0 && std::isfinite(alpha), "alpha must be positive");
  require(sigma >= 0 && std::isfinite(sigma), "sigma must be nonnegative");
  if (sigma > 0 && !model.is<MatrixFactorization>())
    throw ConfigError("sigma > 0 is only defined for the matrix-factorization model");
  ParamVector th = base_init(model, rng_seed);
  th.values *= alpha;
  if (sigma > 0) {
    Rng rng = make_rng(rng_seed, 0x1a17);
    std::normal_distribution<double> normal(0.0, sigma);
    for (Eigen::Index i = 0; i < th.size(); ++i) th.values(i) += normal(rng);
  }
  return th;
}

inline ParamVector make_init(const HomogeneousModel& model, const InitSpec& spec, std::uint64_t rng_seed) {
  detail::check_params(model, spec.base.values);
  require(spec.alpha > 0, "alpha must be positive");
  ParamVector th(spec.base.values * spec.alpha, model.id());
  if (spec.sigma > 0) {
    require(model.is<MatrixFactorization>(), "sigma > 0 is only defined for the matrix-factorization model");
    Rng rng = make_rng(rng_seed, 0x1a17);
    std::normal_distribution<double> normal(0.0, spec.sigma);
    for (Eigen::Index i = 0; i < th.size(); ++i) th.values(i) += normal(rng);
  }
  return th;
}

}  // namespace grokking

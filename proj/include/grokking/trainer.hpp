#pragma once

// Gradient flow on L_λ(θ) = L(θ) + (λ/2)‖θ‖², label-noise SGD, trajectory logging.

#include "grokking/data.hpp"
#include "grokking/model.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace grokking {

enum class LossKind { Exponential, Logistic, Squared, CrossEntropy };
enum class Integrator { Euler, RK4 };
enum class LrMode { Constant, NormalizedByLoss };
enum class BatchMode { Full, SingleSample };

struct TimeWindow {
  double begin = 0.0;
  double end = 0.0;
};

struct TrainConfig {
  LossKind loss = LossKind::Exponential;
  double lambda = 0.0;
  Integrator integrator = Integrator::Euler;
  double dt = 1e-2;  // step size at the initial point
  double max_time = 1.0;
  std::int64_t max_steps = 0;  // 0 = unlimited
  double log_factor = 1.1;     // geometric logging grid
  double log_start = 0.0;      // first grid time; 0 = the first step's size
  std::vector<double> forced_times;
  std::vector<double> snapshot_times;
  LrMode lr_mode = LrMode::Constant;
  /// Divide the step by max_j θ_j² relative to its value at initialization.
  bool scale_aware = false;
  /// Cap on a single step; 0 means 0.1/λ (or unlimited when λ = 0).
  double dt_max = 0.0;
  double label_noise_std = 0.0;
  BatchMode batch = BatchMode::Full;
  double divergence_threshold = 1e12;
  std::optional<TimeWindow> min_grad_window;
  bool evaluate_test = true;
};

/// Data loss, its log (always finite when the loss underflows/overflows), the
/// regularized loss and its gradient.
struct LossGrad {
  double loss = 0.0;
  double log_loss = 0.0;
  double reg_loss = 0.0;
  Vec grad;  // ∇L_λ
  Mat outputs;
};

struct TrajectoryRow {
  std::int64_t step = 0;
  double time = 0.0;
  double train_loss = 0.0;
  double reg_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double test_loss = 0.0;
  double param_norm = 0.0;
  double dir_dist = 0.0;
  double min_margin = 0.0;
  double grad_norm = 0.0;
  double log_train_loss = 0.0;
};

struct Snapshot {
  double time = 0.0;
  ParamVector theta;
  double grad_norm = 0.0;
};

struct TrajectoryLog {
  std::vector<TrajectoryRow> rows;
  std::vector<Snapshot> snapshots;
  std::optional<Snapshot> min_grad;
  ParamVector final_theta;
  std::int64_t steps = 0;
  bool diverged = false;
  std::string divergence_reason;

  const Snapshot* snapshot_at(double t, double rel_tol = 1e-9) const {
    for (const auto& s : snapshots)
      if (std::abs(s.time - t) <= rel_tol * std::max(1.0, std::abs(t))) return &s;
    return nullptr;
  }
};

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::Exponential: return "exponential";
    case LossKind::Logistic: return "logistic";
    case LossKind::Squared: return "squared";
    case LossKind::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

inline LossKind loss_from_string(const std::string& s) {
  if (s == "exponential") return LossKind::Exponential;
  if (s == "logistic") return LossKind::Logistic;
  if (s == "squared") return LossKind::Squared;
  if (s == "cross_entropy") return LossKind::CrossEntropy;
  throw ConfigError("unknown loss '" + s + "'");
}

namespace detail {

inline void check_loss_task(const HomogeneousModel& model, const LabeledDataset& ds, LossKind loss) {
  switch (loss) {
    case LossKind::Exponential:
    case LossKind::Logistic:
      require(ds.task == Task::BinaryClassification, to_string(loss) + " loss needs a binary dataset");
      require(model.output_dim() == 1, to_string(loss) + " loss needs a scalar-output model");
      break;
    case LossKind::CrossEntropy:
      require(ds.task == Task::MultiClass, "cross-entropy needs a multi-class dataset");
      require(model.output_dim() == ds.num_classes(), "model logits do not match the number of classes");
      break;
    case LossKind::Squared:
      require(model.output_dim() == 1, "squared loss needs a scalar-output model");
      break;
  }
  require(ds.train.X.rows() == 0 || ds.train.X.cols() == model.input_dim(), "dataset inputs do not match the model");
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

struct DataLoss {
  double value = 0.0;
  double log_value = -std::numeric_limits<double>::infinity();
  Mat dout;  // ∂L/∂outputs
};

/// Averaged loss over rows of `out` and its derivative w.r.t. the outputs.
inline DataLoss data_loss(LossKind kind, const Mat& out, const Vec& y) {
  const Eigen::Index n = out.rows();
  DataLoss r;
  r.dout = Mat::Zero(n, out.cols());
  if (n == 0) return r;
  const double inv_n = 1.0 / static_cast<double>(n);
  switch (kind) {
    case LossKind::Exponential: {
      const Vec m = y.cwiseProduct(out.col(0));
      const double mm = m.minCoeff();
      const Vec e = (-(m.array() - mm)).exp().matrix();
      const double mean = e.mean();
      r.log_value = -mm + std::log(mean);
      r.value = std::exp(r.log_value);
      r.dout.col(0) = -(std::exp(-mm) * inv_n) * y.cwiseProduct(e);
      break;
    }
    case LossKind::Logistic: {
      double s = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double m = y(i) * out(i, 0);
        s += softplus(-m);
        r.dout(i, 0) = -y(i) * inv_n / (1.0 + std::exp(m));
      }
      r.value = s * inv_n;
      r.log_value = std::log(r.value);
      break;
    }
    case LossKind::Squared: {
      const Vec res = out.col(0) - y;
      r.value = res.squaredNorm() * inv_n;
      r.log_value = std::log(r.value);
      r.dout.col(0) = (2.0 * inv_n) * res;
      break;
    }
    case LossKind::CrossEntropy: {
      double s = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto label = static_cast<Eigen::Index>(y(i));
        const double mx = out.row(i).maxCoeff();
        const Eigen::RowVectorXd e = (out.row(i).array() - mx).exp().matrix();
        const double z = e.sum();
        s += mx + std::log(z) - out(i, label);
        r.dout.row(i) = (inv_n / z) * e;
        r.dout(i, label) -= inv_n;
      }
      r.value = s * inv_n;
      r.log_value = std::log(r.value);
      break;
    }
  }
  return r;
}

/// Fraction correct; ties (f = 0, or a shared argmax) count as wrong.
inline double accuracy(Task task, const Mat& out, const Vec& y) {
  const Eigen::Index n = out.rows();
  if (n == 0 || task == Task::Regression) return std::numeric_limits<double>::quiet_NaN();
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (task == Task::BinaryClassification) {
      correct += y(i) * out(i, 0) > 0;
    } else {
      const auto label = static_cast<Eigen::Index>(y(i));
      const double target = out(i, label);
      bool ok = true;
      for (Eigen::Index c = 0; c < out.cols() && ok; ++c) ok = c == label || out(i, c) < target;
      correct += ok;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// min_i y_i f_i for binary tasks; min_i (f_{i,y_i} − max_{c≠y_i} f_{i,c}) for multi-class.
inline double min_margin(Task task, const Mat& out, const Vec& y) {
  const Eigen::Index n = out.rows();
  if (n == 0 || task == Task::Regression) return std::numeric_limits<double>::quiet_NaN();
  if (task == Task::BinaryClassification) return y.cwiseProduct(out.col(0)).minCoeff();
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto label = static_cast<Eigen::Index>(y(i));
    double other = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < out.cols(); ++c)
      if (c != label) other = std::max(other, out(i, c));
    best = std::min(best, out(i, label) - other);
  }
  return best;
}

inline double max_sq_entry(const Vec& v) { return v.size() ? v.cwiseAbs2().maxCoeff() : 0.0; }

}  // namespace detail

/// L_λ(θ) and ∇L_λ(θ) on the training split.
inline LossGrad loss_and_grad(const HomogeneousModel& model, const ParamVector& theta, const LabeledDataset& ds,
                              LossKind loss, double lambda) {
  require(lambda >= 0, "lambda must be nonnegative");
  detail::check_loss_task(model, ds, loss);
  LossGrad r;
  const Eigen::Index n = ds.train.X.rows();
  r.outputs = n ? forward_batch(model, theta, ds.train.X) : Mat(0, model.output_dim());
  auto dl = detail::data_loss(loss, r.outputs, ds.train.y);
  r.loss = dl.value;
  r.log_loss = dl.log_value;
  r.grad = n ? pullback(model, theta, ds.train.X, dl.dout) : Vec::Zero(theta.size());
  r.grad += lambda * theta.values;
  r.reg_loss = r.loss + 0.5 * lambda * theta.values.squaredNorm();
  return r;
}

/// One integrator step of dθ/dt = −∇L_λ(θ) with step `dt`. `current` may carry
/// the gradient already evaluated at θ.
inline ParamVector step_gradient_flow(const HomogeneousModel& model, const ParamVector& theta,
                                      const LabeledDataset& ds, const TrainConfig& config, double dt,
                                      const Vec* current = nullptr) {
  require(config.batch == BatchMode::Full, "gradient flow needs full-batch mode");
  if (!theta.values.allFinite()) throw DivergenceError("non-finite parameters");
  auto field = [&](const Vec& th) -> Vec {
    return -loss_and_grad(model, ParamVector(th, theta.model_id), ds, config.loss, config.lambda).grad;
  };
  const Vec k1 = current ? Vec(-*current) : field(theta.values);
  Vec next;
  if (config.integrator == Integrator::Euler) {
    next = theta.values + dt * k1;
  } else {
    const Vec k2 = field(theta.values + 0.5 * dt * k1);
    const Vec k3 = field(theta.values + 0.5 * dt * k2);
    const Vec k4 = field(theta.values + dt * k3);
    next = theta.values + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  if (!next.allFinite()) throw DivergenceError("non-finite gradient");
  return ParamVector(std::move(next), theta.model_id);
}

inline ParamVector step_gradient_flow(const HomogeneousModel& model, const ParamVector& theta,
                                      const LabeledDataset& ds, const TrainConfig& config) {
  return step_gradient_flow(model, theta, ds, config, config.dt);
}

/// θ ← θ − η(∇_θ (f(θ; x_i) − y_i + ξ)² + λθ) with i uniform and ξ ~ N(0, σ²).
inline ParamVector step_sgd_label_noise(const HomogeneousModel& model, const ParamVector& theta,
                                        const LabeledDataset& ds, const TrainConfig& config, Rng& rng) {
  require(config.batch == BatchMode::SingleSample, "label-noise SGD needs single-sample mode");
  require(config.loss == LossKind::Squared, "label-noise SGD needs the squared loss");
  require(model.output_dim() == 1, "label-noise SGD needs a scalar-output model");
  const Eigen::Index n = ds.train.X.rows();
  require(n > 0, "label-noise SGD needs a nonempty training set");
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  const Eigen::Index i = pick(rng);
  double xi = 0.0;
  if (config.label_noise_std > 0) xi = std::normal_distribution<double>(0.0, config.label_noise_std)(rng);
  const auto x = ds.train.X.row(i).transpose();
  const double f = forward(model, theta, x)(0);
  Mat dout(1, 1);
  dout(0, 0) = 2.0 * (f - ds.train.y(i) + xi);
  Vec g = pullback(model, theta, ds.train.X.row(i), dout);
  g += config.lambda * theta.values;
  Vec next = theta.values - config.dt * g;
  if (!next.allFinite()) throw DivergenceError("non-finite gradient");
  return ParamVector(std::move(next), theta.model_id);
}

/// dt = stability / (α^{2(L−1)} · λ_max(K/n)), with K the Gram matrix of the
/// features ∇f(θ̄_init; x_i).
inline double suggest_dt(const HomogeneousModel& model, const ParamVector& base, const LabeledDataset& ds,
                         double alpha, double stability = 0.1) {
  const Eigen::Index n = ds.train.X.rows();
  require(n > 0, "suggest_dt needs training data");
  if (static_cast<double>(n) * static_cast<double>(model.param_count()) > 5e7)
    throw ConfigError("problem too large for automatic dt; set dt explicitly");
  const Mat J = jacobian(model, base, ds.train.X);
  const Mat K = (J * J.transpose()) / static_cast<double>(n);
  const double lmax = Eigen::SelfAdjointEigenSolver<Mat>(K, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  require(lmax > 0, "features vanish at the initial point");
  return stability / (std::pow(alpha, 2.0 * (model.degree() - 1)) * lmax);
}

namespace detail {

struct Evaluation {
  LossGrad train;
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  double test_acc = std::numeric_limits<double>::quiet_NaN();
};

inline TrajectoryRow make_row(const HomogeneousModel& model, const LabeledDataset& ds, const TrainConfig& cfg,
                              const InitSpec& init, const ParamVector& theta, const LossGrad& lg,
                              std::int64_t step, double t) {
  TrajectoryRow row;
  row.step = step;
  row.time = t;
  row.train_loss = lg.loss;
  row.log_train_loss = lg.log_loss;
  row.reg_loss = lg.reg_loss;
  row.train_acc = accuracy(ds.task, lg.outputs, ds.train.y);
  row.min_margin = min_margin(ds.task, lg.outputs, ds.train.y);
  row.param_norm = theta.values.norm();
  row.grad_norm = lg.grad.norm();
  row.dir_dist = (std::exp(cfg.lambda * t) / init.alpha * theta.values - init.base.values).norm();
  row.test_acc = std::numeric_limits<double>::quiet_NaN();
  row.test_loss = std::numeric_limits<double>::quiet_NaN();
  if (cfg.evaluate_test && ds.test.X.rows() > 0) {
    const Mat out = forward_batch(model, theta, ds.test.X);
    row.test_acc = accuracy(ds.task, out, ds.test.y);
    const LossKind test_kind = ds.task == Task::Regression ? LossKind::Squared : cfg.loss;
    row.test_loss = data_loss(test_kind, out, ds.test.y).value;
  }
  return row;
}

}  // namespace detail

/// Effective step at θ given the data loss value there.
inline double effective_dt(const TrainConfig& cfg, const ParamVector& theta, double reference_scale, double loss) {
  double dt = cfg.dt;
  if (cfg.lr_mode == LrMode::NormalizedByLoss && loss > 0) dt /= loss;
  if (cfg.scale_aware) {
    const double s = detail::max_sq_entry(theta.values);
    if (s > 0 && reference_scale > 0) dt *= reference_scale / s;
  }
  double cap = cfg.dt_max;
  if (cap <= 0) cap = cfg.lambda > 0 ? 0.1 / cfg.lambda : std::numeric_limits<double>::infinity();
  return std::min(dt, cap);
}

/// Integrates from θ(0) = α·θ̄_init (+ perturbation) until max_time, logging on a
/// geometric grid plus forced times. Divergence ends the run with a partial log.
inline TrajectoryLog run(const HomogeneousModel& model, const LabeledDataset& ds, const InitSpec& init,
                         const TrainConfig& cfg, std::uint64_t rng_seed = 0) {
  require(cfg.dt > 0 && std::isfinite(cfg.dt), "dt must be positive");
  require(cfg.max_time > 0, "max_time must be positive");
  require(cfg.lambda >= 0, "lambda must be nonnegative");
  require(cfg.log_factor > 1, "log_factor must exceed 1");
  require(cfg.label_noise_std >= 0, "label_noise_std must be nonnegative");
  detail::check_loss_task(model, ds, cfg.loss);
  if (cfg.batch == BatchMode::SingleSample) require(cfg.loss == LossKind::Squared, "label-noise SGD needs the squared loss");

  TrajectoryLog log;
  ParamVector theta = make_init(model, init, rng_seed);
  const double reference_scale = detail::max_sq_entry(theta.values);
  Rng rng = make_rng(rng_seed, 7);

  std::vector<double> events = cfg.forced_times;
  events.insert(events.end(), cfg.snapshot_times.begin(), cfg.snapshot_times.end());
  if (cfg.min_grad_window) {
    events.push_back(cfg.min_grad_window->begin);
    events.push_back(cfg.min_grad_window->end);
  }
  std::erase_if(events, [&](double e) { return !(e > 0 && e < cfg.max_time); });
  events.push_back(cfg.max_time);
  std::sort(events.begin(), events.end());
  events.erase(std::unique(events.begin(), events.end()), events.end());
  std::size_t next_event = 0;

  auto is_snapshot_time = [&](double t) {
    return std::any_of(cfg.snapshot_times.begin(), cfg.snapshot_times.end(),
                       [&](double s) { return std::abs(s - t) <= 1e-12 * std::max(1.0, t); });
  };
  auto in_window = [&](double t) {
    return cfg.min_grad_window && t >= cfg.min_grad_window->begin * (1 - 1e-12) &&
           t <= cfg.min_grad_window->end * (1 + 1e-12);
  };

  LossGrad current = loss_and_grad(model, theta, ds, cfg.loss, cfg.lambda);
  double t = 0.0;
  std::int64_t step = 0;
  log.rows.push_back(detail::make_row(model, ds, cfg, init, theta, current, step, t));
  double next_grid = cfg.log_start;

  auto diverge = [&](const std::string& why) {
    log.diverged = true;
    log.divergence_reason = why;
  };

  while (t < cfg.max_time && (cfg.max_steps == 0 || step < cfg.max_steps)) {
    double dt = cfg.batch == BatchMode::Full ? effective_dt(cfg, theta, reference_scale, current.loss) : cfg.dt;
    if (!(dt > 0) || !std::isfinite(dt)) {
      diverge("step size is not finite");
      break;
    }
    if (next_grid <= 0) next_grid = dt;
    const double target = std::min(next_grid, events[next_event]);
    bool landed = false;
    if (t + dt >= target * (1 - 1e-12)) {
      dt = target - t;
      landed = true;
    }
    try {
      theta = cfg.batch == BatchMode::Full ? step_gradient_flow(model, theta, ds, cfg, dt, &current.grad)
                                           : step_sgd_label_noise(model, theta, ds, cfg, rng);
    } catch (const DivergenceError& e) {
      diverge(e.what());
      break;
    }
    t = landed ? target : t + dt;
    ++step;

    const bool need_eval = cfg.batch == BatchMode::Full || landed || in_window(t);
    if (need_eval) current = loss_and_grad(model, theta, ds, cfg.loss, cfg.lambda);
    if (need_eval && (!std::isfinite(current.reg_loss) || current.reg_loss > cfg.divergence_threshold ||
                      !current.grad.allFinite())) {
      log.rows.push_back(detail::make_row(model, ds, cfg, init, theta, current, step, t));
      diverge("loss exceeded the divergence threshold");
      break;
    }
    if (in_window(t)) {
      const double gn = current.grad.norm();
      if (!log.min_grad || gn < log.min_grad->grad_norm) log.min_grad = Snapshot{t, theta, gn};
    }
    if (landed) {
      bool record = false;
      while (next_grid <= t * (1 + 1e-12)) {
        next_grid *= cfg.log_factor;
        record = true;
      }
      while (next_event < events.size() && events[next_event] <= t * (1 + 1e-12)) {
        ++next_event;
        record = true;
      }
      if (next_event == events.size()) next_event = events.size() - 1;
      if (record) log.rows.push_back(detail::make_row(model, ds, cfg, init, theta, current, step, t));
      if (is_snapshot_time(t)) log.snapshots.push_back(Snapshot{t, theta, current.grad.norm()});
    }
  }
  log.steps = step;
  log.final_theta = theta;
  if (!log.diverged && log.rows.back().step != step)
    log.rows.push_back(detail::make_row(model, ds, cfg, init, theta, current, step, t));
  return log;
}

inline const char* metrics_csv_header() {
  return "step,time,train_loss,reg_loss,train_acc,test_acc,test_loss,param_norm,dir_dist,min_margin";
}

inline void write_metrics_csv(std::ostream& os, const TrajectoryLog& log) {
  os << metrics_csv_header() << '\n';
  char buf[512];
  for (const auto& r : log.rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                  static_cast<long long>(r.step), r.time, r.train_loss, r.reg_loss, r.train_acc, r.test_acc,
                  r.test_loss, r.param_norm, r.dir_dist, r.min_margin);
    os << buf;
  }
}

}  // namespace grokking

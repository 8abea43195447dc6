#pragma once

// Config-driven runs: dataset + model + training + analyses, (α, λ, seed)
// sweeps on a worker pool, transition-time scaling fits and artifact output.

#include "grokking/data.hpp"
#include "grokking/diagnostics.hpp"
#include "grokking/model.hpp"
#include "grokking/ntk.hpp"
#include "grokking/plot.hpp"
#include "grokking/ref_solvers.hpp"
#include "grokking/trainer.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace grokking {

using Json = nlohmann::json;

enum class ExperimentKind { ModAdd, SparseGrok, Misgrok, MatrixCompletion, Custom };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::ModAdd: return "mod_add";
    case ExperimentKind::SparseGrok: return "sparse_grok";
    case ExperimentKind::Misgrok: return "misgrok";
    case ExperimentKind::MatrixCompletion: return "matrix_completion";
    case ExperimentKind::Custom: return "custom";
  }
  return "?";
}

inline ExperimentKind experiment_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::ModAdd, ExperimentKind::SparseGrok, ExperimentKind::Misgrok,
                 ExperimentKind::MatrixCompletion, ExperimentKind::Custom})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown experiment '" + s + "'");
}

struct DataParams {
  std::string generator;  // modular_addition | sparse_linear | margin_gaussian | multiplication_table
  std::int64_t p = 31;
  std::int64_t d = 0;
  std::int64_t k = 3;
  std::int64_t n_train = 0;
  std::int64_t n_test = 0;
  double gamma = 0.0;
  double train_fraction = 0.4;
  double observe_fraction = 0.25;
};

struct ModelParams {
  std::string kind;  // relu | diagonal | matrix_factorization
  std::int64_t width = 128;
};

struct SweepGrid {
  std::vector<double> alpha;
  std::vector<double> lambda;
  std::vector<std::uint64_t> seeds;
};

/// Thresholds for accuracy metrics are absolute; for loss metrics they are
/// fractions of the value at t = 0 and the metric must fall below them.
struct TransitionSpec {
  std::string metric = "test_acc";
  std::optional<double> low;  // default: chance + 0.05 for accuracies, 0.5 for losses
  double high = 0.95;
};

/// Analysis times in units of log(α)/λ.
struct AnalysisTimes {
  double alignment = 0.7;
  double kkt_begin = 1.0;
  double kkt_end = 1.3;
  double bound_end = 0.9;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::Custom;
  bool full_scale = false;
  std::uint64_t seed = 0;  // master seed
  DataParams data;
  ModelParams model;
  double alpha = 1.0;
  double sigma = 0.0;
  TrainConfig train;
  double horizon = 0.0;        // > 0: max_time = horizon·log(α)/λ
  double stability = 0.0;      // > 0 and dt ≤ 0: dt = suggest_dt(stability)
  double dt_max_lambda = 0.0;  // > 0: dt_max = dt_max_lambda/λ
  std::optional<SweepGrid> sweep;
  std::vector<std::string> analysis;
  TransitionSpec transition;
  AnalysisTimes times;
};

struct RunSpec {
  std::size_t index = 0;
  double alpha = 1.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
};

struct RunResult {
  RunSpec spec;
  TrajectoryLog log;
  bool diverged = false;
  std::string divergence_reason;
  std::optional<Transition> train_transition;
  std::optional<Transition> test_transition;
  std::map<std::string, double> metrics;  // final values and analysis outputs
  std::vector<std::string> notes;
  std::optional<BoundCurve> bound;
};

struct ScalingFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t points = 0;
};

struct SweepReport {
  ExperimentConfig config;
  std::vector<RunResult> runs;
  std::optional<ScalingFit> fit;
};

// ---- presets ----

inline ExperimentConfig preset(ExperimentKind kind, bool full_scale = false) {
  ExperimentConfig c;
  c.experiment = kind;
  c.full_scale = full_scale;
  c.train.log_factor = 1.1;
  switch (kind) {
    case ExperimentKind::ModAdd:
      c.data.generator = "modular_addition";
      c.data.p = full_scale ? 97 : 31;
      c.data.train_fraction = full_scale ? 0.4 : 0.8;
      c.model.kind = "relu";
      c.model.width = full_scale ? 1024 : 128;
      c.alpha = 1.0;
      c.train.loss = LossKind::CrossEntropy;
      c.train.lambda = full_scale ? 1e-4 : 3e-3;
      c.train.integrator = Integrator::Euler;
      c.train.dt = 1.0;
      c.train.max_time = full_scale ? 1e6 : 12000;
      c.train.log_start = 1.0;
      c.analysis = {"transition"};
      if (!full_scale) c.transition.high = 0.9;
      break;
    case ExperimentKind::SparseGrok:
      c.data.generator = "sparse_linear";
      c.data.d = full_scale ? 100000 : 400;
      c.data.k = 3;
      c.data.n_train = full_scale ? 256 : 128;
      c.data.n_test = 2000;
      c.model.kind = "diagonal";
      // full scale: initial parameter norm 128, ‖θ̄‖ = √(2d)
      c.alpha = full_scale ? 128.0 / std::sqrt(2.0 * 100000) : 64.0;
      c.train.loss = LossKind::Exponential;
      c.train.lambda = 1e-3;
      c.train.integrator = Integrator::Euler;
      c.train.dt = 0.0;
      c.stability = 0.04;
      c.train.lr_mode = LrMode::NormalizedByLoss;
      c.train.scale_aware = true;
      c.dt_max_lambda = 0.02;
      c.horizon = 2.0;
      c.analysis = {"transition", "kernel_alignment", "kkt", "bounds"};
      break;
    case ExperimentKind::Misgrok:
      c.data.generator = "margin_gaussian";
      c.data.d = full_scale ? 100000 : 64;
      c.data.n_train = 32;
      c.data.n_test = full_scale ? 256 : 2000;
      c.data.gamma = 25.0;
      c.model.kind = "diagonal";
      c.alpha = 64.0;
      c.train.loss = LossKind::Exponential;
      c.train.lambda = 1e-3;
      c.train.integrator = Integrator::Euler;
      c.train.dt = 0.0;
      c.stability = 0.04;
      c.train.lr_mode = LrMode::NormalizedByLoss;
      c.train.scale_aware = true;
      c.dt_max_lambda = 0.02;
      c.horizon = 3.0;
      c.analysis = {"transition"};
      break;
    case ExperimentKind::MatrixCompletion:
      c.data.generator = "multiplication_table";
      c.data.d = full_scale ? 97 : 32;
      c.data.observe_fraction = full_scale ? 0.05 : 0.25;
      c.model.kind = "matrix_factorization";
      c.alpha = full_scale ? 10.0 : 8.0;
      c.train.loss = LossKind::Squared;
      c.train.lambda = full_scale ? 1e-4 : 1e-3;
      c.train.integrator = Integrator::Euler;
      c.train.dt = 0.0;
      c.stability = 0.05;
      c.train.scale_aware = true;
      c.dt_max_lambda = 0.02;
      c.horizon = 3.0;
      c.times.alignment = 0.8;
      c.transition.metric = "test_loss";
      c.transition.high = 0.01;
      c.analysis = {"transition", "kernel_alignment", "kkt"};
      break;
    case ExperimentKind::Custom:
      break;
  }
  return c;
}

// ---- JSON config ----

namespace detail {

inline void check_keys(const Json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

inline Integrator integrator_from_string(const std::string& s) {
  if (s == "euler") return Integrator::Euler;
  if (s == "rk4") return Integrator::RK4;
  throw ConfigError("unknown integrator '" + s + "'");
}

inline LrMode lr_mode_from_string(const std::string& s) {
  if (s == "constant") return LrMode::Constant;
  if (s == "normalized") return LrMode::NormalizedByLoss;
  throw ConfigError("unknown lr_mode '" + s + "'");
}

inline BatchMode batch_from_string(const std::string& s) {
  if (s == "full") return BatchMode::Full;
  if (s == "single_sample") return BatchMode::SingleSample;
  throw ConfigError("unknown batch mode '" + s + "'");
}

inline const std::set<std::string>& analysis_names() {
  static const std::set<std::string> names{"kernel_alignment", "kkt", "transition", "bounds"};
  return names;
}

}  // namespace detail

/// Parses a config; keys not given take the preset values of `experiment`.
inline ExperimentConfig config_from_json(const Json& j) {
  detail::check_keys(j, "config",
                     {"experiment", "full_scale", "seed", "data", "model", "init", "train", "sweep", "analysis",
                      "transition", "times"});
  std::string kind = "custom";
  bool full = false;
  detail::read(j, "experiment", kind, "config");
  detail::read(j, "full_scale", full, "config");
  ExperimentConfig c = preset(experiment_from_string(kind), full);
  detail::read(j, "seed", c.seed, "config");

  if (j.contains("data")) {
    const Json& d = j["data"];
    detail::check_keys(d, "data",
                       {"generator", "p", "d", "k", "n_train", "n_test", "gamma", "train_fraction", "observe_fraction"});
    detail::read(d, "generator", c.data.generator, "data");
    detail::read(d, "p", c.data.p, "data");
    detail::read(d, "d", c.data.d, "data");
    detail::read(d, "k", c.data.k, "data");
    detail::read(d, "n_train", c.data.n_train, "data");
    detail::read(d, "n_test", c.data.n_test, "data");
    detail::read(d, "gamma", c.data.gamma, "data");
    detail::read(d, "train_fraction", c.data.train_fraction, "data");
    detail::read(d, "observe_fraction", c.data.observe_fraction, "data");
  }
  if (j.contains("model")) {
    const Json& m = j["model"];
    detail::check_keys(m, "model", {"kind", "width"});
    detail::read(m, "kind", c.model.kind, "model");
    detail::read(m, "width", c.model.width, "model");
  }
  if (j.contains("init")) {
    const Json& i = j["init"];
    detail::check_keys(i, "init", {"alpha", "sigma"});
    detail::read(i, "alpha", c.alpha, "init");
    detail::read(i, "sigma", c.sigma, "init");
  }
  if (j.contains("train")) {
    const Json& t = j["train"];
    detail::check_keys(t, "train",
                       {"loss", "lambda", "integrator", "dt", "max_time", "max_steps", "horizon", "stability",
                        "log_factor", "log_start", "lr_mode", "scale_aware", "dt_max", "dt_max_lambda",
                        "label_noise_std", "batch", "divergence_threshold"});
    std::string s;
    if (t.contains("loss")) {
      detail::read(t, "loss", s, "train");
      c.train.loss = loss_from_string(s);
    }
    if (t.contains("integrator")) {
      detail::read(t, "integrator", s, "train");
      c.train.integrator = detail::integrator_from_string(s);
    }
    if (t.contains("lr_mode")) {
      detail::read(t, "lr_mode", s, "train");
      c.train.lr_mode = detail::lr_mode_from_string(s);
    }
    if (t.contains("batch")) {
      detail::read(t, "batch", s, "train");
      c.train.batch = detail::batch_from_string(s);
    }
    detail::read(t, "lambda", c.train.lambda, "train");
    detail::read(t, "dt", c.train.dt, "train");
    detail::read(t, "max_time", c.train.max_time, "train");
    detail::read(t, "max_steps", c.train.max_steps, "train");
    detail::read(t, "horizon", c.horizon, "train");
    detail::read(t, "stability", c.stability, "train");
    detail::read(t, "log_factor", c.train.log_factor, "train");
    detail::read(t, "log_start", c.train.log_start, "train");
    detail::read(t, "scale_aware", c.train.scale_aware, "train");
    detail::read(t, "dt_max", c.train.dt_max, "train");
    detail::read(t, "dt_max_lambda", c.dt_max_lambda, "train");
    detail::read(t, "label_noise_std", c.train.label_noise_std, "train");
    detail::read(t, "divergence_threshold", c.train.divergence_threshold, "train");
    if (t.contains("max_time") && !t.contains("horizon")) c.horizon = 0.0;
    if (t.contains("dt") && c.train.dt > 0 && !t.contains("stability")) c.stability = 0.0;
    if (t.contains("dt_max") && !t.contains("dt_max_lambda")) c.dt_max_lambda = 0.0;
  }
  if (j.contains("sweep")) {
    const Json& s = j["sweep"];
    detail::check_keys(s, "sweep", {"alpha", "lambda", "seeds"});
    SweepGrid g;
    detail::read(s, "alpha", g.alpha, "sweep");
    detail::read(s, "lambda", g.lambda, "sweep");
    detail::read(s, "seeds", g.seeds, "sweep");
    for (const char* key : {"alpha", "lambda", "seeds"})
      if (s.contains(key) && s[key].empty()) throw ConfigError(std::string("sweep grid '") + key + "' is empty");
    if (g.alpha.empty() && g.lambda.empty() && g.seeds.empty()) throw ConfigError("sweep grid is empty");
    c.sweep = g;
  }
  if (j.contains("analysis")) {
    c.analysis.clear();
    detail::read(j, "analysis", c.analysis, "config");
    for (const auto& a : c.analysis)
      if (!detail::analysis_names().count(a)) throw ConfigError("unknown analysis '" + a + "'");
  }
  if (j.contains("transition")) {
    const Json& t = j["transition"];
    detail::check_keys(t, "transition", {"metric", "low", "high"});
    detail::read(t, "metric", c.transition.metric, "transition");
    detail::read(t, "high", c.transition.high, "transition");
    if (t.contains("low")) {
      double low = 0;
      detail::read(t, "low", low, "transition");
      c.transition.low = low;
    }
  }
  if (j.contains("times")) {
    const Json& t = j["times"];
    detail::check_keys(t, "times", {"alignment", "kkt_begin", "kkt_end", "bound_end"});
    detail::read(t, "alignment", c.times.alignment, "times");
    detail::read(t, "kkt_begin", c.times.kkt_begin, "times");
    detail::read(t, "kkt_end", c.times.kkt_end, "times");
    detail::read(t, "bound_end", c.times.bound_end, "times");
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j);
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["experiment"] = to_string(c.experiment);
  j["full_scale"] = c.full_scale;
  j["seed"] = c.seed;
  j["data"] = {{"generator", c.data.generator}, {"p", c.data.p}, {"d", c.data.d}, {"k", c.data.k},
               {"n_train", c.data.n_train}, {"n_test", c.data.n_test}, {"gamma", c.data.gamma},
               {"train_fraction", c.data.train_fraction}, {"observe_fraction", c.data.observe_fraction}};
  j["model"] = {{"kind", c.model.kind}, {"width", c.model.width}};
  j["init"] = {{"alpha", c.alpha}, {"sigma", c.sigma}};
  j["train"] = {{"loss", to_string(c.train.loss)},
                {"lambda", c.train.lambda},
                {"integrator", c.train.integrator == Integrator::RK4 ? "rk4" : "euler"},
                {"dt", c.train.dt},
                {"max_time", c.train.max_time},
                {"max_steps", c.train.max_steps},
                {"horizon", c.horizon},
                {"stability", c.stability},
                {"log_factor", c.train.log_factor},
                {"log_start", c.train.log_start},
                {"lr_mode", c.train.lr_mode == LrMode::NormalizedByLoss ? "normalized" : "constant"},
                {"scale_aware", c.train.scale_aware},
                {"dt_max", c.train.dt_max},
                {"dt_max_lambda", c.dt_max_lambda},
                {"label_noise_std", c.train.label_noise_std},
                {"batch", c.train.batch == BatchMode::SingleSample ? "single_sample" : "full"},
                {"divergence_threshold", c.train.divergence_threshold}};
  if (c.sweep) j["sweep"] = {{"alpha", c.sweep->alpha}, {"lambda", c.sweep->lambda}, {"seeds", c.sweep->seeds}};
  j["analysis"] = c.analysis;
  j["transition"] = {{"metric", c.transition.metric}, {"high", c.transition.high}};
  if (c.transition.low) j["transition"]["low"] = *c.transition.low;
  j["times"] = {{"alignment", c.times.alignment}, {"kkt_begin", c.times.kkt_begin}, {"kkt_end", c.times.kkt_end},
                {"bound_end", c.times.bound_end}};
  return j;
}

// ---- building blocks ----

inline LabeledDataset make_dataset(const DataParams& p, std::uint64_t seed) {
  if (p.generator == "modular_addition") return gen_modular_addition(p.p, p.train_fraction, seed);
  if (p.generator == "sparse_linear") return gen_sparse_linear(p.d, p.k, p.n_train, p.n_test, seed);
  if (p.generator == "margin_gaussian") return gen_margin_gaussian(p.d, p.n_train, p.gamma, seed, p.n_test);
  if (p.generator == "multiplication_table") return gen_multiplication_table(p.d, p.observe_fraction, seed);
  throw ConfigError("unknown data generator '" + p.generator + "'");
}

inline HomogeneousModel make_model(const ModelParams& m, const LabeledDataset& ds) {
  if (m.kind == "relu") {
    require(ds.task == Task::MultiClass, "the relu model expects modular-addition data");
    return HomogeneousModel::two_layer_relu(ds.meta.p, m.width);
  }
  if (m.kind == "diagonal") return HomogeneousModel::diagonal_linear(ds.input_dim());
  if (m.kind == "matrix_factorization") {
    require(ds.meta.d > 0, "matrix factorization needs matrix-completion data");
    return HomogeneousModel::matrix_factorization(ds.meta.d);
  }
  throw ConfigError("unknown model kind '" + m.kind + "'");
}

/// Grid points in (α, λ, seed) order; without a sweep, the single configured run.
inline std::vector<RunSpec> expand_grid(const ExperimentConfig& c) {
  std::vector<double> alphas{c.alpha}, lambdas{c.train.lambda};
  std::vector<std::uint64_t> seeds{c.seed};
  if (c.sweep) {
    if (!c.sweep->alpha.empty()) alphas = c.sweep->alpha;
    if (!c.sweep->lambda.empty()) lambdas = c.sweep->lambda;
    if (!c.sweep->seeds.empty()) seeds = c.sweep->seeds;
  }
  std::vector<RunSpec> out;
  for (double a : alphas)
    for (double l : lambdas)
      for (std::uint64_t s : seeds) out.push_back(RunSpec{out.size(), a, l, s});
  return out;
}

/// Time scale log(α)/λ of the kernel-to-rich transition.
inline double transition_scale(double alpha, double lambda) {
  require(alpha > 1 && lambda > 0, "log(alpha)/lambda needs alpha > 1 and lambda > 0");
  return std::log(alpha) / lambda;
}

namespace detail {

inline double chance_level(const LabeledDataset& ds) {
  return ds.task == Task::MultiClass ? 1.0 / static_cast<double>(ds.meta.p) : 0.5;
}

inline bool is_loss_metric(const std::string& metric) { return metric.find("loss") != std::string::npos; }

inline std::optional<Transition> find_transition(const TrajectoryLog& log, const std::string& metric,
                                                 std::optional<double> low, double high, double chance) {
  if (log.rows.empty()) return std::nullopt;
  if (!is_loss_metric(metric)) return detect_transition(log, metric, low.value_or(chance + 0.05), high);
  // falling loss: thresholds relative to the initial value
  const double v0 = metric_value(log.rows.front(), metric);
  std::vector<double> times, values;
  for (const auto& r : log.rows) {
    times.push_back(r.time);
    values.push_back(-metric_value(r, metric) / v0);
  }
  return detect_transition(times, values, -low.value_or(0.5), -high);
}

inline double cosine(const Vec& a, const Vec& b) {
  const double den = a.norm() * b.norm();
  return den > 0 ? a.dot(b) / den : 0.0;
}

inline Mat first_rows(const Mat& X, Eigen::Index n) { return X.topRows(std::min(n, X.rows())); }

}  // namespace detail

/// Trains one grid point and evaluates the requested analyses.
inline RunResult run_single(const ExperimentConfig& c, const RunSpec& spec) {
  RunResult res;
  res.spec = spec;
  const LabeledDataset ds = make_dataset(c.data, spec.seed);
  const HomogeneousModel model = make_model(c.model, ds);
  const InitSpec init{base_init(model, spec.seed), spec.alpha, c.sigma};
  const bool binary = ds.task == Task::BinaryClassification;
  const bool regression = ds.task == Task::Regression;
  const auto wants = [&](const char* name) {
    return std::find(c.analysis.begin(), c.analysis.end(), name) != c.analysis.end();
  };

  TrainConfig tc = c.train;
  tc.lambda = spec.lambda;
  double scale = std::numeric_limits<double>::quiet_NaN();
  if (spec.alpha > 1 && spec.lambda > 0) scale = transition_scale(spec.alpha, spec.lambda);
  if (c.horizon > 0) {
    require(std::isfinite(scale), "horizon needs alpha > 1 and lambda > 0");
    tc.max_time = c.horizon * scale;
  }
  if (c.dt_max_lambda > 0 && spec.lambda > 0) tc.dt_max = c.dt_max_lambda / spec.lambda;
  if (tc.dt <= 0) {
    require(c.stability > 0, "dt must be positive or a stability factor given");
    tc.dt = suggest_dt(model, init.base, ds, spec.alpha, c.stability);
  }
  const bool timed = std::isfinite(scale);
  if (timed && wants("kernel_alignment")) tc.snapshot_times.push_back(c.times.alignment * scale);
  if (timed && wants("kkt") && binary) tc.min_grad_window = TimeWindow{c.times.kkt_begin * scale, c.times.kkt_end * scale};
  if (timed && wants("bounds")) tc.forced_times.push_back(c.times.bound_end * scale);

  res.log = run(model, ds, init, tc, make_rng(c.seed, spec.index)());
  res.diverged = res.log.diverged;
  res.divergence_reason = res.log.divergence_reason;
  const auto& rows = res.log.rows;
  if (!rows.empty()) {
    const auto& last = rows.back();
    res.metrics["final_time"] = last.time;
    res.metrics["final_train_loss"] = last.train_loss;
    res.metrics["final_train_acc"] = last.train_acc;
    res.metrics["final_test_acc"] = last.test_acc;
    res.metrics["final_test_loss"] = last.test_loss;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& r : rows)
      if (std::isfinite(r.test_acc)) best = std::max(best, r.test_acc);
    if (std::isfinite(best)) res.metrics["max_test_acc"] = best;
  }
  res.metrics["steps"] = static_cast<double>(res.log.steps);
  res.metrics["dt"] = tc.dt;
  if (timed) res.metrics["log_alpha_over_lambda"] = scale;

  if (wants("transition")) {
    const double chance = detail::chance_level(ds);
    const std::string train_metric = regression ? "train_loss" : "train_acc";
    res.train_transition = detail::find_transition(res.log, train_metric, c.transition.low, c.transition.high, chance);
    res.test_transition =
        detail::find_transition(res.log, c.transition.metric, c.transition.low, c.transition.high, chance);
    if (res.train_transition) res.metrics["t_train"] = res.train_transition->t_star;
    if (res.test_transition) {
      res.metrics["t_test"] = res.test_transition->t_star;
      res.metrics["test_sharpness"] = res.test_transition->sharpness;
    }
  }

  if (wants("kernel_alignment") && timed) {
    const double ta = c.times.alignment * scale;
    const Snapshot* snap = nullptr;
    for (const auto& s : res.log.snapshots)
      if (std::abs(s.time - ta) <= 1e-9 * ta) snap = &s;
    if (!snap) {
      res.notes.push_back("kernel_alignment: run ended before the alignment time");
    } else if (model.is<DiagonalLinear>() && binary) {
      const Vec w = effective_weight(model, snap->theta);
      res.metrics["alignment_cosine_l2"] = detail::cosine(w, solve_l2_max_margin(ds).w);
      const KernelSystem sys = build_kernel_system(model, init.base, ds);
      const MarginSolution k1 = solve_kernel_svm(sys);
      const auto al = kernel_alignment(model, snap->theta, init.base, spec.alpha, spec.lambda, ta, sys, k1.h,
                                       detail::first_rows(ds.test.X, 256));
      res.metrics["alignment_deviation"] = al.max_deviation;
      res.metrics["alignment_cosine_h"] = al.cosine;
    } else if (model.is<MatrixFactorization>()) {
      // (j, i) is seen through the symmetric probe whenever (i, j) is observed
      const Mat W = completed_matrix(model, snap->theta);
      const Eigen::Index d = W.rows();
      std::vector<char> seen(static_cast<std::size_t>(d * d), 0);
      for (Eigen::Index r = 0; r < ds.train.X.rows(); ++r) {
        const auto i = static_cast<Eigen::Index>(ds.train.X(r, 0)), j = static_cast<Eigen::Index>(ds.train.X(r, 1));
        seen[static_cast<std::size_t>(i * d + j)] = seen[static_cast<std::size_t>(j * d + i)] = 1;
      }
      double unobserved = 0.0;
      for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j)
          if (!seen[static_cast<std::size_t>(i * d + j)]) unobserved = std::max(unobserved, std::abs(W(i, j)));
      res.metrics["max_unobserved_entry"] = unobserved;
    } else {
      res.notes.push_back("kernel_alignment: not defined for this model/task");
    }
  }

  if (wants("kkt")) {
    if (binary && res.log.min_grad) {
      const auto cert = kkt_residual_r1(model, res.log.min_grad->theta, ds);
      res.metrics["kkt_time"] = res.log.min_grad->time;
      for (const auto& [name, value] : cert.residuals) res.metrics["kkt_" + name] = value;
      if (model.is<DiagonalLinear>())
        res.metrics["kkt_cosine_l1"] =
            detail::cosine(effective_weight(model, res.log.min_grad->theta), solve_l1_max_margin(ds).w);
    } else if (regression) {
      const auto cert = kkt_residual_r2(model, res.log.final_theta, ds, spec.lambda);
      for (const auto& [name, value] : cert.residuals) res.metrics["kkt_" + name] = value;
      if (model.is<MatrixFactorization>() && ds.meta.target.size()) {
        const Mat W = completed_matrix(model, res.log.final_theta);
        res.metrics["recovery_error"] = (W - ds.meta.target).norm();
        res.metrics["target_norm"] = ds.meta.target.norm();
      }
    } else {
      res.notes.push_back("kkt: no snapshot in the minimum-gradient window");
    }
  }

  if (wants("bounds") && timed) {
    const double t_end = c.times.bound_end * scale;
    std::vector<double> times, losses;
    for (const auto& r : rows)
      if (r.time <= t_end * (1 + 1e-12)) {
        times.push_back(r.time);
        losses.push_back(r.train_loss);
      }
    if (binary && tc.loss == LossKind::Exponential) {
      const double gamma = solve_kernel_svm(build_kernel_system(model, init.base, ds)).margin_or_residual;
      res.bound = bound_curve(BoundKind::Classification, spec.alpha, spec.lambda, model.degree(), gamma,
                              ds.train.size(), times);
      res.metrics["gamma_ntk"] = gamma;
    } else if (regression && tc.loss == LossKind::Squared) {
      try {
        const KernelSystem sys = build_kernel_system(model, init.base, ds);
        res.bound = bound_curve(BoundKind::Regression, spec.alpha, spec.lambda, model.degree(), sys.nu_ntk,
                                ds.train.size(), times, ds.train.y.squaredNorm());
        res.metrics["nu_ntk"] = sys.nu_ntk;
      } catch (const NumericalError& e) {
        res.notes.push_back(std::string("bounds: ") + e.what());
      }
    } else {
      res.notes.push_back("bounds: needs exponential loss (binary) or squared loss (regression)");
    }
    if (res.bound) {
      double worst = 0.0;
      for (std::size_t i = 0; i < times.size(); ++i) worst = std::max(worst, losses[i] / res.bound->values[i]);
      res.metrics["bound_max_ratio"] = worst;
    }
  }
  return res;
}

// ---- scaling fit ----

/// Least-squares line t* ≈ slope·x + intercept.
inline ScalingFit fit_transition_scaling(const std::vector<double>& x, const std::vector<double>& t_star) {
  require(x.size() == t_star.size(), "fit inputs differ in length");
  if (x.size() < 4) throw ConfigError("transition scaling fit needs at least 4 points");
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += t_star[i];
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (t_star[i] - my);
    syy += (t_star[i] - my) * (t_star[i] - my);
  }
  require(sxx > 0, "transition scaling fit needs distinct predictor values");
  ScalingFit f;
  f.points = x.size();
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = t_star[i] - (f.slope * x[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = syy > 0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

/// Fit over non-diverged runs with a detected test transition.
inline ScalingFit fit_transition_scaling(const SweepReport& report) {
  std::vector<double> x, y;
  for (const auto& r : report.runs) {
    if (r.diverged || !r.test_transition || !(r.spec.alpha > 1 && r.spec.lambda > 0)) continue;
    x.push_back(transition_scale(r.spec.alpha, r.spec.lambda));
    y.push_back(r.test_transition->t_star);
  }
  return fit_transition_scaling(x, y);
}

// ---- output ----

inline Json to_json(const RunResult& r) {
  Json j;
  j["index"] = r.spec.index;
  j["alpha"] = r.spec.alpha;
  j["lambda"] = r.spec.lambda;
  j["seed"] = r.spec.seed;
  j["diverged"] = r.diverged;
  if (r.diverged) j["divergence_reason"] = r.divergence_reason;
  Json m = Json::object();
  for (const auto& [k, v] : r.metrics) m[k] = std::isfinite(v) ? Json(v) : Json(nullptr);
  j["metrics"] = m;
  auto tr = [](const std::optional<Transition>& t) -> Json {
    if (!t) return nullptr;
    return {{"t_star", t->t_star}, {"t_low", t->t_low}, {"sharpness", t->sharpness}};
  };
  j["train_transition"] = tr(r.train_transition);
  j["test_transition"] = tr(r.test_transition);
  j["notes"] = r.notes;
  return j;
}

inline Json to_json(const SweepReport& rep) {
  Json j;
  j["config"] = to_json(rep.config);
  j["runs"] = Json::array();
  for (const auto& r : rep.runs) j["runs"].push_back(to_json(r));
  Json table = Json::array();
  for (const auto& r : rep.runs)
    table.push_back({{"alpha", r.spec.alpha},
                     {"lambda", r.spec.lambda},
                     {"seed", r.spec.seed},
                     {"t_star", r.test_transition ? Json(r.test_transition->t_star) : Json(nullptr)}});
  j["transition_table"] = table;
  if (rep.fit)
    j["fit"] = {{"slope", rep.fit->slope}, {"intercept", rep.fit->intercept}, {"r2", rep.fit->r2},
                {"points", rep.fit->points}};
  else
    j["fit"] = nullptr;
  return j;
}

/// Reads rows written by write_metrics_csv (columns beyond the header are ignored).
inline TrajectoryLog read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != metrics_csv_header()) throw ConfigError("not a metrics.csv file");
  TrajectoryLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        v.push_back(cell == "nan" || cell == "-nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError("bad number '" + cell + "' in metrics.csv");
      }
    }
    if (v.size() != 10) throw ConfigError("metrics.csv row has " + std::to_string(v.size()) + " columns");
    TrajectoryRow r;
    r.step = static_cast<std::int64_t>(v[0]);
    r.time = v[1];
    r.train_loss = v[2];
    r.reg_loss = v[3];
    r.train_acc = v[4];
    r.test_acc = v[5];
    r.test_loss = v[6];
    r.param_norm = v[7];
    r.dir_dist = v[8];
    r.min_margin = v[9];
    log.rows.push_back(r);
  }
  return log;
}

/// Accuracy and loss charts, plus a bound overlay when a bound curve is given.
inline std::vector<std::filesystem::path> emit_plots(const TrajectoryLog& log, const std::filesystem::path& out_dir,
                                                     const std::optional<BoundCurve>& bound = std::nullopt) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create " + out_dir.string());
  Series tr_acc{"train acc", {}, {}, "#1f77b4"}, te_acc{"test acc", {}, {}, "#d62728"};
  Series tr_loss{"train loss", {}, {}, "#1f77b4"}, te_loss{"test loss", {}, {}, "#d62728"};
  for (const auto& r : log.rows) {
    for (Series* s : {&tr_acc, &te_acc, &tr_loss, &te_loss}) s->x.push_back(r.time);
    tr_acc.y.push_back(r.train_acc);
    te_acc.y.push_back(r.test_acc);
    tr_loss.y.push_back(r.train_loss);
    te_loss.y.push_back(r.test_loss);
  }
  std::vector<std::filesystem::path> files;
  const auto acc_path = out_dir / "accuracy.svg";
  write_text_file(acc_path, render_svg({"accuracy", "accuracy", false}, {tr_acc, te_acc}));
  files.push_back(acc_path);
  const auto loss_path = out_dir / "loss.svg";
  write_text_file(loss_path, render_svg({"loss", "loss", true}, {tr_loss, te_loss}));
  files.push_back(loss_path);
  if (bound) {
    Series sim{"simulated loss", {}, {}, "#1f77b4"};
    for (const auto& r : log.rows)
      if (!bound->times.empty() && r.time <= bound->times.back()) {
        sim.x.push_back(r.time);
        sim.y.push_back(r.train_loss);
      }
    Series b{"upper bound", bound->times, bound->values, "#2ca02c"};
    const auto path = out_dir / "bound.svg";
    write_text_file(path, render_svg({"loss vs bound", "loss", true}, {sim, b}));
    files.push_back(path);
  }
  return files;
}

inline void write_run_outputs(const RunResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create " + dir.string());
  std::ostringstream csv;
  write_metrics_csv(csv, r.log);
  write_text_file(dir / "metrics.csv", csv.str());
  write_text_file(dir / "summary.json", to_json(r).dump(2) + "\n");
}

inline std::string run_dir_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run_%04zu", index);
  return buf;
}

/// Runs every grid point on `threads` workers (results are independent of the
/// thread count), fits the transition scaling when possible and, if out_dir is
/// nonempty, writes per-run metrics.csv/summary.json/plots and report.json.
inline SweepReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir = {},
                                  unsigned threads = 1) {
  const std::vector<RunSpec> grid = expand_grid(config);
  require(!grid.empty(), "sweep grid is empty");
  SweepReport rep;
  rep.config = config;
  rep.runs.resize(grid.size());
  std::vector<std::string> errors(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      try {
        rep.runs[i] = run_single(config, grid[i]);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(grid.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) throw ConfigError("run " + std::to_string(i) + ": " + errors[i]);

  try {
    rep.fit = fit_transition_scaling(rep);
  } catch (const ConfigError&) {
    rep.fit.reset();
  }
  if (!out_dir.empty()) {
    for (const auto& r : rep.runs) {
      const auto dir = out_dir / run_dir_name(r.spec.index);
      write_run_outputs(r, dir);
      emit_plots(r.log, dir, r.bound);
    }
    write_text_file(out_dir / "report.json", to_json(rep).dump(2) + "\n");
  }
  return rep;
}

}  // namespace grokking

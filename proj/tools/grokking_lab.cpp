// grokking-lab: command-line front end for training runs, sweeps, reference
// solvers, certificates, bounds and plots.

#include "grokking/grokking.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace grokking;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kCertificate = 4 };

Json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

void emit(const Json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  const fs::path p(out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_text_file(p, j.dump(2) + "\n");
}

ExperimentConfig load(const std::string& config, std::optional<std::uint64_t> seed) {
  ExperimentConfig c = load_config(config);
  if (seed) c.seed = *seed;
  return c;
}

Json theta_to_json(const ParamVector& th) {
  return {{"model_id", th.model_id}, {"values", std::vector<double>(th.values.data(), th.values.data() + th.size())}};
}

ParamVector theta_from_json(const Json& j) {
  try {
    const auto v = j.at("values").get<std::vector<double>>();
    return ParamVector(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())),
                       j.value("model_id", std::string{}));
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("theta file needs a 'values' array");
  }
}

HomogeneousModel model_for(const std::string& kind, const LabeledDataset& ds, std::int64_t width) {
  ModelParams mp;
  mp.kind = kind;
  mp.width = width;
  if (mp.kind.empty()) mp.kind = ds.task == Task::Regression ? "matrix_factorization" : "diagonal";
  return make_model(mp, ds);
}

LabeledDataset dataset_from_file(const std::string& path) { return dataset_from_json(read_json(path)); }

int cmd_train(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  ExperimentConfig c = load(config, seed);
  RunSpec spec = expand_grid(c).front();
  if (seed) spec.seed = *seed;
  RunResult r = run_single(c, spec);
  if (!out.empty()) {
    const fs::path dir(out);
    write_run_outputs(r, dir);
    emit_plots(r.log, dir, r.bound);
    write_text_file(dir / "theta.json", theta_to_json(r.log.final_theta).dump() + "\n");
    write_text_file(dir / "data.json", to_json(make_dataset(c.data, spec.seed)).dump() + "\n");
  }
  std::cout << to_json(r).dump(2) << '\n';
  if (r.diverged) {
    std::cerr << "run diverged: " << r.divergence_reason << '\n';
    return kDivergence;
  }
  return kOk;
}

int cmd_sweep(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed, unsigned threads) {
  const ExperimentConfig c = load(config, seed);
  const SweepReport rep = run_experiment(c, out, threads);
  Json summary = to_json(rep);
  summary.erase("config");
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

int cmd_kernel_solve(const std::string& data, const std::string& model_kind, std::int64_t width,
                     const std::string& out) {
  const LabeledDataset ds = dataset_from_file(data);
  const HomogeneousModel model = model_for(model_kind, ds, width);
  const ParamVector base = base_init(model);
  const KernelSystem sys = build_kernel_system(model, base, ds);
  const MarginSolution sol =
      ds.task == Task::BinaryClassification ? solve_kernel_svm(sys) : solve_kernel_regression(sys);
  Json j{{"model", model.id()},
         {"task", to_string(ds.task)},
         {"h", std::vector<double>(sol.h.data(), sol.h.data() + sol.h.size())},
         {"coefficients", std::vector<double>(sol.coefficients.data(), sol.coefficients.data() + sol.coefficients.size())},
         {"iterations", sol.iterations},
         {"converged", sol.converged},
         {"nu_ntk", sys.nu_ntk}};
  if (ds.task == Task::BinaryClassification)
    j["gamma_ntk"] = sol.margin_or_residual;
  else
    j["residual"] = sol.margin_or_residual;
  emit(j, out);
  return kOk;
}

int cmd_ref_solve(const std::string& data, const std::string& norm, const std::string& out) {
  const LabeledDataset ds = dataset_from_file(data);
  Json j;
  if (norm == "nuclear") {
    const auto sol = solve_min_nuclear(ds, ds.meta.d);
    j = {{"kind", "nuclear"},
         {"W", detail::matrix_to_json(sol.W)},
         {"nuclear_norm", sol.nuclear_norm},
         {"feasibility_residual", sol.feasibility_residual},
         {"tau", sol.tau},
         {"matched_lambda", sol.matched_lambda},
         {"iterations", sol.iterations}};
    if (ds.meta.target.size()) j["relative_error"] = (sol.W - ds.meta.target).norm() / ds.meta.target.norm();
  } else if (norm == "l1" || norm == "l2") {
    const auto sol = norm == "l1" ? solve_l1_max_margin(ds) : solve_l2_max_margin(ds);
    std::vector<std::int64_t> support(sol.support_set.begin(), sol.support_set.end());
    j = {{"kind", norm},
         {"w", std::vector<double>(sol.w.data(), sol.w.data() + sol.w.size())},
         {"margin", sol.margin},
         {"support_set", support}};
    if (norm == "l1") j["pivots"] = sol.lp.pivots;
  } else {
    throw ConfigError("unknown norm '" + norm + "' (l1, l2, nuclear)");
  }
  emit(j, out);
  return kOk;
}

int cmd_certify(const std::string& kind, const std::string& theta, const std::string& data, double lambda,
                const std::string& model_kind, std::int64_t width, double tolerance, const std::string& out) {
  const LabeledDataset ds = dataset_from_file(data);
  const Json tj = read_json(theta);
  Certificate cert;
  if (kind == "nuclear") {
    require(lambda > 0, "nuclear certificate needs --lambda > 0");
    const Mat W = tj.contains("W") ? detail::matrix_from_json(tj["W"]) : detail::matrix_from_json(tj);
    cert = nuclear_subgrad_certificate(W, ds, lambda, tolerance > 0 ? tolerance : 1e-4);
  } else {
    const HomogeneousModel model = model_for(model_kind, ds, width);
    const ParamVector th = theta_from_json(tj);
    if (kind == "r1")
      cert = kkt_residual_r1(model, th, ds, tolerance > 0 ? tolerance : 1e-6);
    else if (kind == "r2")
      cert = kkt_residual_r2(model, th, ds, lambda, tolerance > 0 ? tolerance : 1e-6);
    else
      throw ConfigError("unknown certificate kind '" + kind + "' (r1, r2, nuclear)");
  }
  Json j{{"kind", to_string(cert.kind)}, {"tolerance", cert.tolerance}, {"passed", cert.passed}};
  Json res = Json::object();
  for (const auto& [name, value] : cert.residuals) res[name] = std::isfinite(value) ? Json(value) : Json(nullptr);
  j["residuals"] = res;
  if (cert.multipliers)
    j["multipliers"] = std::vector<double>(cert.multipliers->data(), cert.multipliers->data() + cert.multipliers->size());
  emit(j, out);
  return cert.passed ? kOk : kCertificate;
}

int cmd_bounds(const std::string& kind, double alpha, double lambda, int L, double gamma_or_nu, std::int64_t n,
               double y_sq, double t_max, int points, const std::string& out) {
  BoundKind bk;
  if (kind == "classification")
    bk = BoundKind::Classification;
  else if (kind == "regression")
    bk = BoundKind::Regression;
  else
    throw ConfigError("unknown bound kind '" + kind + "'");
  require(points >= 2 && t_max > 0, "bounds needs --points >= 2 and --t-max > 0");
  std::vector<double> times;
  for (int i = 0; i < points; ++i) times.push_back(t_max * i / (points - 1));
  const BoundCurve c = bound_curve(bk, alpha, lambda, L, gamma_or_nu, n, times, y_sq);
  std::ostringstream os;
  os << "time,bound\n";
  char buf[64];
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.12g,%.12g\n", c.times[i], c.values[i]);
    os << buf;
  }
  if (out.empty())
    std::cout << os.str();
  else
    write_text_file(out, os.str());
  return kOk;
}

int cmd_plot(const std::string& metrics, const std::string& out) {
  std::ifstream is(metrics);
  if (!is) throw ConfigError("cannot open " + metrics);
  const TrajectoryLog log = read_metrics_csv(is);
  for (const auto& f : emit_plots(log, out.empty() ? fs::path(metrics).parent_path() : fs::path(out)))
    std::cout << f.string() << '\n';
  return kOk;
}

int cmd_gen_data(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  const ExperimentConfig c = load(config, seed);
  emit(to_json(make_dataset(c.data, c.seed)), out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grokking-lab: kernel-to-rich transition experiments"};
  app.require_subcommand(1);

  std::string config, out, data, theta, kind, norm = "l1", model_kind, metrics;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  double lambda = 0, alpha = 64, gamma_or_nu = 0.1, y_sq = 0, t_max = 0, tolerance = 0;
  int L = 2, points = 101;
  std::int64_t n = 1, width = 128;

  auto* train = app.add_subcommand("train", "train one configuration");
  train->add_option("--config", config, "experiment config (JSON)")->required();
  train->add_option("--out", out, "output directory");
  train->add_option("--seed", seed, "master seed override");

  auto* sweep = app.add_subcommand("sweep", "run the configured (alpha, lambda, seed) grid");
  sweep->add_option("--config", config, "experiment config (JSON)")->required();
  sweep->add_option("--out", out, "output directory");
  sweep->add_option("--seed", seed, "master seed override");
  sweep->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

  auto* kernel = app.add_subcommand("kernel-solve", "solve the NTK margin or interpolation problem");
  kernel->add_option("--data", data, "dataset JSON")->required();
  kernel->add_option("--model", model_kind, "diagonal | matrix_factorization");
  kernel->add_option("--out", out, "output JSON file");

  auto* ref = app.add_subcommand("ref-solve", "solve a reference problem");
  ref->add_option("--data", data, "dataset JSON")->required();
  ref->add_option("--norm", norm, "l1 | l2 | nuclear");
  ref->add_option("--out", out, "output JSON file");

  auto* certify = app.add_subcommand("certify", "check first-order optimality");
  certify->add_option("--kind", kind, "r1 | r2 | nuclear")->required();
  certify->add_option("--theta", theta, "parameter JSON (or W matrix for nuclear)")->required();
  certify->add_option("--data", data, "dataset JSON")->required();
  certify->add_option("--lambda", lambda, "weight decay (r2, nuclear)");
  certify->add_option("--model", model_kind, "relu | diagonal | matrix_factorization");
  certify->add_option("--width", width, "relu hidden width");
  certify->add_option("--tolerance", tolerance, "pass tolerance");
  certify->add_option("--out", out, "output JSON file");

  auto* bounds = app.add_subcommand("bounds", "evaluate the kernel-regime loss upper bound");
  bounds->add_option("--kind", kind, "classification | regression")->required();
  bounds->add_option("--alpha", alpha, "initialization scale");
  bounds->add_option("--lambda", lambda, "weight decay")->required();
  bounds->add_option("-L,--degree", L, "homogeneity degree");
  bounds->add_option("--gamma,--nu", gamma_or_nu, "NTK margin or least kernel eigenvalue");
  bounds->add_option("-n,--samples", n, "training samples");
  bounds->add_option("--y-sq-norm", y_sq, "squared label norm (regression)");
  bounds->add_option("--t-max", t_max, "last time")->required();
  bounds->add_option("--points", points, "grid points");
  bounds->add_option("--out", out, "output CSV file");

  auto* plot = app.add_subcommand("plot", "render SVG charts from metrics.csv");
  plot->add_option("--metrics", metrics, "metrics.csv")->required();
  plot->add_option("--out", out, "output directory");

  auto* gen = app.add_subcommand("gen-data", "write the configured dataset as JSON");
  gen->add_option("--config", config, "experiment config (JSON)")->required();
  gen->add_option("--out", out, "output JSON file");
  gen->add_option("--seed", seed, "seed override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(config, out, seed);
    if (*sweep) return cmd_sweep(config, out, seed, threads);
    if (*kernel) return cmd_kernel_solve(data, model_kind, width, out);
    if (*ref) return cmd_ref_solve(data, norm, out);
    if (*certify) return cmd_certify(kind, theta, data, lambda, model_kind, width, tolerance, out);
    if (*bounds) return cmd_bounds(kind, alpha, lambda, L, gamma_or_nu, n, y_sq, t_max, points, out);
    if (*plot) return cmd_plot(metrics, out);
    if (*gen) return cmd_gen_data(config, out, seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: malformed JSON input: " << e.what() << '\n';
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

// gknet command line: simulation, identification, training and benchmark
// sweeps for the graph state-space toolkit.

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <nlohmann/json.hpp>

#include "gknet/bench.hpp"
#include "gknet/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gknet;

namespace {

// Flat configuration with a strict key schema; dotted names are plain keys.
class FlatConfig {
 public:
  FlatConfig(json values, std::set<std::string> allowed)
      : values_(std::move(values)), allowed_(std::move(allowed)) {
    for (const auto& [key, value] : values_.items())
      if (!allowed_.contains(key))
        throw ConfigError("unknown config key: " + key);
  }

  static FlatConfig load(const std::string& path,
                         const std::vector<std::string>& overrides,
                         std::set<std::string> allowed) {
    json values = json::object();
    if (!path.empty()) {
      std::ifstream in(path);
      if (!in) throw ConfigError("cannot open config file: " + path);
      try {
        in >> values;
      } catch (const json::exception& err) {
        throw ConfigError(std::string("config parse error: ") + err.what());
      }
      if (!values.is_object()) throw ConfigError("config must be an object");
    }
    for (const std::string& entry : overrides) {
      const auto eq = entry.find('=');
      if (eq == std::string::npos)
        throw ConfigError("override must be key=value: " + entry);
      const std::string key = entry.substr(0, eq);
      const std::string raw = entry.substr(eq + 1);
      try {
        values[key] = json::parse(raw);
      } catch (const json::exception&) {
        values[key] = raw;  // plain string
      }
    }
    return FlatConfig(std::move(values), std::move(allowed));
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  double num(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    if (!values_[key].is_number())
      throw ConfigError("config key must be numeric: " + key);
    return values_[key].get<double>();
  }
  int integer(const std::string& key, int fallback) const {
    return static_cast<int>(num(key, fallback));
  }
  std::string str(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    if (!values_[key].is_string())
      throw ConfigError("config key must be a string: " + key);
    return values_[key].get<std::string>();
  }
  std::vector<double> list(const std::string& key,
                           std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    if (!values_[key].is_array())
      throw ConfigError("config key must be an array: " + key);
    return values_[key].get<std::vector<double>>();
  }
  std::vector<int> int_list(const std::string& key,
                            std::vector<int> fallback) const {
    if (!has(key)) return fallback;
    if (!values_[key].is_array())
      throw ConfigError("config key must be an array: " + key);
    return values_[key].get<std::vector<int>>();
  }

  json& raw() { return values_; }
  const json& raw() const { return values_; }

 private:
  json values_;
  std::set<std::string> allowed_;
};

struct GlobalArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir = "out";
  std::string preset = "desk";
  int threads = 1;
};

void echo_config(const json& resolved, const std::string& out_dir,
                 const std::string& command) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / (command + "_config_echo.json"));
  out << resolved.dump(2) << "\n";
}

Graph graph_from_config(const FlatConfig& cfg, std::uint64_t seed) {
  if (cfg.has("graph_file")) return read_edge_list(cfg.str("graph_file", ""));
  const int n = cfg.integer("graph_nodes", 16);
  const double p = cfg.num("graph_p", 0.2);
  return erdos_renyi(n, p, seed);
}

StateSpaceModel model_from_config(const FlatConfig& cfg, const Graph& g) {
  StateSpaceModel model;
  model.graph = g;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(g.dense_laplacian());
  const double lmax = std::max(es.eigenvalues().maxCoeff(), 1e-12);
  model.c = cfg.num("c", 0.5 / lmax);
  const auto h = cfg.list("h", {1.0, -0.3, 0.05});
  model.obs_filter.coeffs = h;
  model.obs_filter.op = cfg.str("filter_operator", "laplacian") ==
                                "normalized-laplacian"
                            ? OperatorKind::kNormalizedLaplacian
                            : OperatorKind::kLaplacian;
  const auto alpha_list = cfg.list("alpha", {});
  if (alpha_list.empty()) {
    model.alpha =
        VectorXd::Constant(g.num_edges(), cfg.num("alpha_uniform", 0.3));
  } else {
    if (static_cast<int>(alpha_list.size()) != g.num_edges())
      throw DataError("alpha list length != edge count");
    model.alpha = Eigen::Map<const VectorXd>(alpha_list.data(),
                                             alpha_list.size());
  }
  model.sigma2 = cfg.num("sigma2", 0.02);
  model.sigma0_2 = cfg.num("sigma0_2", 1.0);
  model.transition_mode = cfg.str("transition_mode", "euler") == "euler"
                              ? TransitionMode::kEuler
                              : TransitionMode::kPaperLiteral;
  model.dt = cfg.num("dt", 1.0);
  const auto mask = cfg.int_list("mask", {});
  model.mask = mask;
  return model;
}

int cmd_simulate(const GlobalArgs& args) {
  auto cfg = FlatConfig::load(
      args.config_path, args.overrides,
      {"graph_file", "graph_nodes", "graph_p", "c", "h", "alpha",
       "alpha_uniform", "sigma2", "sigma0_2", "transition_mode", "dt", "mask",
       "steps", "seed", "filter_operator", "write_dataset"});
  const std::uint64_t seed =
      args.seed_given ? args.seed
                      : static_cast<std::uint64_t>(cfg.num("seed", 0));
  Rng root(seed);
  Rng graph_rng = root.substream("graph");
  const Graph g = graph_from_config(cfg, graph_rng.next_u64());
  const StateSpaceModel model = model_from_config(cfg, g);
  const int steps = cfg.integer("steps", 100);
  Rng noise_rng = root.substream("noise");
  const Trajectory traj = simulate(model, steps, noise_rng.next_u64());

  fs::create_directories(args.out_dir);
  write_edge_list(g, (fs::path(args.out_dir) / "graph.edges").string());
  write_trajectory_csv(traj.states,
                       (fs::path(args.out_dir) / "states.csv").string(), 0, {});
  write_trajectory_csv(traj.observations,
                       (fs::path(args.out_dir) / "observations.csv").string(),
                       1, model.observed_nodes());
  if (cfg.raw().value("write_dataset", true)) {
    Dataset dataset;
    dataset.graph = g;
    dataset.signal = MatrixXd::Zero(g.num_nodes(), steps);
    const auto observed = model.observed_nodes();
    dataset.mask = MatrixXd::Zero(g.num_nodes(), steps);
    for (std::size_t r = 0; r < observed.size(); ++r) {
      dataset.signal.row(observed[r]) = traj.observations.row(r);
      dataset.mask.row(observed[r]).setOnes();
    }
    write_dataset(dataset, args.out_dir, "dataset");
  }
  json resolved = cfg.raw();
  resolved["seed"] = seed;
  echo_config(resolved, args.out_dir, "simulate");
  std::cout << "simulate: wrote states.csv, observations.csv and dataset to "
            << args.out_dir << "\n";
  return 0;
}

int cmd_fit(const GlobalArgs& args, bool use_grad) {
  auto cfg = FlatConfig::load(
      args.config_path, args.overrides,
      {"manifest", "order", "c", "em_iters", "warmup_iters", "newton_steps",
       "mstep", "rel_tol", "alpha_floor", "sigma0_2", "seed", "learn_c",
       "train_fraction"});
  if (!cfg.has("manifest")) throw ConfigError("fit: missing manifest");
  const Dataset dataset = read_dataset(cfg.str("manifest", ""));
  const std::uint64_t seed =
      args.seed_given ? args.seed
                      : static_cast<std::uint64_t>(cfg.num("seed", 0));

  // observed nodes: rows of the mask that are fully on
  std::vector<int> observed;
  for (int i = 0; i < dataset.signal.rows(); ++i)
    if (dataset.mask.row(i).minCoeff() > 0.5) observed.push_back(i);
  if (observed.empty()) throw DataError("fit: no fully observed nodes");
  const double fraction = cfg.num("train_fraction", dataset.train_fraction);
  const int train_end =
      std::max(2, static_cast<int>(fraction * dataset.signal.cols()));
  MatrixXd obs(observed.size(), train_end);
  for (std::size_t r = 0; r < observed.size(); ++r)
    obs.row(r) = dataset.signal.row(observed[r]).head(train_end);

  Eigen::SelfAdjointEigenSolver<MatrixXd> es(dataset.graph.dense_laplacian());
  const double lmax = std::max(es.eigenvalues().maxCoeff(), 1e-12);
  StateSpaceModel init =
      default_init(dataset.graph, obs, cfg.integer("order", 2),
                   cfg.num("c", 0.5 / lmax), observed,
                   cfg.num("sigma0_2", 1.0));
  EMConfig em_config;
  em_config.max_iters = cfg.integer("em_iters", 80);
  em_config.warmup_iters = cfg.integer("warmup_iters", 10);
  em_config.newton_steps = cfg.integer("newton_steps", 4);
  em_config.mstep = cfg.str("mstep", "newton") == "gradient"
                        ? EMConfig::MStep::kGradient
                        : EMConfig::MStep::kNewton;
  em_config.rel_tol = cfg.num("rel_tol", 1e-8);
  em_config.alpha_floor = cfg.num("alpha_floor", 1e-4);
  em_config.sigma0_2 = cfg.num("sigma0_2", 1.0);
  em_config.learn_c = cfg.raw().value("learn_c", use_grad);

  const FitResult fit = use_grad
                            ? grad_fit(obs, dataset.graph, em_config, init)
                            : em_fit(obs, dataset.graph, em_config, init);
  fs::create_directories(args.out_dir);
  const std::string name = use_grad ? "model_grad.json" : "model_em.json";
  write_model_json(fit, dataset.graph_file,
                   (fs::path(args.out_dir) / name).string());
  json resolved = cfg.raw();
  resolved["seed"] = seed;
  echo_config(resolved, args.out_dir, use_grad ? "fit-grad" : "fit-em");
  std::cout << (use_grad ? "fit-grad" : "fit-em")
            << ": final observed NLL = " << fit.final_observed_nll
            << ", wrote " << name << "\n";
  return 0;
}

GKNetConfig arch_from_config(const FlatConfig& cfg, const std::string& task) {
  GKNetConfig arch;
  if (task == "forecast") {
    arch.encoder.widths = {1, 16, 2};
    arch.encoder.order = 3;
    arch.decoder.widths = {1, 16, 1};
    arch.decoder.order = 3;
    arch.kalman_order = 3;
    arch.lambda = 0.05;
  } else if (task == "impute") {
    arch.encoder.widths = {1, 8, 2};
    arch.encoder.order = 2;
    arch.decoder.widths = {1, 8, 1};
    arch.decoder.order = 2;
    arch.kalman_order = 2;
    arch.lambda = 0.15;
  } else {  // tracking
    arch.encoder.widths = {1, 16, 8, 2};
    arch.encoder.order = 2;
    arch.decoder.widths = {1, 16, 8, 1};
    arch.decoder.order = 2;
    arch.kalman_order = 2;
    arch.lambda = 0.025;
  }
  if (cfg.has("encoder_widths"))
    arch.encoder.widths = cfg.int_list("encoder_widths", arch.encoder.widths);
  if (cfg.has("decoder_widths"))
    arch.decoder.widths = cfg.int_list("decoder_widths", arch.decoder.widths);
  arch.encoder.order = cfg.integer("encoder_order", arch.encoder.order);
  arch.decoder.order = cfg.integer("decoder_order", arch.decoder.order);
  arch.kalman_order = cfg.integer("kalman_order", arch.kalman_order);
  arch.lambda = cfg.num("lambda", arch.lambda);
  arch.water_variant = cfg.raw().value("water_variant", false);
  arch.gate = cfg.str("gate", "sigmoid") == "paper-literal-relu"
                  ? GateMode::kPaperLiteralRelu
                  : GateMode::kSigmoid;
  return arch;
}

int cmd_train_gknet(const GlobalArgs& args) {
  auto cfg = FlatConfig::load(
      args.config_path, args.overrides,
      {"manifest", "task", "horizon", "observation_ratio", "epochs",
       "batch_size", "learning_rate", "patience", "max_batches_per_epoch",
       "seed", "encoder_widths", "decoder_widths", "encoder_order",
       "decoder_order", "kalman_order", "lambda", "water_variant", "gate",
       "window"});
  if (!cfg.has("manifest")) throw ConfigError("train-gknet: missing manifest");
  Dataset dataset = read_dataset(cfg.str("manifest", ""));
  const std::string task = cfg.str("task", "forecast");
  const std::uint64_t seed =
      args.seed_given ? args.seed
                      : static_cast<std::uint64_t>(cfg.num("seed", 0));
  dataset.window = cfg.integer("window", dataset.window);

  TaskConfig tcfg;
  tcfg.dataset = dataset;
  tcfg.seed = seed;
  tcfg.epochs = cfg.integer("epochs", 60);
  tcfg.batch_size = cfg.integer("batch_size", 32);
  tcfg.learning_rate = cfg.num("learning_rate", 1e-3);
  tcfg.patience = cfg.integer("patience", 10);
  tcfg.max_batches_per_epoch = cfg.integer("max_batches_per_epoch", 0);
  tcfg.arch = arch_from_config(cfg, task);

  // train a standalone model on the dataset's training split and persist it
  const int n = dataset.graph.num_nodes();
  const int total = static_cast<int>(dataset.signal.cols());
  const int horizon = cfg.integer("horizon", dataset.horizon);
  const int window = std::max(dataset.window, std::max(horizon, 2));
  const int usable = total - horizon;
  const MatrixXd inputs =
      dataset.signal.leftCols(usable).cwiseProduct(dataset.mask.leftCols(usable));
  const MatrixXd targets = dataset.signal.middleCols(horizon, usable);
  const MatrixXd target_mask = dataset.mask.middleCols(horizon, usable);
  const int train_end = std::max(
      window + 1, static_cast<int>(dataset.train_fraction * usable));
  const int val_end = std::max(
      train_end + window,
      static_cast<int>((dataset.train_fraction + dataset.val_fraction) *
                       usable));

  std::vector<TrainWindow> train_windows, val_windows;
  for (int start = 0; start + window <= train_end; start += window) {
    TrainWindow w;
    w.inputs = inputs.middleCols(start, window);
    w.targets = targets.middleCols(start, window);
    w.target_mask = target_mask.middleCols(start, window);
    train_windows.push_back(std::move(w));
  }
  for (int start = train_end; start + window <= std::min(val_end, usable);
       start += window) {
    TrainWindow w;
    w.inputs = inputs.middleCols(start, window);
    w.targets = targets.middleCols(start, window);
    w.target_mask = target_mask.middleCols(start, window);
    val_windows.push_back(std::move(w));
  }
  if (train_windows.empty())
    throw DataError("train-gknet: training split has no complete window");

  Rng root(seed);
  Rng init_rng = root.substream("init");
  GKNetModel model(dataset.graph, tcfg.arch, init_rng.next_u64());
  TrainConfig tc;
  tc.epochs = tcfg.epochs;
  tc.batch_size = tcfg.batch_size;
  tc.learning_rate = tcfg.learning_rate;
  tc.patience = tcfg.patience;
  tc.max_batches_per_epoch = tcfg.max_batches_per_epoch;
  Rng train_rng = root.substream("train");
  tc.seed = train_rng.next_u64();
  const TrainResult result =
      train(model, train_windows,
            val_windows.empty() ? train_windows : val_windows, tc);

  fs::create_directories(args.out_dir);
  save_checkpoint(model, seed,
                  (fs::path(args.out_dir) / "gknet_checkpoint.json").string());
  write_loss_curves_csv(
      result, (fs::path(args.out_dir) / "loss_curves.csv").string());
  json resolved = cfg.raw();
  resolved["seed"] = seed;
  echo_config(resolved, args.out_dir, "train-gknet");
  std::cout << "train-gknet: best epoch " << result.best_epoch
            << ", final val loss " << (result.val_loss.empty()
                                           ? 0.0
                                           : result.val_loss.back())
            << ", wrote gknet_checkpoint.json\n";
  return 0;
}

int cmd_evaluate(const GlobalArgs& args) {
  auto cfg = FlatConfig::load(
      args.config_path, args.overrides,
      {"manifest", "task", "horizon", "observation_ratio", "seed", "epochs",
       "batch_size", "learning_rate", "patience", "max_batches_per_epoch",
       "em_iters", "em_order", "encoder_widths", "decoder_widths",
       "encoder_order", "decoder_order", "kalman_order", "lambda",
       "training_fractions", "window"});
  if (!cfg.has("manifest")) throw ConfigError("evaluate: missing manifest");
  TaskConfig tcfg;
  tcfg.dataset = read_dataset(cfg.str("manifest", ""));
  tcfg.dataset.window = cfg.integer("window", tcfg.dataset.window);
  tcfg.seed = args.seed_given ? args.seed
                              : static_cast<std::uint64_t>(cfg.num("seed", 0));
  tcfg.epochs = cfg.integer("epochs", 40);
  tcfg.batch_size = cfg.integer("batch_size", 32);
  tcfg.learning_rate = cfg.num("learning_rate", 1e-3);
  tcfg.patience = cfg.integer("patience", 8);
  tcfg.max_batches_per_epoch = cfg.integer("max_batches_per_epoch", 0);
  tcfg.em_iters = cfg.integer("em_iters", 60);
  tcfg.em_order = cfg.integer("em_order", 2);
  const std::string task = cfg.str("task", "forecast");
  tcfg.arch = arch_from_config(cfg, task);
  const auto fractions = cfg.list("training_fractions", {});
  tcfg.training_fractions = fractions;

  ExperimentReport report;
  if (task == "forecast") {
    tcfg.horizons = cfg.int_list("horizon", {3});
    report = run_forecasting_experiment(tcfg);
  } else if (task == "impute") {
    tcfg.observation_ratio = cfg.num("observation_ratio", 0.9);
    report = run_imputation_experiment(tcfg);
  } else {
    throw ConfigError("evaluate: task must be forecast or impute");
  }
  fs::create_directories(args.out_dir);
  write_report_csv(report,
                   (fs::path(args.out_dir) / "evaluate_report.csv").string());
  write_report_json(report,
                    (fs::path(args.out_dir) / "evaluate_report.json").string());
  json resolved = cfg.raw();
  resolved["seed"] = tcfg.seed;
  echo_config(resolved, args.out_dir, "evaluate");
  for (const auto& row : report.rows)
    std::cout << row.scenario << " " << row.method << " " << row.metric
              << " = " << row.value << "\n";
  return 0;
}

int cmd_track_sweep(const GlobalArgs& args) {
  auto cfg = FlatConfig::load(
      args.config_path, args.overrides,
      {"kind", "scale", "snr_db", "true_graph", "noisy_graph", "sigma_e",
       "noise_ratio", "nodes", "er_p", "trajectories", "steps",
       "observed_fraction", "window", "seed", "epochs", "batch_size",
       "learning_rate", "patience", "max_batches_per_epoch", "lambda"});
  const std::uint64_t seed =
      args.seed_given ? args.seed
                      : static_cast<std::uint64_t>(cfg.num("seed", 0));
  TrackingConfig config = args.preset == "full" ? full_tracking_preset(seed)
                                                : desk_tracking_preset(seed);
  if (cfg.has("kind"))
    config.kind = cfg.str("kind", "linear") == "nonlinear"
                      ? DynamicsKind::kNonlinearBenchmark
                      : DynamicsKind::kLinearBenchmark;
  if (cfg.has("scale")) {
    const std::string scale = cfg.str("scale", "spectral");
    config.scale = scale == "raw"         ? BenchmarkOperatorScale::kRaw
                   : scale == "diffusion" ? BenchmarkOperatorScale::kDiffusion
                                          : BenchmarkOperatorScale::kSpectral;
  }
  config.snr_db = cfg.list("snr_db", config.snr_db);
  config.true_graph = cfg.raw().value("true_graph", config.true_graph);
  config.noisy_graph = cfg.raw().value("noisy_graph", config.noisy_graph);
  config.sigma_e = cfg.num("sigma_e", config.sigma_e);
  config.noise_ratio = cfg.num("noise_ratio", config.noise_ratio);
  config.nodes = cfg.integer("nodes", config.nodes);
  config.er_p = cfg.num("er_p", config.er_p);
  config.trajectories = cfg.integer("trajectories", config.trajectories);
  config.steps = cfg.integer("steps", config.steps);
  config.observed_fraction =
      cfg.num("observed_fraction", config.observed_fraction);
  config.window = cfg.integer("window", config.window);
  config.epochs = cfg.integer("epochs", config.epochs);
  config.batch_size = cfg.integer("batch_size", config.batch_size);
  config.learning_rate = cfg.num("learning_rate", config.learning_rate);
  config.patience = cfg.integer("patience", config.patience);
  config.max_batches_per_epoch =
      cfg.integer("max_batches_per_epoch", config.max_batches_per_epoch);
  if (cfg.has("lambda")) {
    config.arch = tracking_default_arch();
    config.arch.lambda = cfg.num("lambda", 0.025);
  }

  const ExperimentReport report = run_tracking_experiment(config);
  fs::create_directories(args.out_dir);
  write_report_csv(report,
                   (fs::path(args.out_dir) / "track_report.csv").string());
  write_report_json(report,
                    (fs::path(args.out_dir) / "track_report.json").string());
  json resolved = cfg.raw();
  resolved["seed"] = seed;
  resolved["preset"] = args.preset;
  echo_config(resolved, args.out_dir, "track-sweep");
  for (const auto& row : report.rows)
    std::cout << row.scenario << " " << row.method << " " << row.metric
              << " = " << row.value << "\n";
  return 0;
}

int cmd_kernel_check(const GlobalArgs& args) {
  auto cfg = FlatConfig::load(
      args.config_path, args.overrides,
      {"graph_file", "graph_nodes", "graph_p", "c", "alpha_uniform", "time",
       "dt", "paths", "seed"});
  const std::uint64_t seed =
      args.seed_given ? args.seed
                      : static_cast<std::uint64_t>(cfg.num("seed", 0));
  Rng root(seed);
  Rng graph_rng = root.substream("graph");
  const Graph g = graph_from_config(cfg, graph_rng.next_u64());
  const double c = cfg.num("c", 0.7);
  const double alpha = cfg.num("alpha_uniform", 0.5);
  const double horizon = cfg.num("time", 1.0);
  const double dt = cfg.num("dt", 1e-3);
  const int paths = cfg.integer("paths", 20000);
  const int n = g.num_nodes(), m = g.num_edges();
  const int steps = static_cast<int>(std::lround(horizon / dt));

  const MatrixXd s = g.incidence() * alpha;
  MatrixXd sum = MatrixXd::Zero(n, n), sumsq = MatrixXd::Zero(n, n);
  Rng noise = root.substream("noise");
  VectorXd x(n), lx(n), shock(m);
  const double sqrt_dt = std::sqrt(dt);
  for (int p = 0; p < paths; ++p) {
    x.setZero();
    for (int k = 0; k < steps; ++k) {
      g.apply_laplacian(x, lx);
      for (int e = 0; e < m; ++e) shock[e] = noise.normal();
      x += -c * dt * lx + sqrt_dt * (s * shock);
    }
    const MatrixXd outer = x * x.transpose();
    sum += outer;
    sumsq += outer.cwiseProduct(outer);
  }
  const MatrixXd empirical = sum / paths;
  const MatrixXd analytic = analytic_kernel_cov(g, c, s, horizon, horizon);
  double max_abs = 0.0, max_se_multiple = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double err = std::abs(empirical(i, j) - analytic(i, j));
      const double var =
          (sumsq(i, j) / paths - empirical(i, j) * empirical(i, j)) / paths;
      const double se = std::sqrt(std::max(var, 1e-300));
      max_abs = std::max(max_abs, err);
      max_se_multiple = std::max(max_se_multiple, err / se);
    }
  fs::create_directories(args.out_dir);
  json result;
  result["max_abs_error"] = max_abs;
  result["max_se_multiple"] = max_se_multiple;
  result["paths"] = paths;
  result["dt"] = dt;
  {
    std::ofstream out(fs::path(args.out_dir) / "kernel_check.json");
    out << result.dump(2) << "\n";
  }
  json resolved = cfg.raw();
  resolved["seed"] = seed;
  echo_config(resolved, args.out_dir, "kernel-check");
  std::cout << "kernel-check: max |empirical - analytic| = " << max_abs
            << " (" << max_se_multiple << " standard errors)\n";
  return 0;
}

int cmd_grad_check(const GlobalArgs& args) {
  auto cfg = FlatConfig::load(args.config_path, args.overrides,
                              {"graph_nodes", "graph_p", "steps", "seed",
                               "tolerance"});
  const std::uint64_t seed =
      args.seed_given ? args.seed
                      : static_cast<std::uint64_t>(cfg.num("seed", 0));
  const double tolerance = cfg.num("tolerance", 1e-4);
  const int n = cfg.integer("graph_nodes", 6);
  const int steps = cfg.integer("steps", 5);
  Rng root(seed);
  Rng graph_rng = root.substream("graph");
  const Graph g = erdos_renyi(n, cfg.num("graph_p", 0.5),
                              graph_rng.next_u64());
  GKNetConfig arch;
  arch.encoder.widths = {1, 4, 2};
  arch.encoder.order = 1;
  arch.decoder.widths = {1, 4, 1};
  arch.decoder.order = 1;
  arch.kalman_order = 1;
  arch.lambda = 0.05;
  Rng init_rng = root.substream("init");
  GKNetModel model(g, arch, init_rng.next_u64());

  Rng data_rng = root.substream("data");
  MatrixXd window(n, steps), targets(n, steps);
  for (int i = 0; i < window.size(); ++i) {
    window.data()[i] = data_rng.normal();
    targets.data()[i] = data_rng.normal();
  }
  const MatrixXd mask = MatrixXd::Ones(n, steps);

  auto& params = model.params().values;
  VectorXd point(model.params().total_size());
  std::size_t at = 0;
  for (const auto& p : params) {
    std::copy(p.data(), p.data() + p.size(), point.data() + at);
    at += p.size();
  }
  const auto eval = [&](const VectorXd& x, VectorXd* grad) {
    std::size_t offset = 0;
    for (auto& p : params) {
      p = Eigen::Map<const MatrixXd>(x.data() + offset, p.rows(), p.cols());
      offset += p.size();
    }
    ad::Tape tape;
    const auto s = model.stage(tape);
    const auto out =
        model.forward(tape, s, window, &targets, &mask, nullptr, false);
    const double value = out.loss.value()(0, 0);
    if (grad) {
      tape.backward(out.loss);
      grad->resize(x.size());
      std::size_t go = 0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        const MatrixXd& gm = s.of(static_cast<int>(i)).grad();
        std::copy(gm.data(), gm.data() + gm.size(), grad->data() + go);
        go += gm.size();
      }
    }
    return value;
  };
  const auto result = ad::gradient_check(eval, point, 1e-5);
  std::cout << "grad-check: max relative error " << result.max_rel_error
            << " at coordinate " << result.worst_index << " over "
            << point.size() << " parameters\n";
  if (result.max_rel_error > tolerance) {
    std::cerr << "error: gradient check failed tolerance " << tolerance
              << "\n";
    return 4;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graph state-space modeling: simulation, identification and "
               "model-based tracking"};
  app.require_subcommand(1);

  GlobalArgs args;
  app.add_option("--config", args.config_path, "JSON config file");
  app.add_option("--seed", args.seed, "root seed (overrides the config)")
      ->each([&args](const std::string&) { args.seed_given = true; });
  app.add_option("--out", args.out_dir, "output directory");
  app.add_option("--preset", args.preset, "preset: desk or full")
      ->check(CLI::IsMember({"desk", "full"}));
  app.add_option("--threads", args.threads, "worker thread cap");
  std::vector<std::string> overrides;
  app.add_option("--set", overrides,
                 "config override key=value (value parsed as JSON)");

  auto* sim = app.add_subcommand("simulate", "simulate the state-space model");
  auto* fit_em = app.add_subcommand("fit-em", "EM identification");
  auto* fit_grad = app.add_subcommand("fit-grad", "gradient identification");
  auto* train_cmd = app.add_subcommand("train-gknet", "train the network");
  auto* eval_cmd = app.add_subcommand("evaluate",
                                      "forecast/imputation evaluation");
  auto* track = app.add_subcommand("track-sweep", "synthetic tracking sweep");
  auto* kernel = app.add_subcommand("kernel-check",
                                    "Monte-Carlo check of the SPDE kernel");
  auto* gradc = app.add_subcommand("grad-check",
                                   "finite-difference check of the network");
  for (auto* sub : {sim, fit_em, fit_grad, train_cmd, eval_cmd, track, kernel,
                    gradc})
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);
  args.overrides = overrides;
  Eigen::setNbThreads(std::max(args.threads, 1));

  try {
    if (sim->parsed()) return cmd_simulate(args);
    if (fit_em->parsed()) return cmd_fit(args, false);
    if (fit_grad->parsed()) return cmd_fit(args, true);
    if (train_cmd->parsed()) return cmd_train_gknet(args);
    if (eval_cmd->parsed()) return cmd_evaluate(args);
    if (track->parsed()) return cmd_track_sweep(args);
    if (kernel->parsed()) return cmd_kernel_check(args);
    if (gradc->parsed()) return cmd_grad_check(args);
  } catch (const ConfigError& err) {
    std::cerr << "error: config: " << err.what() << "\n";
    return 2;
  } catch (const DataError& err) {
    std::cerr << "error: data: " << err.what() << "\n";
    return 3;
  } catch (const NumericalError& err) {
    std::cerr << "error: numerical: " << err.what() << "\n";
    return 4;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}

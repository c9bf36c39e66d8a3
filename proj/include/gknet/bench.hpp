#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gknet/em.hpp"
#include "gknet/gknet.hpp"

namespace gknet {

/// Windowed multichannel node time series with an observation mask.
struct Dataset {
  std::string graph_file;
  Graph graph;
  MatrixXd signal;                       // N x T
  std::optional<MatrixXd> input_signal;  // e.g. runoff, N x T
  MatrixXd mask;                         // N x T in {0, 1}
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  int window = 12;
  int horizon = 0;  // 0 = same-step targets

  void validate() const;
};

/// Manifest JSON naming the graph file, trajectory CSVs, mask indices and
/// split assignment.
void write_dataset(const Dataset& dataset, const std::string& directory,
                   const std::string& stem);
Dataset read_dataset(const std::string& manifest_path);

// --- metrics ---

/// Frobenius-norm ratio over masked entries.
double nrmse(const MatrixXd& predicted, const MatrixXd& target,
             const MatrixXd& mask);

/// 10 log10(mean squared error); exact zeros report the sentinel -300.
double mse_db(const MatrixXd& estimated, const MatrixXd& truth);

// --- reports ---

struct ScenarioRow {
  std::string scenario;  // e.g. "linear/true/snr20"
  std::string method;    // e.g. "gknet", "kalman-reference"
  std::string metric;    // "mse_db", "nrmse"
  double value = 0.0;
  std::uint64_t seed = 0;
};

struct ExperimentReport {
  std::vector<ScenarioRow> rows;
  std::string config_echo;       // JSON text of the resolved configuration
  double wall_seconds = 0.0;
  std::vector<std::string> notes;

  void sort_rows();
};

/// CSV holds one row per scenario x method x metric; volatile fields
/// (wall clock) go only to the JSON summary so reruns are byte-identical.
void write_report_csv(const ExperimentReport& report, const std::string& path);
void write_report_json(const ExperimentReport& report,
                       const std::string& path);

// --- tracking experiment (synthetic benchmark dynamics) ---

struct TrackingConfig {
  DynamicsKind kind = DynamicsKind::kLinearBenchmark;
  BenchmarkOperatorScale scale = BenchmarkOperatorScale::kSpectral;
  std::vector<double> snr_db = {0, 5, 10, 15, 20, 25, 30};
  bool true_graph = true;
  bool noisy_graph = true;  // also run the perturbed-graph scenario
  double sigma_e = 0.1;
  double noise_ratio = 0.1;  // sigma_q^2 / sigma_r^2
  int nodes = 32;
  double er_p = 0.2;
  int trajectories = 2000;
  int steps = 200;
  double observed_fraction = 0.75;
  int window = 20;
  std::uint64_t seed = 0;

  // GKNet budget
  int epochs = 60;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int patience = 10;
  int max_batches_per_epoch = 0;
  GKNetConfig arch;  // widths filled by the presets when empty
};

/// Paper-style tracking architecture (three layers, second-order filters,
/// features 16 and 8, lambda 0.025).
GKNetConfig tracking_default_arch();

TrackingConfig desk_tracking_preset(std::uint64_t seed);
TrackingConfig full_tracking_preset(std::uint64_t seed);

ExperimentReport run_tracking_experiment(const TrackingConfig& config);

// --- forecasting / imputation on supplied datasets ---

struct TaskConfig {
  Dataset dataset;
  std::vector<int> horizons = {3};      // forecasting
  double observation_ratio = 0.9;       // imputation: fraction of nodes kept
  std::vector<double> training_fractions;  // optional low-data sweep
  std::uint64_t seed = 0;

  int epochs = 60;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int patience = 10;
  int max_batches_per_epoch = 0;
  GKNetConfig arch;

  int em_iters = 60;
  int em_order = 2;
  double em_c = 0.0;  // <= 0: auto 0.5 / lambda_max
};

ExperimentReport run_forecasting_experiment(const TaskConfig& config);
ExperimentReport run_imputation_experiment(const TaskConfig& config);

/// Synthetic dataset from the graph state-space model, for harness tests and
/// the shipped example configs.
Dataset make_ssm_dataset(const Graph& graph, const StateSpaceModel& model,
                         int steps, std::uint64_t seed);

}  // namespace gknet

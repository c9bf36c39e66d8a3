#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gknet/graph.hpp"

namespace gknet {

enum class TransitionMode {
  kPaperLiteral,  // A = -c L
  kEuler,         // A = I - c dt L
};

/// Graph state-space model:
///   x_t = A x_{t-1} + B diag(alpha) w_t,   w_t ~ N(0, I_m)
///   y_t = M Htilde(L) x_t + v_t,           v_t ~ N(0, sigma2 I)
/// with x_0 ~ N(0, sigma0_2 I).
struct StateSpaceModel {
  Graph graph;
  double c = 0.1;
  VectorXd alpha;          // edge uncertainties, length m, entries >= 0
  GraphFilter obs_filter;  // Htilde(L)
  std::vector<int> mask;   // observed node indices; empty = all observed
  double sigma2 = 0.01;
  double sigma0_2 = 1.0;
  TransitionMode transition_mode = TransitionMode::kEuler;
  double dt = 1.0;

  int num_nodes() const { return graph.num_nodes(); }
  int num_observed() const {
    return mask.empty() ? graph.num_nodes() : static_cast<int>(mask.size());
  }
  std::vector<int> observed_nodes() const;

  void validate() const;
};

/// Applies the transition map A to a vector without materializing A.
VectorXd apply_transition(const StateSpaceModel& model, const VectorXd& x);
/// Dense A; used by the covariance recursions.
MatrixXd transition_matrix(const StateSpaceModel& model);

/// Dense observation operator H = M Htilde(L), shape N_o x N.
MatrixXd observation_matrix(const StateSpaceModel& model);

/// Dense process noise covariance Q = B diag(alpha^2) B^T.
MatrixXd process_noise_cov(const StateSpaceModel& model);

struct Trajectory {
  MatrixXd states;        // N x (T+1), columns x_0 .. x_T
  MatrixXd observations;  // N_o x T, columns y_1 .. y_T
  std::uint64_t seed = 0;

  int steps() const { return static_cast<int>(observations.cols()); }
};

/// Simulates the model for T steps; bit-deterministic per seed.
Trajectory simulate(const StateSpaceModel& model, int steps,
                    std::uint64_t seed);

enum class DynamicsKind { kSsm, kLinearBenchmark, kNonlinearBenchmark };

/// How the Laplacian enters the benchmark state update.  The raw form
/// x_{t+1} = L x_t is exponentially unstable whenever lambda_max > 1, so
/// long-horizon experiments use a spectrally scaled operator.
enum class BenchmarkOperatorScale {
  kRaw,        // L
  kSpectral,   // L / lambda_max
  kDiffusion,  // I - L / lambda_max
};

/// Benchmark dynamics for tracking experiments:
///   x_{t+1} = f(L, x_t) + w_t,  w_t ~ N(0, sigma_q2 I_N)
///   y_t     = M H x_t + v_t,    v_t ~ N(0, sigma_r2 I_{N_o})
/// with linear f = Op x and nonlinear f = sin(x) + cos(Op x).
struct DynamicsSpec {
  DynamicsKind kind = DynamicsKind::kLinearBenchmark;
  double sigma_q2 = 0.01;
  double sigma_r2 = 0.1;  // sigma_q2 / sigma_r2 = 0.1 unless overridden
  GraphFilter obs_filter;  // low-pass; default set by default_benchmark_filter
  std::optional<int> num_observed;  // node subset size; unset = all observed
  // explicit sensor placement; when set it overrides num_observed, keeping
  // the mask fixed across trajectories of one experiment
  std::optional<std::vector<int>> mask_nodes;
  BenchmarkOperatorScale scale = BenchmarkOperatorScale::kRaw;
  double sigma0_2 = 1.0;

  double noise_ratio() const { return sigma_q2 / sigma_r2; }
};

/// Truncated heat-kernel coefficients (-1)^k / k!, K = 3, on the normalized
/// Laplacian.
GraphFilter default_benchmark_filter();

/// Sorted random subset of k node indices (Fisher-Yates prefix).
std::vector<int> draw_node_subset(int n, int k, class Rng& rng);

struct BenchmarkRun {
  Trajectory trajectory;
  std::vector<int> mask;   // observed node indices
  MatrixXd clean_signal;   // Htilde(L) x_t at all nodes, N x T (no mask/noise)
  bool truncated = false;  // non-finite state detected; run was cut short
  std::string diagnostic;
};

BenchmarkRun simulate_benchmark(const DynamicsSpec& spec, const Graph& g,
                                int steps, std::uint64_t seed);

/// Analytic covariance kernel of the graph SPDE dx = -cL x dt + S dbeta with
/// x_0 = 0: Sigma_{t,s} = V C_{t,s} V^T in the Laplacian eigenbasis, where
/// the zero-eigenvalue entry takes the Brownian limit min(t, s).
MatrixXd analytic_kernel_cov(const Graph& g, double c, const MatrixXd& s,
                             double t, double time_s);

/// Per-edge weight perturbation w_e -> w_e + e_e with e ~ N(0, sigma_e^2 I),
/// clipped below at 0.05 w_e; support is preserved.
Graph perturb_graph(const Graph& g, double sigma_e, std::uint64_t seed);

/// Observation-noise variance that realizes the target SNR against the given
/// clean observations: 10 log10(power / sigma_r2) = snr_db.
double target_snr_noise(const Trajectory& clean, double snr_db);

// Trajectory CSV files: one file per matrix, header "t,node,value".
void write_trajectory_csv(const MatrixXd& matrix, const std::string& path,
                          int first_t, const std::vector<int>& node_ids);
MatrixXd read_trajectory_csv(const std::string& path);

}  // namespace gknet

#pragma once

#include <string>
#include <vector>

#include "gknet/kalman.hpp"

namespace gknet {

struct EMConfig {
  int max_iters = 100;
  double rel_tol = 1e-8;  // stop when the observed-data NLL improves less
  enum class MStep { kGradient, kNewton };
  MStep mstep = MStep::kNewton;
  int mstep_iters = 25;      // inner iterations (gradient mode)
  int newton_steps = 4;      // inner iterations (newton mode)
  int warmup_iters = 10;     // uniform-alpha phase before the full M-step
  double sigma0_2 = 1.0;     // fixed, not learned
  double alpha_floor = 1e-4;
  bool learn_c = false;      // em_fit keeps c fixed; grad_fit may learn it
};

/// Smoothed second moments feeding the M-step.  Sums over independent
/// trajectories are plain additions of these blocks.
struct SufficientStats {
  MatrixXd sxx;        // sum_{t=1..T} xhat_t xhat_t^T + Phat_t
  MatrixXd sxx_prev;   // sum_{t=1..T} xhat_{t-1} xhat_{t-1}^T + Phat_{t-1}
  MatrixXd scross;     // sum_{t=1..T} xhat_t xhat_{t-1}^T + Vhat_t
  MatrixXd sxy;        // sum_{t=1..T} xhat_t y_t^T (N x N_o)
  MatrixXd syy;        // sum_{t=1..T} y_t y_t^T
  double s0_sq = 0.0;  // xhat_0^T xhat_0 + tr(Phat_0)
  int steps = 0;

  SufficientStats& operator+=(const SufficientStats& other);
};

SufficientStats accumulate_stats(const SmootherTrace& smoothed,
                                 const MatrixXd& observations);

struct NllOptions {
  // With constants the value is the exact negative log joint density
  // (degenerate transition directions measured on the range of Q).
  bool with_constants = false;
};

/// Complete-data negative log-likelihood of (states, observations) under the
/// model.  log|Q| is the log-pseudo-determinant and the transition quadratic
/// form uses pinv(Q); requires at least one edge and alpha above the floor.
double nll(const StateSpaceModel& model, const MatrixXd& states,
           const MatrixXd& observations, const NllOptions& opts = {},
           double alpha_floor = 1e-6);

/// Expectation of the complete-data NLL under the smoothed posterior captured
/// by `stats`.
double expected_nll(const StateSpaceModel& model, const SufficientStats& stats,
                    const NllOptions& opts = {}, double alpha_floor = 1e-6);

struct ExpectedNllGradients {
  VectorXd dh;
  VectorXd dalpha;
  double dsigma2 = 0.0;
  double dc = 0.0;
};

ExpectedNllGradients expected_nll_gradients(const StateSpaceModel& model,
                                            const SufficientStats& stats);

/// Observed-data NLL via the innovations form of the Kalman filter
/// (Gaussian constants included).
double innovations_nll(const StateSpaceModel& model,
                       const MatrixXd& observations);

struct FitResult {
  StateSpaceModel model;
  std::vector<double> nll_trace;  // observed-data NLL per iteration (em_fit)
                                  // or objective per accepted step (grad_fit)
  double final_observed_nll = 0.0;
  MatrixXd states;  // grad_fit only: the fitted latent states, N x (T+1)
};

/// Spec default initialization: h = [1, 0, ..., 0] (order K), alpha = 0.1,
/// sigma2 = sample variance of observation increments.
StateSpaceModel default_init(const Graph& graph, const MatrixXd& observations,
                             int filter_order, double c,
                             const std::vector<int>& mask = {},
                             double sigma0_2 = 1.0);

/// EM identification of (h, alpha, sigma2); c and sigma0_2 stay fixed.
FitResult em_fit(const MatrixXd& observations, const Graph& graph,
                 const EMConfig& config, const StateSpaceModel& init);

/// Direct minimization of the complete-data NLL over parameters and latent
/// states by first-order descent with backtracking.
FitResult grad_fit(const MatrixXd& observations, const Graph& graph,
                   const EMConfig& config, const StateSpaceModel& init);

// Fitted-model JSON document (includes the NLL trace and a graph file
// reference).
void write_model_json(const FitResult& fit, const std::string& graph_file,
                      const std::string& path);
StateSpaceModel read_model_json(const std::string& path, const Graph& graph);

}  // namespace gknet

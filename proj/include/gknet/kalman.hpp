#pragma once

#include <string>

#include "gknet/statespace.hpp"

namespace gknet {

/// Dense linear-Gaussian model the filter recursions run on.  StateSpaceModel
/// lowers to this; benchmark references build it directly.
struct LinearGaussianModel {
  MatrixXd a;       // N x N transition
  MatrixXd q;       // N x N process noise covariance (PSD, may be singular)
  MatrixXd h;       // N_o x N observation
  double sigma2 = 0.01;
  double sigma0_2 = 1.0;

  int dim() const { return static_cast<int>(a.rows()); }
  int obs_dim() const { return static_cast<int>(h.rows()); }
};

LinearGaussianModel lower_to_dense(const StateSpaceModel& model);

struct FilterTrace {
  // index t in [1, T] maps to vector slot t-1; initial (x0+, P0+) kept apart.
  std::vector<VectorXd> predicted_mean;    // x_t^-
  std::vector<MatrixXd> predicted_cov;     // P_t^-
  std::vector<MatrixXd> gain;              // K_t, N x N_o
  std::vector<VectorXd> corrected_mean;    // x_t^+
  std::vector<MatrixXd> corrected_cov;     // P_t^+
  VectorXd initial_mean;                   // x_0^+
  MatrixXd initial_cov;                    // P_0^+
  double innovations_nll = 0.0;  // -log p(y_1..y_T), Gaussian constants included

  int steps() const { return static_cast<int>(corrected_mean.size()); }
  const VectorXd& corrected_mean_at(int t) const {
    return t == 0 ? initial_mean : corrected_mean[t - 1];
  }
  const MatrixXd& corrected_cov_at(int t) const {
    return t == 0 ? initial_cov : corrected_cov[t - 1];
  }
};

struct SmootherTrace {
  std::vector<VectorXd> mean;     // xhat_t, t in [0, T]
  std::vector<MatrixXd> cov;      // Phat_t, t in [0, T]
  std::vector<MatrixXd> lag_one;  // Vhat_t = cov(x_t, x_{t-1} | y), t in [1, T]
  std::vector<MatrixXd> gain;     // J_t, t in [0, T-1]

  int steps() const { return static_cast<int>(mean.size()) - 1; }
};

/// One prediction step: x^- = A x, P^- = A P A^T + Q (re-symmetrized).
void kf_predict(const LinearGaussianModel& model, const VectorXd& prev_mean,
                const MatrixXd& prev_cov, VectorXd& pred_mean,
                MatrixXd& pred_cov);

/// One correction step.  P^+ uses the Joseph form
/// (I - K H) P^- (I - K H)^T + sigma2 K K^T and is re-symmetrized.
/// Returns the innovation log-likelihood contribution (with constants).
double kf_correct(const LinearGaussianModel& model, const VectorXd& pred_mean,
                  const MatrixXd& pred_cov, const VectorXd& y, MatrixXd& gain,
                  VectorXd& corr_mean, MatrixXd& corr_cov);

/// Forward recursion from (0, sigma0_2 I) over columns of `observations`.
FilterTrace kalman_filter(const LinearGaussianModel& model,
                          const MatrixXd& observations);
FilterTrace kalman_filter(const StateSpaceModel& model,
                          const MatrixXd& observations);

/// Backward Rauch recursion with lag-one covariances.
SmootherTrace kalman_smoother(const LinearGaussianModel& model,
                              const FilterTrace& trace);
SmootherTrace kalman_smoother(const StateSpaceModel& model,
                              const FilterTrace& trace);

/// Per-step means and covariance traces, for debugging (flag-gated in the
/// CLI).
void dump_filter_trace_csv(const FilterTrace& trace, const std::string& path);

}  // namespace gknet

#include "gknet/kalman.hpp"

#include <cmath>
#include <fstream>

namespace gknet {

namespace {

constexpr double kInvJitter = 1e-10;
constexpr double kLog2Pi = 1.8378770664093453;

void symmetrize(MatrixXd& p) { p = 0.5 * (p + p.transpose()).eval(); }

}  // namespace

LinearGaussianModel lower_to_dense(const StateSpaceModel& model) {
  model.validate();
  if (!(model.sigma2 > 0.0))
    throw DataError("filter: sigma2 must be positive");
  if (!(model.sigma0_2 > 0.0))
    throw DataError("filter: sigma0_2 must be positive");
  LinearGaussianModel dense;
  dense.a = transition_matrix(model);
  dense.q = process_noise_cov(model);
  dense.h = observation_matrix(model);
  dense.sigma2 = model.sigma2;
  dense.sigma0_2 = model.sigma0_2;
  return dense;
}

void kf_predict(const LinearGaussianModel& model, const VectorXd& prev_mean,
                const MatrixXd& prev_cov, VectorXd& pred_mean,
                MatrixXd& pred_cov) {
  pred_mean = model.a * prev_mean;
  pred_cov = model.a * prev_cov * model.a.transpose() + model.q;
  symmetrize(pred_cov);
}

double kf_correct(const LinearGaussianModel& model, const VectorXd& pred_mean,
                  const MatrixXd& pred_cov, const VectorXd& y, MatrixXd& gain,
                  VectorXd& corr_mean, MatrixXd& corr_cov) {
  if (!y.allFinite()) throw NumericalError("kf_correct: non-finite observation");
  const int no = model.obs_dim();
  MatrixXd s = model.h * pred_cov * model.h.transpose();
  s.diagonal().array() += model.sigma2;
  symmetrize(s);
  const Eigen::LLT<MatrixXd> llt(s);
  if (llt.info() != Eigen::Success)
    throw NumericalError("kf_correct: innovation covariance not PD");
  const VectorXd innovation = y - model.h * pred_mean;
  gain = llt.solve(model.h * pred_cov).transpose();  // P^- H^T S^{-1}
  corr_mean = pred_mean + gain * innovation;
  const MatrixXd ikh = MatrixXd::Identity(model.dim(), model.dim()) -
                       gain * model.h;
  corr_cov = ikh * pred_cov * ikh.transpose() +
             model.sigma2 * gain * gain.transpose();
  symmetrize(corr_cov);

  const VectorXd white = llt.matrixL().solve(innovation);
  double log_det = 0.0;
  for (int i = 0; i < no; ++i) log_det += std::log(llt.matrixL()(i, i));
  return 0.5 * (no * kLog2Pi + white.squaredNorm()) + log_det;
}

FilterTrace kalman_filter(const LinearGaussianModel& model,
                          const MatrixXd& observations) {
  if (observations.rows() != model.obs_dim())
    throw DataError("kalman_filter: observation rows != observed dimension");
  if (!observations.allFinite())
    throw NumericalError("kalman_filter: non-finite observations");
  const int n = model.dim();
  const int steps = static_cast<int>(observations.cols());

  FilterTrace trace;
  trace.initial_mean = VectorXd::Zero(n);
  trace.initial_cov = model.sigma0_2 * MatrixXd::Identity(n, n);
  trace.predicted_mean.reserve(steps);
  trace.predicted_cov.reserve(steps);
  trace.gain.reserve(steps);
  trace.corrected_mean.reserve(steps);
  trace.corrected_cov.reserve(steps);

  VectorXd mean = trace.initial_mean;
  MatrixXd cov = trace.initial_cov;
  for (int t = 0; t < steps; ++t) {
    VectorXd pred_mean;
    MatrixXd pred_cov;
    kf_predict(model, mean, cov, pred_mean, pred_cov);
    MatrixXd gain;
    trace.innovations_nll += kf_correct(model, pred_mean, pred_cov,
                                        observations.col(t), gain, mean, cov);
    trace.predicted_mean.push_back(std::move(pred_mean));
    trace.predicted_cov.push_back(std::move(pred_cov));
    trace.gain.push_back(std::move(gain));
    trace.corrected_mean.push_back(mean);
    trace.corrected_cov.push_back(cov);
  }
  return trace;
}

FilterTrace kalman_filter(const StateSpaceModel& model,
                          const MatrixXd& observations) {
  return kalman_filter(lower_to_dense(model), observations);
}

SmootherTrace kalman_smoother(const LinearGaussianModel& model,
                              const FilterTrace& trace) {
  const int steps = trace.steps();
  if (steps == 0) throw DataError("kalman_smoother: empty filter trace");
  const int n = model.dim();
  const MatrixXd eye = MatrixXd::Identity(n, n);

  SmootherTrace out;
  out.mean.resize(steps + 1);
  out.cov.resize(steps + 1);
  out.lag_one.resize(steps);
  out.gain.resize(steps);

  out.mean[steps] = trace.corrected_mean[steps - 1];
  out.cov[steps] = trace.corrected_cov[steps - 1];

  for (int t = steps; t >= 1; --t) {
    MatrixXd pred = trace.predicted_cov[t - 1];
    pred.diagonal().array() += kInvJitter;
    const Eigen::LDLT<MatrixXd> ldlt(pred);
    if (ldlt.info() != Eigen::Success)
      throw NumericalError("kalman_smoother: singular predicted covariance at t=" +
                           std::to_string(t));
    // J_{t-1} = P^+_{t-1} A^T (P_t^-)^{-1}
    const MatrixXd j =
        ldlt.solve(model.a * trace.corrected_cov_at(t - 1)).transpose();
    out.gain[t - 1] = j;
    out.mean[t - 1] = trace.corrected_mean_at(t - 1) +
                      j * (out.mean[t] - trace.predicted_mean[t - 1]);
    MatrixXd cov = trace.corrected_cov_at(t - 1) +
                   j * (out.cov[t] - trace.predicted_cov[t - 1]) * j.transpose();
    symmetrize(cov);
    out.cov[t - 1] = cov;
  }

  // Terminal lag-one V_T = (I - K_T H) A P^+_{T-1}; backward recursion
  // V_{t-1} = P^+_{t-1} J_{t-2}^T + J_{t-1} (V_t - A P^+_{t-1}) J_{t-2}^T.
  out.lag_one[steps - 1] = (eye - trace.gain[steps - 1] * model.h) * model.a *
                           trace.corrected_cov_at(steps - 1);
  for (int t = steps - 1; t >= 1; --t) {
    const MatrixXd& pf = trace.corrected_cov_at(t);
    out.lag_one[t - 1] =
        pf * out.gain[t - 1].transpose() +
        out.gain[t] * (out.lag_one[t] - model.a * pf) *
            out.gain[t - 1].transpose();
  }
  return out;
}

SmootherTrace kalman_smoother(const StateSpaceModel& model,
                              const FilterTrace& trace) {
  return kalman_smoother(lower_to_dense(model), trace);
}

void dump_filter_trace_csv(const FilterTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write trace file: " + path);
  out.precision(17);
  out << "t,node,predicted_mean,corrected_mean,predicted_var,corrected_var\n";
  for (int t = 1; t <= trace.steps(); ++t) {
    const auto& pm = trace.predicted_mean[t - 1];
    const auto& cm = trace.corrected_mean[t - 1];
    const auto& pc = trace.predicted_cov[t - 1];
    const auto& cc = trace.corrected_cov[t - 1];
    for (int i = 0; i < pm.size(); ++i)
      out << t << "," << i << "," << pm[i] << "," << cm[i] << "," << pc(i, i)
          << "," << cc(i, i) << "\n";
  }
}

}  // namespace gknet

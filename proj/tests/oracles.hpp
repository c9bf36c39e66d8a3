// Test-only reference implementations.  Everything here is dense, direct and
// independent of the library's computation paths: polynomial filters via
// explicit matrix powers, pseudo-inverses via eigendecompositions, posterior
// moments via joint-Gaussian conditioning over the stacked trajectory.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <vector>

#include "gknet/kalman.hpp"
#include "gknet/statespace.hpp"

namespace gknet::oracle {

inline MatrixXd dense_poly(const MatrixXd& op, const std::vector<double>& h) {
  MatrixXd out = MatrixXd::Zero(op.rows(), op.cols());
  MatrixXd power = MatrixXd::Identity(op.rows(), op.cols());
  for (const double hk : h) {
    out += hk * power;
    power = op * power;
  }
  return out;
}

inline MatrixXd eig_pinv(const MatrixXd& m, double tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  const VectorXd lam = es.eigenvalues();
  const MatrixXd& v = es.eigenvectors();
  const double cutoff = tol * std::max(1.0, lam.cwiseAbs().maxCoeff());
  VectorXd inv = VectorXd::Zero(lam.size());
  for (int i = 0; i < lam.size(); ++i)
    if (std::abs(lam[i]) > cutoff) inv[i] = 1.0 / lam[i];
  return v * inv.asDiagonal() * v.transpose();
}

inline double eig_log_pdet(const MatrixXd& m, double tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  const VectorXd lam = es.eigenvalues();
  const double cutoff = tol * std::max(1.0, lam.cwiseAbs().maxCoeff());
  double sum = 0.0;
  for (int i = 0; i < lam.size(); ++i)
    if (lam[i] > cutoff) sum += std::log(lam[i]);
  return sum;
}

inline int eig_rank(const MatrixXd& m, double tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  const VectorXd lam = es.eigenvalues();
  const double cutoff = tol * std::max(1.0, lam.cwiseAbs().maxCoeff());
  int r = 0;
  for (int i = 0; i < lam.size(); ++i)
    if (std::abs(lam[i]) > cutoff) ++r;
  return r;
}

/// Joint Gaussian over the stacked vector (x_0, ..., x_T, y_1, ..., y_T):
/// zero mean, covariance assembled from the model blocks.
struct JointGaussian {
  MatrixXd cov;
  int n = 0, no = 0, steps = 0;

  int state_offset(int t) const { return t * n; }
  int obs_offset(int t) const { return (steps + 1) * n + (t - 1) * no; }
};

inline JointGaussian build_joint(const LinearGaussianModel& model, int steps) {
  const int n = model.dim(), no = model.obs_dim();
  const int dim = (steps + 1) * n + steps * no;
  JointGaussian joint;
  joint.n = n;
  joint.no = no;
  joint.steps = steps;

  // State covariance blocks: Sigma_{0,0} = sigma0_2 I,
  // Sigma_{t,t} = A Sigma_{t-1,t-1} A^T + Q, Sigma_{s,t} = Sigma_{s,s} (A^T)^{t-s}.
  std::vector<std::vector<MatrixXd>> sx(steps + 1,
                                        std::vector<MatrixXd>(steps + 1));
  sx[0][0] = model.sigma0_2 * MatrixXd::Identity(n, n);
  for (int t = 1; t <= steps; ++t)
    sx[t][t] = model.a * sx[t - 1][t - 1] * model.a.transpose() + model.q;
  for (int s = 0; s <= steps; ++s)
    for (int t = s + 1; t <= steps; ++t) {
      MatrixXd block = sx[s][s];
      for (int k = s; k < t; ++k) block = block * model.a.transpose();
      sx[s][t] = block;
      sx[t][s] = block.transpose();
    }

  joint.cov = MatrixXd::Zero(dim, dim);
  for (int s = 0; s <= steps; ++s)
    for (int t = 0; t <= steps; ++t)
      joint.cov.block(joint.state_offset(s), joint.state_offset(t), n, n) =
          sx[s][t];
  for (int t = 1; t <= steps; ++t)
    for (int s = 0; s <= steps; ++s) {
      const MatrixXd cross = sx[s][t] * model.h.transpose();
      joint.cov.block(joint.state_offset(s), joint.obs_offset(t), n, no) =
          cross;
      joint.cov.block(joint.obs_offset(t), joint.state_offset(s), no, n) =
          cross.transpose();
    }
  for (int t = 1; t <= steps; ++t)
    for (int s = 1; s <= steps; ++s) {
      MatrixXd block = model.h * sx[t][s] * model.h.transpose();
      if (t == s)
        block += model.sigma2 * MatrixXd::Identity(no, no);
      joint.cov.block(joint.obs_offset(t), joint.obs_offset(s), no, no) =
          block;
    }
  return joint;
}

struct Conditioned {
  VectorXd mean;   // posterior mean of the full state stack
  MatrixXd cov;    // posterior covariance of the full state stack
};

/// Conditions the state stack on observations y_1..y_upto (stacked).
inline Conditioned condition_states(const JointGaussian& joint,
                                    const MatrixXd& observations, int upto) {
  const int n = joint.n, no = joint.no, steps = joint.steps;
  const int sdim = (steps + 1) * n;
  const int odim = upto * no;
  VectorXd y(odim);
  for (int t = 1; t <= upto; ++t) y.segment((t - 1) * no, no) = observations.col(t - 1);
  const MatrixXd sigma_xy = joint.cov.block(0, joint.obs_offset(1), sdim, odim);
  const MatrixXd sigma_yy =
      joint.cov.block(joint.obs_offset(1), joint.obs_offset(1), odim, odim);
  const Eigen::LDLT<MatrixXd> ldlt(sigma_yy);
  Conditioned out;
  out.mean = sigma_xy * ldlt.solve(y);
  out.cov = joint.cov.topLeftCorner(sdim, sdim) -
            sigma_xy * ldlt.solve(sigma_xy.transpose());
  return out;
}

/// Marginal NLL of the stacked observations (with Gaussian constants).
inline double joint_observation_nll(const JointGaussian& joint,
                                    const MatrixXd& observations) {
  const int no = joint.no, steps = joint.steps;
  const int odim = steps * no;
  VectorXd y(odim);
  for (int t = 1; t <= steps; ++t)
    y.segment((t - 1) * no, no) = observations.col(t - 1);
  const MatrixXd sigma_yy =
      joint.cov.block(joint.obs_offset(1), joint.obs_offset(1), odim, odim);
  const Eigen::LLT<MatrixXd> llt(sigma_yy);
  const VectorXd white = llt.matrixL().solve(y);
  double log_det = 0.0;
  for (int i = 0; i < odim; ++i) log_det += std::log(llt.matrixL()(i, i));
  return 0.5 * (odim * std::log(2.0 * M_PI) + white.squaredNorm()) + log_det;
}

/// Negative log of the explicit factorized joint density: state prior times
/// transition densities times emission densities, each factor evaluated as a
/// Gaussian density directly (the singular transition covariance Q uses the
/// eigendecomposition pseudo-determinant and pseudo-inverse on its range).
inline double joint_complete_nll(const LinearGaussianModel& model,
                                 const MatrixXd& states,
                                 const MatrixXd& observations) {
  const int n = model.dim(), no = model.obs_dim();
  const int steps = static_cast<int>(observations.cols());
  const double log2pi = std::log(2.0 * M_PI);

  double value = 0.5 * (n * log2pi + n * std::log(model.sigma0_2) +
                        states.col(0).squaredNorm() / model.sigma0_2);

  const int q_rank = eig_rank(model.q, 1e-11);
  const double q_log_pdet = eig_log_pdet(model.q, 1e-11);
  const MatrixXd q_pinv = eig_pinv(model.q, 1e-11);
  for (int t = 1; t <= steps; ++t) {
    const VectorXd eps = states.col(t) - model.a * states.col(t - 1);
    value += 0.5 * (q_rank * log2pi + q_log_pdet + eps.dot(q_pinv * eps));
  }
  for (int t = 1; t <= steps; ++t) {
    const VectorXd resid =
        observations.col(t - 1) - model.h * states.col(t);
    value += 0.5 * (no * log2pi + no * std::log(model.sigma2) +
                    resid.squaredNorm() / model.sigma2);
  }
  return value;
}

/// Random connected graph with random positive weights; for property tests.
inline Graph random_connected_graph(int n, double p, double wmin, double wmax,
                                    Rng& rng) {
  for (int attempt = 0; attempt < 4000; ++attempt) {
    std::vector<std::tuple<int, int, double>> edges;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.uniform() < p)
          edges.emplace_back(i, j, wmin + (wmax - wmin) * rng.uniform());
    if (edges.empty()) continue;
    Graph g = build_graph(edges, n);
    if (g.connected()) return g;
  }
  throw std::runtime_error("random_connected_graph: no connected sample");
}

}  // namespace gknet::oracle

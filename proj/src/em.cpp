#include "gknet/em.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace gknet {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

struct Workspace {
  MatrixXd a;                   // transition
  MatrixXd da_dc;               // dA/dc
  std::vector<MatrixXd> h_taps; // M L^k, each N_o x N
  MatrixXd h;                   // observation operator
  IncidencePinv pinv;
  MatrixXd b;                   // incidence
};

Workspace make_workspace(const StateSpaceModel& model) {
  Workspace ws;
  ws.a = transition_matrix(model);
  const MatrixXd l = model.graph.dense_laplacian();
  ws.da_dc = model.transition_mode == TransitionMode::kPaperLiteral
                 ? MatrixXd(-l)
                 : MatrixXd(-model.dt * l);
  const int order = model.obs_filter.order();
  const auto observed = model.observed_nodes();
  MatrixXd op;
  switch (model.obs_filter.op) {
    case OperatorKind::kNormalizedLaplacian:
      op = model.graph.dense_normalized_laplacian();
      break;
    default:
      op = l;
      break;
  }
  MatrixXd power = MatrixXd::Identity(l.rows(), l.cols());
  ws.h_taps.reserve(order + 1);
  for (int k = 0; k <= order; ++k) {
    MatrixXd tap(observed.size(), l.cols());
    for (std::size_t r = 0; r < observed.size(); ++r)
      tap.row(r) = power.row(observed[r]);
    ws.h_taps.push_back(std::move(tap));
    if (k < order) power = op * power;
  }
  ws.h = MatrixXd::Zero(observed.size(), l.cols());
  for (int k = 0; k <= order; ++k)
    ws.h += model.obs_filter.coeffs[k] * ws.h_taps[k];
  ws.pinv = incidence_pseudoinverses(model.graph);
  ws.b = model.graph.incidence();
  return ws;
}

double fidelity_trace(const MatrixXd& h, const SufficientStats& s) {
  return s.syy.trace() - 2.0 * (h * s.sxy).trace() +
         (h * s.sxx * h.transpose()).trace();
}

MatrixXd residual_moment(const MatrixXd& a, const SufficientStats& s) {
  return s.sxx - s.scross * a.transpose() - a * s.scross.transpose() +
         a * s.sxx_prev * a.transpose();
}

void check_params(const StateSpaceModel& model, double alpha_floor) {
  if (model.graph.num_edges() == 0)
    throw DataError("likelihood: graph has no edges (Q has rank 0)");
  if (model.alpha.size() != model.graph.num_edges())
    throw DataError("likelihood: alpha length mismatch");
  if (model.alpha.minCoeff() < alpha_floor)
    throw DataError("likelihood: alpha entry below floor");
  if (!(model.sigma2 > 0.0))
    throw DataError("likelihood: sigma2 must be positive");
}

}  // namespace

SufficientStats& SufficientStats::operator+=(const SufficientStats& other) {
  if (steps == 0) {
    *this = other;
    return *this;
  }
  sxx += other.sxx;
  sxx_prev += other.sxx_prev;
  scross += other.scross;
  sxy += other.sxy;
  syy += other.syy;
  s0_sq += other.s0_sq;
  steps += other.steps;
  return *this;
}

SufficientStats accumulate_stats(const SmootherTrace& smoothed,
                                 const MatrixXd& observations) {
  const int steps = smoothed.steps();
  if (static_cast<int>(observations.cols()) != steps)
    throw DataError("accumulate_stats: observation count != smoother steps");
  const int n = static_cast<int>(smoothed.mean[0].size());
  const int no = static_cast<int>(observations.rows());
  SufficientStats s;
  s.sxx = MatrixXd::Zero(n, n);
  s.sxx_prev = MatrixXd::Zero(n, n);
  s.scross = MatrixXd::Zero(n, n);
  s.sxy = MatrixXd::Zero(n, no);
  s.syy = MatrixXd::Zero(no, no);
  s.steps = steps;
  for (int t = 1; t <= steps; ++t) {
    s.sxx += smoothed.mean[t] * smoothed.mean[t].transpose() + smoothed.cov[t];
    s.sxx_prev += smoothed.mean[t - 1] * smoothed.mean[t - 1].transpose() +
                  smoothed.cov[t - 1];
    s.scross += smoothed.mean[t] * smoothed.mean[t - 1].transpose() +
                smoothed.lag_one[t - 1];
    s.sxy += smoothed.mean[t] * observations.col(t - 1).transpose();
    s.syy += observations.col(t - 1) * observations.col(t - 1).transpose();
  }
  s.s0_sq = smoothed.mean[0].squaredNorm() + smoothed.cov[0].trace();
  return s;
}

double nll(const StateSpaceModel& model, const MatrixXd& states,
           const MatrixXd& observations, const NllOptions& opts,
           double alpha_floor) {
  check_params(model, alpha_floor);
  const int steps = static_cast<int>(observations.cols());
  if (states.cols() != steps + 1)
    throw DataError("nll: states must hold x_0 .. x_T");
  const Workspace ws = make_workspace(model);
  const int no = static_cast<int>(ws.h.rows());
  const VectorXd alpha_sq = model.alpha.array().square();

  double fid = 0.0;
  for (int t = 1; t <= steps; ++t)
    fid += (observations.col(t - 1) - ws.h * states.col(t)).squaredNorm();
  double value = 0.5 * no * steps * std::log(model.sigma2) +
                 fid / (2.0 * model.sigma2);

  value += 0.5 * steps * ws.pinv.log_pdet_q(alpha_sq);
  for (int t = 1; t <= steps; ++t) {
    const VectorXd eps = states.col(t) - ws.a * states.col(t - 1);
    value += 0.5 * ws.pinv.quadratic_form(alpha_sq, eps);
  }

  const int n = model.num_nodes();
  value += 0.5 * n * std::log(model.sigma0_2) +
           states.col(0).squaredNorm() / (2.0 * model.sigma0_2);

  if (opts.with_constants)
    value += 0.5 * kLog2Pi * (no * steps + ws.pinv.rank * steps + n);
  return value;
}

double expected_nll(const StateSpaceModel& model, const SufficientStats& stats,
                    const NllOptions& opts, double alpha_floor) {
  check_params(model, alpha_floor);
  const Workspace ws = make_workspace(model);
  const int no = static_cast<int>(ws.h.rows());
  const int steps = stats.steps;
  const VectorXd alpha_sq = model.alpha.array().square();

  double value = 0.5 * no * steps * std::log(model.sigma2) +
                 fidelity_trace(ws.h, stats) / (2.0 * model.sigma2);
  value += 0.5 * steps * ws.pinv.log_pdet_q(alpha_sq);
  const MatrixXd w = residual_moment(ws.a, stats);
  value += 0.5 * (ws.pinv.pinv_q(alpha_sq) * w).trace();

  const int n = model.num_nodes();
  value += 0.5 * n * std::log(model.sigma0_2) +
           stats.s0_sq / (2.0 * model.sigma0_2);
  if (opts.with_constants)
    value += 0.5 * kLog2Pi * (no * steps + ws.pinv.rank * steps + n);
  return value;
}

ExpectedNllGradients expected_nll_gradients(const StateSpaceModel& model,
                                            const SufficientStats& stats) {
  const Workspace ws = make_workspace(model);
  const int steps = stats.steps;
  const int no = static_cast<int>(ws.h.rows());
  const int order = model.obs_filter.order();
  const int m = model.graph.num_edges();
  const VectorXd alpha_sq = model.alpha.array().square();

  ExpectedNllGradients g;
  g.dh.resize(order + 1);
  for (int k = 0; k <= order; ++k) {
    g.dh[k] = (-(ws.h_taps[k] * stats.sxy).trace() +
               (ws.h_taps[k] * stats.sxx * ws.h.transpose()).trace()) /
              model.sigma2;
  }

  const MatrixXd qp = ws.pinv.pinv_q(alpha_sq);
  const MatrixXd w = residual_moment(ws.a, stats);
  const MatrixXd qp_b = qp * ws.b;          // N x m
  const MatrixXd qp_w_qp_b = qp * w * qp_b; // N x m
  g.dalpha.resize(m);
  for (int e = 0; e < m; ++e) {
    const double bqb = ws.b.col(e).dot(qp_b.col(e));
    const double bqwqb = ws.b.col(e).dot(qp_w_qp_b.col(e));
    g.dalpha[e] = model.alpha[e] * (steps * bqb - bqwqb);
  }

  const double fid = fidelity_trace(ws.h, stats);
  g.dsigma2 = 0.5 * no * steps / model.sigma2 -
              fid / (2.0 * model.sigma2 * model.sigma2);

  g.dc = (qp * (ws.a * stats.sxx_prev - stats.scross) * ws.da_dc.transpose())
             .trace();
  return g;
}

double innovations_nll(const StateSpaceModel& model,
                       const MatrixXd& observations) {
  return kalman_filter(model, observations).innovations_nll;
}

StateSpaceModel default_init(const Graph& graph, const MatrixXd& observations,
                             int filter_order, double c,
                             const std::vector<int>& mask, double sigma0_2) {
  StateSpaceModel model;
  model.graph = graph;
  model.c = c;
  model.alpha = VectorXd::Constant(graph.num_edges(), 0.1);
  model.obs_filter.coeffs.assign(filter_order + 1, 0.0);
  model.obs_filter.coeffs[0] = 1.0;
  model.obs_filter.op = OperatorKind::kLaplacian;
  model.mask = mask;
  model.sigma0_2 = sigma0_2;
  if (observations.cols() >= 2) {
    const MatrixXd inc = observations.rightCols(observations.cols() - 1) -
                         observations.leftCols(observations.cols() - 1);
    const double mean = inc.mean();
    model.sigma2 =
        std::max((inc.array() - mean).square().mean(), 1e-8);
  } else {
    model.sigma2 = 0.1;
  }
  return model;
}

namespace {

// M-step over (h, alpha, sigma2) for fixed smoothed statistics.  sigma2 has a
// closed form given h; h takes preconditioned gradient steps with an exact
// line search (the h block is quadratic); alpha is updated either by plain
// backtracking gradient steps or by a damped Newton step on the analytic
// gradient, which handles the nearly flat coupled directions.
class MStepSolver {
 public:
  MStepSolver(const Workspace& ws, const SufficientStats& stats,
              const EMConfig& config)
      : ws_(ws), stats_(stats), config_(config) {
    w_ = residual_moment(ws.a, stats);
    taps_ = static_cast<int>(ws.h_taps.size());
    no_ = static_cast<int>(ws.h.rows());
    m_ = static_cast<int>(ws.b.cols());
    // Gram and linear blocks of the quadratic h objective.
    gram_.resize(taps_, taps_);
    lin_.resize(taps_);
    for (int k = 0; k < taps_; ++k) {
      lin_[k] = (ws.h_taps[k] * stats.sxy).trace();
      for (int l = 0; l <= k; ++l) {
        gram_(k, l) = gram_(l, k) =
            (ws.h_taps[k] * stats.sxx * ws.h_taps[l].transpose()).trace();
      }
    }
  }

  double sigma2_of(const VectorXd& h) const {
    const double fid = h.dot(gram_ * h) - 2.0 * h.dot(lin_) + stats_.syy.trace();
    return std::max(fid / (no_ * stats_.steps), 1e-12);
  }

  // Objective with sigma2 profiled out (its closed form substituted).
  double objective(const VectorXd& h, const VectorXd& alpha) const {
    const VectorXd alpha_sq = alpha.array().square();
    const double s2 = sigma2_of(h);
    double value = 0.5 * no_ * stats_.steps * (std::log(s2) + 1.0);
    value += 0.5 * stats_.steps * ws_.pinv.log_pdet_q(alpha_sq);
    value += 0.5 * (ws_.pinv.pinv_q(alpha_sq) * w_).trace();
    return value;
  }

  VectorXd grad_h(const VectorXd& h) const {
    return (gram_ * h - lin_) / sigma2_of(h);
  }

  VectorXd grad_alpha(const VectorXd& alpha) const {
    const VectorXd alpha_sq = alpha.array().square();
    const MatrixXd qp = ws_.pinv.pinv_q(alpha_sq);
    const MatrixXd qp_b = qp * ws_.b;
    const MatrixXd qp_w_qp_b = qp * w_ * qp_b;
    VectorXd g(m_);
    for (int e = 0; e < m_; ++e) {
      g[e] = alpha[e] * (stats_.steps * ws_.b.col(e).dot(qp_b.col(e)) -
                         ws_.b.col(e).dot(qp_w_qp_b.col(e)));
    }
    return g;
  }

  void h_descent_step(VectorXd& h) const {
    const double s2 = sigma2_of(h);
    const VectorXd g = (gram_ * h - lin_) / s2;
    VectorXd dir = g;
    for (int k = 0; k < taps_; ++k)
      dir[k] /= std::max(gram_(k, k) / s2, 1e-12);
    const double curv = dir.dot(gram_ * dir) / s2;
    if (curv <= 0.0) return;
    h -= (g.dot(dir) / curv) * dir;
  }

  // Closed-form uniform alpha: with a common scale the pseudo-determinant and
  // quadratic terms reduce to a scalar problem.
  double uniform_alpha(const VectorXd&) const {
    const VectorXd ones_sq = VectorXd::Ones(m_);
    const double t2 = (ws_.pinv.pinv_q(ones_sq) * w_).trace();
    return std::sqrt(
        std::max(t2 / (stats_.steps * ws_.pinv.rank), 1e-8));
  }

  void alpha_gradient_steps(VectorXd& alpha, int iters) const {
    for (int it = 0; it < iters; ++it) {
      const VectorXd g = grad_alpha(alpha);
      const double gmax = g.cwiseAbs().maxCoeff();
      if (gmax < 1e-14) return;
      double step = 0.1 * alpha.cwiseAbs().maxCoeff() / gmax;
      const double f0 = objective_alpha_only(alpha);
      bool accepted = false;
      while (step > 1e-14) {
        const VectorXd trial =
            (alpha - step * g).cwiseMax(config_.alpha_floor);
        if (objective_alpha_only(trial) < f0) {
          alpha = trial;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) return;
    }
  }

  void alpha_newton_step(VectorXd& alpha) const {
    const VectorXd g = grad_alpha(alpha);
    MatrixXd hess(m_, m_);
    const double eps = 1e-6;
    for (int e = 0; e < m_; ++e) {
      VectorXd bumped = alpha;
      bumped[e] += eps;
      hess.col(e) = (grad_alpha(bumped) - g) / eps;
    }
    hess = 0.5 * (hess + hess.transpose()).eval();
    double lam = 1e-8 * std::max(std::abs(hess.trace()) / m_, 1.0);
    const double f0 = objective_alpha_only(alpha);
    for (int attempt = 0; attempt < 30; ++attempt) {
      MatrixXd damped = hess;
      damped.diagonal().array() += lam;
      const Eigen::LDLT<MatrixXd> ldlt(damped);
      if (ldlt.info() == Eigen::Success) {
        const VectorXd trial =
            (alpha - ldlt.solve(g)).cwiseMax(config_.alpha_floor);
        if (objective_alpha_only(trial) <= f0 + 1e-12) {
          alpha = trial;
          return;
        }
      }
      lam *= 10.0;
    }
  }

  double objective_alpha_only(const VectorXd& alpha) const {
    const VectorXd alpha_sq = alpha.array().square();
    return 0.5 * stats_.steps * ws_.pinv.log_pdet_q(alpha_sq) +
           0.5 * (ws_.pinv.pinv_q(alpha_sq) * w_).trace();
  }

  // Newton directions against the complete-data curvature; used as
  // preconditioners for likelihood descent.
  VectorXd h_newton_direction(const VectorXd& h) const {
    const double s2 = sigma2_of(h);
    MatrixXd damped = gram_ / s2;
    damped.diagonal().array() += 1e-10 * damped.diagonal().maxCoeff();
    return damped.ldlt().solve((gram_ * h - lin_) / s2);
  }

  VectorXd alpha_newton_direction(const VectorXd& alpha) const {
    const VectorXd g = grad_alpha(alpha);
    MatrixXd hess(m_, m_);
    const double eps = 1e-6;
    for (int e = 0; e < m_; ++e) {
      VectorXd bumped = alpha;
      bumped[e] += eps;
      hess.col(e) = (grad_alpha(bumped) - g) / eps;
    }
    hess = 0.5 * (hess + hess.transpose()).eval();
    double lam = 1e-6 * std::max(std::abs(hess.trace()) / m_, 1.0);
    for (int attempt = 0; attempt < 20; ++attempt) {
      MatrixXd damped = hess;
      damped.diagonal().array() += lam;
      const Eigen::LLT<MatrixXd> llt(damped);
      if (llt.info() == Eigen::Success) {
        const VectorXd dir = llt.solve(g);
        if (dir.dot(g) > 0.0) return dir;  // descent direction
      }
      lam *= 10.0;
    }
    return g / std::max(g.cwiseAbs().maxCoeff(), 1e-12);
  }

  double sigma2_newton_log_direction(double sigma2) const {
    // complete-data objective in u = log sigma2: (NoT/2) u + fid e^{-u}/2
    const double fid = std::max(sigma2_of_fid_, 1e-300);
    const double f1 = 0.5 * no_ * stats_.steps - 0.5 * fid / sigma2;
    const double f2 = std::max(0.5 * fid / sigma2, 1e-12);
    return f1 / f2;
  }

  void bind_fid(const VectorXd& h) {
    sigma2_of_fid_ =
        h.dot(gram_ * h) - 2.0 * h.dot(lin_) + stats_.syy.trace();
  }

 private:
  const Workspace& ws_;
  const SufficientStats& stats_;
  const EMConfig& config_;
  MatrixXd w_;
  MatrixXd gram_;
  VectorXd lin_;
  double sigma2_of_fid_ = 1.0;
  int taps_ = 0, no_ = 0, m_ = 0;
};

void run_mstep(StateSpaceModel& model, const Workspace& ws,
               const SufficientStats& stats, const EMConfig& config,
               bool uniform_alpha_phase) {
  MStepSolver solver(ws, stats, config);
  VectorXd h = Eigen::Map<const VectorXd>(model.obs_filter.coeffs.data(),
                                          model.obs_filter.coeffs.size());
  VectorXd alpha = model.alpha;

  if (uniform_alpha_phase) {
    for (int i = 0; i < 6; ++i) solver.h_descent_step(h);
    alpha.setConstant(std::max(solver.uniform_alpha(alpha),
                               config.alpha_floor));
  } else if (config.mstep == EMConfig::MStep::kNewton) {
    for (int i = 0; i < config.newton_steps; ++i) {
      solver.h_descent_step(h);
      solver.alpha_newton_step(alpha);
    }
  } else {
    for (int i = 0; i < config.mstep_iters; ++i) solver.h_descent_step(h);
    solver.alpha_gradient_steps(alpha, config.mstep_iters);
  }

  model.obs_filter.coeffs.assign(h.data(), h.data() + h.size());
  model.alpha = alpha;
  model.sigma2 = solver.sigma2_of(h);
}

}  // namespace

FitResult em_fit(const MatrixXd& observations, const Graph& graph,
                 const EMConfig& config, const StateSpaceModel& init) {
  if (observations.cols() < 2) throw DataError("em_fit: need T >= 2");
  if (!graph.connected()) throw DataError("em_fit: graph must be connected");

  FitResult result;
  result.model = init;
  result.model.graph = graph;
  result.model.sigma0_2 = config.sigma0_2;
  result.model.alpha = result.model.alpha.cwiseMax(config.alpha_floor);
  result.model.validate();

  const int total = config.warmup_iters + config.max_iters;
  for (int iter = 0; iter < total; ++iter) {
    const bool warmup = iter < config.warmup_iters;
    Workspace ws;
    SufficientStats stats;
    double observed_nll = 0.0;
    try {
      ws = make_workspace(result.model);
      const FilterTrace filt = kalman_filter(result.model, observations);
      observed_nll = filt.innovations_nll;
      const SmootherTrace smoothed = kalman_smoother(result.model, filt);
      stats = accumulate_stats(smoothed, observations);
    } catch (const NumericalError& err) {
      throw NumericalError("em_fit: E-step failed at iteration " +
                           std::to_string(iter) + ": " + err.what());
    }
    if (!warmup) {
      if (!result.nll_trace.empty()) {
        const double prev = result.nll_trace.back();
        if (prev - observed_nll <
            config.rel_tol * std::max(1.0, std::abs(prev))) {
          result.nll_trace.push_back(observed_nll);
          break;
        }
      }
      result.nll_trace.push_back(observed_nll);
    }
    run_mstep(result.model, ws, stats, config, warmup);
  }
  result.final_observed_nll = innovations_nll(result.model, observations);
  return result;
}

namespace {

// Gradient of the complete-data NLL with respect to the state trajectory.
MatrixXd state_gradient(const StateSpaceModel& model, const Workspace& ws,
                        const MatrixXd& states, const MatrixXd& observations) {
  const int steps = static_cast<int>(observations.cols());
  const VectorXd alpha_sq = model.alpha.array().square();
  const MatrixXd qp = ws.pinv.pinv_q(alpha_sq);
  MatrixXd grad = MatrixXd::Zero(states.rows(), states.cols());
  grad.col(0) = states.col(0) / model.sigma0_2;
  for (int t = 1; t <= steps; ++t) {
    const VectorXd resid =
        ws.h * states.col(t) - observations.col(t - 1);
    grad.col(t) += ws.h.transpose() * resid / model.sigma2;
    const VectorXd eps = qp * (states.col(t) - ws.a * states.col(t - 1));
    grad.col(t) += eps;
    grad.col(t - 1) -= ws.a.transpose() * eps;
  }
  return grad;
}

SufficientStats point_stats(const MatrixXd& states,
                            const MatrixXd& observations) {
  const int steps = static_cast<int>(observations.cols());
  const int n = static_cast<int>(states.rows());
  const int no = static_cast<int>(observations.rows());
  SufficientStats s;
  s.sxx = MatrixXd::Zero(n, n);
  s.sxx_prev = MatrixXd::Zero(n, n);
  s.scross = MatrixXd::Zero(n, n);
  s.sxy = MatrixXd::Zero(n, no);
  s.syy = MatrixXd::Zero(no, no);
  s.steps = steps;
  for (int t = 1; t <= steps; ++t) {
    s.sxx += states.col(t) * states.col(t).transpose();
    s.sxx_prev += states.col(t - 1) * states.col(t - 1).transpose();
    s.scross += states.col(t) * states.col(t - 1).transpose();
    s.sxy += states.col(t) * observations.col(t - 1).transpose();
    s.syy += observations.col(t - 1) * observations.col(t - 1).transpose();
  }
  s.s0_sq = states.col(0).squaredNorm();
  return s;
}

}  // namespace

FitResult grad_fit(const MatrixXd& observations, const Graph& graph,
                   const EMConfig& config, const StateSpaceModel& init) {
  if (observations.cols() < 2) throw DataError("grad_fit: need T >= 2");
  if (!graph.connected()) throw DataError("grad_fit: graph must be connected");

  FitResult result;
  result.model = init;
  result.model.graph = graph;
  result.model.sigma0_2 = config.sigma0_2;
  result.model.alpha = result.model.alpha.cwiseMax(config.alpha_floor);
  result.model.validate();

  // Start the latent block at the smoother means under the initial
  // parameters: the state subproblem is quadratic and this is its optimum.
  {
    const FilterTrace filt = kalman_filter(result.model, observations);
    const SmootherTrace smoothed = kalman_smoother(result.model, filt);
    result.states.resize(result.model.num_nodes(), observations.cols() + 1);
    for (int t = 0; t <= smoothed.steps(); ++t)
      result.states.col(t) = smoothed.mean[t];
  }

  // Joint minimization of the likelihood over parameters and states: the
  // state block is solved exactly by re-inferring the smoothed means (its
  // subproblem is quadratic with the smoother mean as optimum), and the
  // parameter block takes backtracked first-order steps.  With the states at
  // their block optimum the parameter gradient of the complete-data
  // objective, averaged over the state posterior, equals the gradient of the
  // observed-data NLL, which is therefore the quantity driven downhill and
  // recorded in the trace.
  double current = innovations_nll(result.model, observations);
  result.nll_trace.push_back(current);
  int bad_steps = 0;
  double scale = 1.0;

  for (int iter = 0; iter < config.max_iters; ++iter) {
    const FilterTrace filt = kalman_filter(result.model, observations);
    const SmootherTrace smoothed = kalman_smoother(result.model, filt);
    for (int t = 0; t <= smoothed.steps(); ++t)
      result.states.col(t) = smoothed.mean[t];
    const SufficientStats stats = accumulate_stats(smoothed, observations);
    const Workspace ws = make_workspace(result.model);
    MStepSolver solver(ws, stats, config);
    const VectorXd h0 = Eigen::Map<const VectorXd>(
        result.model.obs_filter.coeffs.data(),
        result.model.obs_filter.coeffs.size());
    solver.bind_fid(h0);
    const VectorXd dir_h = solver.h_newton_direction(h0);
    const VectorXd dir_alpha = solver.alpha_newton_direction(result.model.alpha);
    const double dir_log_sigma2 =
        solver.sigma2_newton_log_direction(result.model.sigma2);
    double dir_c = 0.0;
    if (config.learn_c) {
      const ExpectedNllGradients g =
          expected_nll_gradients(result.model, stats);
      dir_c = std::max(result.model.c, 1e-8) * g.dc;
      dir_c /= std::max(std::abs(g.dc), 1.0);  // conservative scaling
    }
    const double dir_norm = std::max(
        {dir_h.cwiseAbs().maxCoeff(), dir_alpha.cwiseAbs().maxCoeff(),
         std::abs(dir_log_sigma2), std::abs(dir_c)});
    if (dir_norm < 1e-13) break;

    double step = scale;
    bool accepted = false;
    for (int attempt = 0; attempt < 30; ++attempt) {
      StateSpaceModel trial = result.model;
      const VectorXd h = h0 - step * dir_h;
      trial.obs_filter.coeffs.assign(h.data(), h.data() + h.size());
      trial.alpha =
          (result.model.alpha - step * dir_alpha).cwiseMax(config.alpha_floor);
      trial.sigma2 = result.model.sigma2 * std::exp(-step * dir_log_sigma2);
      if (config.learn_c)
        trial.c = std::max(result.model.c - step * dir_c, 0.0);
      double value;
      try {
        value = innovations_nll(trial, observations);
      } catch (const NumericalError&) {
        step *= 0.5;
        continue;
      }
      if (value < current) {
        result.model = trial;
        const double drop = current - value;
        current = value;
        accepted = true;
        scale = std::min(scale * 2.0, 1.0);
        result.nll_trace.push_back(current);
        if (drop < config.rel_tol * std::max(1.0, std::abs(current)))
          iter = config.max_iters;  // converged
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      scale *= 0.5;
      if (++bad_steps >= 10) break;  // no descent at this scale
    } else {
      bad_steps = 0;
    }
  }

  // Final state inference at the fitted parameters.
  const FilterTrace filt = kalman_filter(result.model, observations);
  const SmootherTrace smoothed = kalman_smoother(result.model, filt);
  for (int t = 0; t <= smoothed.steps(); ++t)
    result.states.col(t) = smoothed.mean[t];
  result.final_observed_nll = current;
  return result;
}

void write_model_json(const FitResult& fit, const std::string& graph_file,
                      const std::string& path) {
  nlohmann::json j;
  j["c"] = fit.model.c;
  j["h"] = fit.model.obs_filter.coeffs;
  j["alpha"] = std::vector<double>(fit.model.alpha.data(),
                                   fit.model.alpha.data() + fit.model.alpha.size());
  j["sigma2"] = fit.model.sigma2;
  j["sigma0_2"] = fit.model.sigma0_2;
  j["transition_mode"] =
      fit.model.transition_mode == TransitionMode::kEuler ? "euler"
                                                          : "paper-literal";
  j["dt"] = fit.model.dt;
  j["filter_operator"] =
      fit.model.obs_filter.op == OperatorKind::kNormalizedLaplacian
          ? "normalized-laplacian"
          : "laplacian";
  j["mask"] = fit.model.mask;
  j["graph_file"] = graph_file;
  j["nll_trace"] = fit.nll_trace;
  j["final_observed_nll"] = fit.final_observed_nll;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write model file: " + path);
  out << j.dump(2) << "\n";
}

StateSpaceModel read_model_json(const std::string& path, const Graph& graph) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file: " + path);
  nlohmann::json j;
  in >> j;
  StateSpaceModel model;
  model.graph = graph;
  model.c = j.at("c").get<double>();
  model.obs_filter.coeffs = j.at("h").get<std::vector<double>>();
  const auto alpha = j.at("alpha").get<std::vector<double>>();
  model.alpha = Eigen::Map<const VectorXd>(alpha.data(), alpha.size());
  model.sigma2 = j.at("sigma2").get<double>();
  model.sigma0_2 = j.at("sigma0_2").get<double>();
  model.transition_mode = j.at("transition_mode").get<std::string>() == "euler"
                              ? TransitionMode::kEuler
                              : TransitionMode::kPaperLiteral;
  model.dt = j.value("dt", 1.0);
  model.obs_filter.op =
      j.value("filter_operator", std::string("laplacian")) ==
              "normalized-laplacian"
          ? OperatorKind::kNormalizedLaplacian
          : OperatorKind::kLaplacian;
  model.mask = j.value("mask", std::vector<int>{});
  model.validate();
  return model;
}

}  // namespace gknet

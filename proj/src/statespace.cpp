#include "gknet/statespace.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gknet/random.hpp"

namespace gknet {

std::vector<int> StateSpaceModel::observed_nodes() const {
  if (!mask.empty()) return mask;
  std::vector<int> all(graph.num_nodes());
  std::iota(all.begin(), all.end(), 0);
  return all;
}

void StateSpaceModel::validate() const {
  const int n = graph.num_nodes(), m = graph.num_edges();
  if (n == 0) throw DataError("model: empty graph");
  if (alpha.size() != m) throw DataError("model: alpha length != edge count");
  if (alpha.minCoeff() < 0.0) throw DataError("model: negative alpha entry");
  if (obs_filter.coeffs.empty()) throw DataError("model: empty filter");
  if (obs_filter.op == OperatorKind::kEdgeLaplacian)
    throw DataError("model: observation filter must act on node signals");
  // Zero variances are legal for simulation (noise-free runs); inference
  // paths require sigma2 > 0 and check it separately.
  if (sigma2 < 0.0) throw DataError("model: negative sigma2");
  if (sigma0_2 < 0.0) throw DataError("model: negative sigma0_2");
  if (c < 0.0) throw DataError("model: negative diffusivity");
  for (const int idx : mask)
    if (idx < 0 || idx >= n) throw DataError("model: mask index out of range");
}

VectorXd apply_transition(const StateSpaceModel& model, const VectorXd& x) {
  VectorXd lx(x.size());
  model.graph.apply_laplacian(x, lx);
  if (model.transition_mode == TransitionMode::kPaperLiteral)
    return -model.c * lx;
  return x - model.c * model.dt * lx;
}

MatrixXd transition_matrix(const StateSpaceModel& model) {
  const MatrixXd l = model.graph.dense_laplacian();
  if (model.transition_mode == TransitionMode::kPaperLiteral)
    return -model.c * l;
  return MatrixXd::Identity(l.rows(), l.cols()) - model.c * model.dt * l;
}

MatrixXd observation_matrix(const StateSpaceModel& model) {
  const MatrixXd full = dense_filter_matrix(model.obs_filter, model.graph);
  if (model.mask.empty()) return full;
  MatrixXd h(model.mask.size(), full.cols());
  for (std::size_t r = 0; r < model.mask.size(); ++r)
    h.row(r) = full.row(model.mask[r]);
  return h;
}

MatrixXd process_noise_cov(const StateSpaceModel& model) {
  const MatrixXd b = model.graph.incidence();
  return b * model.alpha.array().square().matrix().asDiagonal() *
         b.transpose();
}

Trajectory simulate(const StateSpaceModel& model, int steps,
                    std::uint64_t seed) {
  model.validate();
  if (steps < 1) throw DataError("simulate: need at least one step");
  const int n = model.num_nodes(), m = model.graph.num_edges();
  const auto observed = model.observed_nodes();
  Rng root(seed);
  Rng init = root.substream("init");
  Rng noise = root.substream("noise");

  Trajectory traj;
  traj.seed = seed;
  traj.states.resize(n, steps + 1);
  traj.observations.resize(observed.size(), steps);

  const double s0 = std::sqrt(model.sigma0_2);
  for (int i = 0; i < n; ++i) traj.states(i, 0) = s0 * init.normal();

  const double sv = std::sqrt(model.sigma2);
  VectorXd w(m), noise_nodes(n);
  for (int t = 1; t <= steps; ++t) {
    VectorXd x = apply_transition(model, traj.states.col(t - 1));
    for (int e = 0; e < m; ++e) w[e] = model.alpha[e] * noise.normal();
    model.graph.apply_incidence(w, noise_nodes);
    x += noise_nodes;
    traj.states.col(t) = x;
    const VectorXd filtered = apply_filter(model.obs_filter, model.graph, x);
    for (std::size_t r = 0; r < observed.size(); ++r)
      traj.observations(r, t - 1) = filtered[observed[r]] + sv * noise.normal();
  }
  return traj;
}

GraphFilter default_benchmark_filter() {
  GraphFilter f;
  f.op = OperatorKind::kNormalizedLaplacian;
  f.coeffs = {1.0, -1.0, 0.5, -1.0 / 6.0};
  return f;
}

std::vector<int> draw_node_subset(int n, int k, Rng& rng) {
  if (k < 0 || k > n) throw DataError("draw_node_subset: k out of range");
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<int> subset(perm.begin(), perm.begin() + k);
  std::sort(subset.begin(), subset.end());
  return subset;
}

namespace {

double laplacian_lambda_max(const Graph& g) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(g.dense_laplacian());
  return es.eigenvalues().maxCoeff();
}

}  // namespace

BenchmarkRun simulate_benchmark(const DynamicsSpec& spec, const Graph& g,
                                int steps, std::uint64_t seed) {
  if (spec.kind == DynamicsKind::kSsm)
    throw DataError("simulate_benchmark: kind must be a benchmark variant");
  if (steps < 1) throw DataError("simulate_benchmark: need a positive horizon");
  const int n = g.num_nodes();

  Rng root(seed);
  Rng init = root.substream("init");
  Rng noise = root.substream("noise");
  Rng maskrng = root.substream("mask");

  BenchmarkRun run;
  if (spec.mask_nodes) {
    run.mask = *spec.mask_nodes;
    for (const int idx : run.mask)
      if (idx < 0 || idx >= n)
        throw DataError("simulate_benchmark: mask index out of range");
  } else if (spec.num_observed) {
    const int no = *spec.num_observed;
    if (no < 1 || no > n)
      throw DataError("simulate_benchmark: observed count out of range");
    run.mask = draw_node_subset(n, no, maskrng);
  } else {
    run.mask.resize(n);
    std::iota(run.mask.begin(), run.mask.end(), 0);
  }
  const int no = static_cast<int>(run.mask.size());

  double inv_scale = 1.0;
  if (spec.scale != BenchmarkOperatorScale::kRaw)
    inv_scale = 1.0 / laplacian_lambda_max(g);

  GraphFilter obs = spec.obs_filter;
  if (obs.coeffs.empty()) obs = default_benchmark_filter();

  run.trajectory.seed = seed;
  run.trajectory.states.resize(n, steps + 1);
  run.trajectory.observations.resize(no, steps);
  run.clean_signal.resize(n, steps);

  VectorXd x(n), lx(n);
  const double s0 = std::sqrt(spec.sigma0_2);
  for (int i = 0; i < n; ++i) x[i] = s0 * init.normal();
  run.trajectory.states.col(0) = x;

  const double sq = std::sqrt(spec.sigma_q2), sr = std::sqrt(spec.sigma_r2);
  int completed = steps;
  for (int t = 1; t <= steps; ++t) {
    g.apply_laplacian(x, lx);
    VectorXd next(n);
    switch (spec.kind) {
      case DynamicsKind::kLinearBenchmark:
        switch (spec.scale) {
          case BenchmarkOperatorScale::kRaw:
            next = lx;
            break;
          case BenchmarkOperatorScale::kSpectral:
            next = inv_scale * lx;
            break;
          case BenchmarkOperatorScale::kDiffusion:
            next = x - inv_scale * lx;
            break;
        }
        break;
      case DynamicsKind::kNonlinearBenchmark: {
        VectorXd arg = lx;
        if (spec.scale != BenchmarkOperatorScale::kRaw) arg *= inv_scale;
        next = x.array().sin().matrix() + arg.array().cos().matrix();
        break;
      }
      default:
        break;
    }
    for (int i = 0; i < n; ++i) next[i] += sq * noise.normal();
    if (!next.allFinite()) {
      completed = t - 1;
      run.truncated = true;
      std::ostringstream os;
      os << "non-finite state at step " << t << "; trajectory truncated";
      run.diagnostic = os.str();
      break;
    }
    x = next;
    run.trajectory.states.col(t) = x;
    const VectorXd filtered = apply_filter(obs, g, x);
    run.clean_signal.col(t - 1) = filtered;
    for (int r = 0; r < no; ++r)
      run.trajectory.observations(r, t - 1) =
          filtered[run.mask[r]] + sr * noise.normal();
  }
  if (completed < steps) {
    run.trajectory.states.conservativeResize(n, completed + 1);
    run.trajectory.observations.conservativeResize(no, completed);
    run.clean_signal.conservativeResize(n, completed);
  }
  return run;
}

MatrixXd analytic_kernel_cov(const Graph& g, double c, const MatrixXd& s,
                             double t, double time_s) {
  if (t < 0.0 || time_s < 0.0)
    throw DataError("analytic_kernel_cov: times must be nonnegative");
  if (!(c > 0.0)) throw DataError("analytic_kernel_cov: need c > 0");
  if (s.rows() != g.num_nodes())
    throw DataError("analytic_kernel_cov: dispersion rows != node count");
  // Formula is stated for t >= s; the other order follows by symmetry.
  if (t < time_s)
    return analytic_kernel_cov(g, c, s, time_s, t).transpose();

  Eigen::SelfAdjointEigenSolver<MatrixXd> es(g.dense_laplacian());
  const VectorXd lam = es.eigenvalues();
  const MatrixXd& v = es.eigenvectors();
  const int n = g.num_nodes();
  int zeros = 0;
  for (int i = 0; i < n; ++i)
    if (lam[i] < 1e-10) ++zeros;
  if (zeros > 1)
    throw DataError(
        "analytic_kernel_cov: repeated zero eigenvalues (disconnected graph)");

  const MatrixXd gram = v.transpose() * (s * s.transpose()) * v;
  MatrixXd cmat(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double li = std::max(lam[i], 0.0), lj = std::max(lam[j], 0.0);
      if (li + lj < 1e-12) {
        cmat(i, j) = gram(i, j) * std::min(t, time_s);
      } else {
        cmat(i, j) = gram(i, j) / (c * (li + lj)) *
                     (std::exp(-c * li * (t - time_s)) -
                      std::exp(-c * (li * t + lj * time_s)));
      }
    }
  }
  return v * cmat * v.transpose();
}

Graph perturb_graph(const Graph& g, double sigma_e, std::uint64_t seed) {
  if (sigma_e < 0.0) throw DataError("perturb_graph: negative sigma_e");
  Rng rng(seed);
  std::vector<Edge> edges = g.edges();
  for (auto& e : edges) {
    const double delta = sigma_e * rng.normal();
    e.w = std::max(e.w + delta, 0.05 * e.w);
  }
  return Graph::from_edges(edges, g.num_nodes());
}

double target_snr_noise(const Trajectory& clean, double snr_db) {
  const double power = clean.observations.array().square().mean();
  if (!(power > 0.0)) throw DataError("target_snr_noise: zero signal power");
  return power / std::pow(10.0, snr_db / 10.0);
}

void write_trajectory_csv(const MatrixXd& matrix, const std::string& path,
                          int first_t, const std::vector<int>& node_ids) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write trajectory file: " + path);
  out.precision(17);
  out << "t,node,value\n";
  for (int t = 0; t < matrix.cols(); ++t)
    for (int r = 0; r < matrix.rows(); ++r) {
      const int node = node_ids.empty() ? r : node_ids[r];
      out << (first_t + t) << "," << node << "," << matrix(r, t) << "\n";
    }
}

MatrixXd read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trajectory file: " + path);
  std::string line;
  std::getline(in, line);  // header
  struct Cell {
    int t, node;
    double value;
  };
  std::vector<Cell> cells;
  int max_t = -1, min_t = 0, max_node = -1;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Cell c;
    char comma;
    if (!(ls >> c.t >> comma >> c.node >> comma >> c.value))
      throw DataError("malformed trajectory row: " + line);
    if (first) {
      min_t = c.t;
      first = false;
    }
    min_t = std::min(min_t, c.t);
    max_t = std::max(max_t, c.t);
    max_node = std::max(max_node, c.node);
    cells.push_back(c);
  }
  if (cells.empty()) throw DataError("empty trajectory file: " + path);
  MatrixXd out = MatrixXd::Zero(max_node + 1, max_t - min_t + 1);
  for (const auto& c : cells) out(c.node, c.t - min_t) = c.value;
  return out;
}

}  // namespace gknet

#include "gknet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "gknet/random.hpp"

namespace gknet {

Graph Graph::from_edges(const std::vector<Edge>& edges, int num_nodes) {
  Graph g;
  g.edges_ = edges;
  int max_idx = -1;
  for (const auto& e : edges) max_idx = std::max(max_idx, std::max(e.u, e.v));
  g.n_ = num_nodes >= 0 ? num_nodes : max_idx + 1;
  g.neighbors_.assign(g.n_, {});
  g.degrees_ = VectorXd::Zero(g.n_);
  for (const auto& e : g.edges_) {
    g.neighbors_[e.u].emplace_back(e.v, e.w);
    g.neighbors_[e.v].emplace_back(e.u, e.w);
    g.degrees_[e.u] += e.w;
    g.degrees_[e.v] += e.w;
  }
  return g;
}

bool Graph::connected() const {
  if (n_ == 0) return false;
  if (n_ == 1) return true;
  std::vector<char> seen(n_, 0);
  std::vector<int> stack = {0};
  seen[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    const int u = stack.back();
    stack.pop_back();
    for (const auto& [v, w] : neighbors_[u]) {
      if (!seen[v]) {
        seen[v] = 1;
        ++count;
        stack.push_back(v);
      }
    }
  }
  return count == n_;
}

void Graph::apply_laplacian(const VectorXd& x, VectorXd& y) const {
  if (x.size() != n_) throw DataError("laplacian: signal length != node count");
  y = degrees_.cwiseProduct(x);
  for (const auto& e : edges_) {
    y[e.u] -= e.w * x[e.v];
    y[e.v] -= e.w * x[e.u];
  }
}

void Graph::apply_normalized_laplacian(const VectorXd& x, VectorXd& y) const {
  if (x.size() != n_)
    throw DataError("normalized laplacian: signal length != node count");
  y = x;
  for (const auto& e : edges_) {
    const double du = degrees_[e.u], dv = degrees_[e.v];
    if (du <= 0.0 || dv <= 0.0) continue;
    const double s = e.w / std::sqrt(du * dv);
    y[e.u] -= s * x[e.v];
    y[e.v] -= s * x[e.u];
  }
  // isolated nodes: row of I - D^{-1/2} A D^{-1/2} degenerates to x itself;
  // leave as initialized.
}

void Graph::apply_incidence(const VectorXd& z, VectorXd& y) const {
  if (z.size() != num_edges())
    throw DataError("incidence: signal length != edge count");
  y = VectorXd::Zero(n_);
  for (int e = 0; e < num_edges(); ++e) {
    const double s = std::sqrt(edges_[e].w) * z[e];
    y[edges_[e].u] += s;
    y[edges_[e].v] -= s;
  }
}

void Graph::apply_incidence_t(const VectorXd& x, VectorXd& z) const {
  if (x.size() != n_)
    throw DataError("incidence^T: signal length != node count");
  z.resize(num_edges());
  for (int e = 0; e < num_edges(); ++e) {
    z[e] = std::sqrt(edges_[e].w) * (x[edges_[e].u] - x[edges_[e].v]);
  }
}

void Graph::apply_edge_laplacian(const VectorXd& z, VectorXd& y) const {
  VectorXd node = VectorXd::Zero(n_);
  apply_incidence(z, node);
  apply_incidence_t(node, y);
}

MatrixXd Graph::dense_adjacency() const {
  MatrixXd a = MatrixXd::Zero(n_, n_);
  for (const auto& e : edges_) {
    a(e.u, e.v) = e.w;
    a(e.v, e.u) = e.w;
  }
  return a;
}

MatrixXd Graph::dense_laplacian() const {
  MatrixXd a = dense_adjacency();
  MatrixXd l = -a;
  l.diagonal() += a.rowwise().sum();
  return l;
}

MatrixXd Graph::dense_normalized_laplacian() const {
  MatrixXd l = MatrixXd::Identity(n_, n_);
  for (const auto& e : edges_) {
    const double du = degrees_[e.u], dv = degrees_[e.v];
    if (du <= 0.0 || dv <= 0.0) continue;
    const double s = e.w / std::sqrt(du * dv);
    l(e.u, e.v) -= s;
    l(e.v, e.u) -= s;
  }
  return l;
}

MatrixXd Graph::incidence() const {
  MatrixXd b = MatrixXd::Zero(n_, num_edges());
  for (int e = 0; e < num_edges(); ++e) {
    const double s = std::sqrt(edges_[e].w);
    b(edges_[e].u, e) = s;
    b(edges_[e].v, e) = -s;
  }
  return b;
}

MatrixXd Graph::dense_edge_laplacian() const {
  const MatrixXd b = incidence();
  return b.transpose() * b;
}

namespace {

std::string edge_str(int i, int j, double w) {
  std::ostringstream os;
  os << "(" << i << ", " << j << ", " << w << ")";
  return os.str();
}

}  // namespace

Graph build_graph(const std::vector<std::tuple<int, int, double>>& edge_list,
                  int num_nodes) {
  std::vector<Edge> edges;
  edges.reserve(edge_list.size());
  std::set<std::pair<int, int>> seen;
  int max_idx = -1;
  for (const auto& [i, j, w] : edge_list) {
    if (i == j)
      throw DataError("build_graph: self-loop at edge " + edge_str(i, j, w));
    if (i < 0 || j < 0)
      throw DataError("build_graph: negative node index at edge " +
                      edge_str(i, j, w));
    if (num_nodes >= 0 && (i >= num_nodes || j >= num_nodes))
      throw DataError("build_graph: node index out of range at edge " +
                      edge_str(i, j, w));
    if (!(w > 0.0))
      throw DataError("build_graph: nonpositive weight at edge " +
                      edge_str(i, j, w));
    const int u = std::min(i, j), v = std::max(i, j);
    if (!seen.insert({u, v}).second)
      throw DataError("build_graph: duplicate undirected edge " +
                      edge_str(i, j, w));
    edges.push_back({u, v, w});
    max_idx = std::max(max_idx, v);
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.u, a.v) < std::tie(b.u, b.v);
  });
  return Graph::from_edges(edges, num_nodes);
}

Graph read_edge_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open edge list file: " + path);
  std::vector<std::tuple<int, int, double>> edges;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    int i, j;
    double w;
    if (ls >> i >> j >> w) edges.emplace_back(i, j, w);
  }
  return build_graph(edges);
}

void write_edge_list(const Graph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write edge list file: " + path);
  out.precision(17);
  for (const auto& e : g.edges()) out << e.u << " " << e.v << " " << e.w << "\n";
}

VectorXd apply_filter(const GraphFilter& f, const Graph& g, const VectorXd& x) {
  if (f.coeffs.empty()) throw DataError("apply_filter: empty coefficients");
  const int dim = f.op == OperatorKind::kEdgeLaplacian ? g.num_edges()
                                                       : g.num_nodes();
  if (x.size() != dim)
    throw DataError("apply_filter: signal length does not match operator");
  VectorXd acc = f.coeffs[0] * x;
  VectorXd power = x;
  VectorXd tmp(dim);
  for (std::size_t k = 1; k < f.coeffs.size(); ++k) {
    switch (f.op) {
      case OperatorKind::kLaplacian:
        g.apply_laplacian(power, tmp);
        break;
      case OperatorKind::kNormalizedLaplacian:
        g.apply_normalized_laplacian(power, tmp);
        break;
      case OperatorKind::kEdgeLaplacian:
        g.apply_edge_laplacian(power, tmp);
        break;
    }
    power = tmp;
    acc += f.coeffs[k] * power;
  }
  return acc;
}

MatrixXd dense_filter_matrix(const GraphFilter& f, const Graph& g) {
  const int dim = f.op == OperatorKind::kEdgeLaplacian ? g.num_edges()
                                                       : g.num_nodes();
  MatrixXd out(dim, dim);
  for (int c = 0; c < dim; ++c) {
    VectorXd e = VectorXd::Zero(dim);
    e[c] = 1.0;
    out.col(c) = apply_filter(f, g, e);
  }
  return out;
}

Graph erdos_renyi(int n, double p, std::uint64_t seed) {
  if (n < 2) throw DataError("erdos_renyi: need n >= 2");
  if (!(p > 0.0 && p <= 1.0)) throw DataError("erdos_renyi: need 0 < p <= 1");
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Rng rng(seed + static_cast<std::uint64_t>(attempt));
    std::vector<Edge> edges;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.uniform() < p) edges.push_back({i, j, 1.0});
    Graph g = Graph::from_edges(edges, n);
    if (g.connected()) return g;
  }
  throw NumericalError("erdos_renyi: no connected sample in 1000 attempts");
}

IncidencePinv incidence_pseudoinverses(const Graph& g) {
  const int n = g.num_nodes(), m = g.num_edges();
  if (m == 0) throw DataError("incidence_pseudoinverses: graph has no edges");
  const MatrixXd b = g.incidence();
  Eigen::JacobiSVD<MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd& sv = svd.singularValues();
  const double tol = 1e-12 * std::max(n, m) * sv[0];
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv[i] > tol) ++rank;
  if (rank != n - 1)
    throw DataError(
        "incidence_pseudoinverses: graph is disconnected (incidence rank " +
        std::to_string(rank) + ", expected " + std::to_string(n - 1) + ")");
  IncidencePinv out;
  out.rank = rank;
  out.range_basis = svd.matrixU().leftCols(rank);
  out.row_factor =
      svd.matrixV().leftCols(rank) * sv.head(rank).asDiagonal();
  // Moore-Penrose pseudo-inverse; the left ((B^T B)^+ B^T) and right
  // (B^T (B B^T)^+) factors coincide with it.
  out.left = svd.matrixV().leftCols(rank) *
             sv.head(rank).cwiseInverse().asDiagonal() *
             svd.matrixU().leftCols(rank).transpose();
  out.right = out.left;
  return out;
}

namespace {

Eigen::LDLT<MatrixXd> mid_factor(const IncidencePinv& p, const VectorXd& a) {
  if (a.size() != p.row_factor.rows())
    throw DataError("pinv_q: diagonal length != edge count");
  const MatrixXd gram =
      p.row_factor.transpose() * a.asDiagonal() * p.row_factor;
  return gram.ldlt();
}

}  // namespace

MatrixXd IncidencePinv::pinv_q(const VectorXd& a) const {
  const auto ldlt = mid_factor(*this, a);
  return range_basis * ldlt.solve(range_basis.transpose());
}

VectorXd IncidencePinv::pinv_q_apply(const VectorXd& a,
                                     const VectorXd& v) const {
  const auto ldlt = mid_factor(*this, a);
  return range_basis * ldlt.solve(range_basis.transpose() * v);
}

double IncidencePinv::quadratic_form(const VectorXd& a,
                                     const VectorXd& v) const {
  const auto ldlt = mid_factor(*this, a);
  const VectorXd u = range_basis.transpose() * v;
  return u.dot(ldlt.solve(u));
}

double IncidencePinv::log_pdet_q(const VectorXd& a) const {
  const auto ldlt = mid_factor(*this, a);
  const VectorXd d = ldlt.vectorD();
  double sum = 0.0;
  for (int i = 0; i < d.size(); ++i) {
    if (!(d[i] > 0.0))
      throw NumericalError("log_pdet_q: factor not positive definite");
    sum += std::log(d[i]);
  }
  return sum;
}

}  // namespace gknet

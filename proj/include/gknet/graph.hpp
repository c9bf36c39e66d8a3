#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "gknet/common.hpp"

namespace gknet {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Edge {
  int u = 0;  // u < v
  int v = 0;
  double w = 1.0;
};

/// Undirected weighted graph.  Edges are canonicalized (u < v, w > 0); the
/// adjacency is kept as neighbor lists so operator applications run in O(m).
class Graph {
 public:
  Graph() = default;

  int num_nodes() const { return n_; }
  int num_edges() const { return static_cast<int>(edges_.size()); }
  const std::vector<Edge>& edges() const { return edges_; }
  const VectorXd& degrees() const { return degrees_; }

  bool connected() const;

  /// y = L x  with L = diag(A 1) - A.
  void apply_laplacian(const VectorXd& x, VectorXd& y) const;
  /// y = (I - D^{-1/2} A D^{-1/2}) x.
  void apply_normalized_laplacian(const VectorXd& x, VectorXd& y) const;
  /// y = B^T B z on edge signals (z has one entry per edge).
  void apply_edge_laplacian(const VectorXd& z, VectorXd& y) const;
  /// y = B z, mapping edge signals to nodes.
  void apply_incidence(const VectorXd& z, VectorXd& y) const;
  /// z = B^T x, mapping node signals to edges.
  void apply_incidence_t(const VectorXd& x, VectorXd& z) const;

  MatrixXd dense_adjacency() const;
  MatrixXd dense_laplacian() const;
  MatrixXd dense_normalized_laplacian() const;
  MatrixXd dense_edge_laplacian() const;

  /// Oriented weighted incidence: column e of edge (u, v) holds +sqrt(w) at
  /// row u and -sqrt(w) at row v, so that B B^T = L entrywise.
  MatrixXd incidence() const;

  static Graph from_edges(const std::vector<Edge>& edges, int num_nodes = -1);

 private:
  int n_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::pair<int, double>>> neighbors_;
  VectorXd degrees_;  // weighted
};

/// Builds a graph from an edge list, canonicalizing and validating it.
/// When num_nodes < 0 the node count is inferred as max index + 1.
/// Throws DataError identifying the offending edge for self-loops, duplicate
/// undirected edges, nonpositive weights, or out-of-range indices.
Graph build_graph(const std::vector<std::tuple<int, int, double>>& edge_list,
                  int num_nodes = -1);

/// Reads "i j w" lines ('#' comments, 0-based indices).
Graph read_edge_list(const std::string& path);
void write_edge_list(const Graph& g, const std::string& path);

enum class OperatorKind { kLaplacian, kNormalizedLaplacian, kEdgeLaplacian };

/// Polynomial graph filter sum_k coeffs[k] * Op^k.
struct GraphFilter {
  std::vector<double> coeffs;
  OperatorKind op = OperatorKind::kLaplacian;

  int order() const { return static_cast<int>(coeffs.size()) - 1; }
};

/// Applies the filter by iterated operator application (Op^k is never
/// materialized); cost O(m K) per signal.
VectorXd apply_filter(const GraphFilter& f, const Graph& g, const VectorXd& x);

/// Dense matrix of the filter polynomial; used by modules that need the full
/// observation operator (and by oracles).
MatrixXd dense_filter_matrix(const GraphFilter& f, const Graph& g);

/// Connected Erdos-Renyi sample, deterministic in (n, p, seed).  Resamples
/// with incremented seed until connected, at most 1000 attempts.
Graph erdos_renyi(int n, double p, std::uint64_t seed);

/// Precomputed pseudo-inverse factors of the incidence matrix B.
///
/// `left` and `right` are the left/right Moore-Penrose factors of B (they
/// coincide for the Moore-Penrose pseudo-inverse; both m-by-n views are kept
/// for the documented interface).  `range_basis` (U, n-by-r) and
/// `row_factor` (W = V Sigma, m-by-r) come from the SVD of B and allow the
/// exact reconstruction
///     pinv(B diag(a) B^T) = U (W^T diag(a) W)^{-1} U^T,   a > 0,
/// which holds on graphs with cycles too, where the plain
/// left^T diag(1/a) right form is exact only on trees.
struct IncidencePinv {
  MatrixXd left;         // m x n
  MatrixXd right;        // m x n
  MatrixXd range_basis;  // n x r, orthonormal columns spanning range(B)
  MatrixXd row_factor;   // m x r, W = V Sigma
  int rank = 0;

  /// pinv(Q) for Q = B diag(a) B^T, a > 0 entrywise.
  MatrixXd pinv_q(const VectorXd& a) const;
  /// x = pinv(Q) v.
  VectorXd pinv_q_apply(const VectorXd& a, const VectorXd& v) const;
  /// v^T pinv(Q) v.
  double quadratic_form(const VectorXd& a, const VectorXd& v) const;
  /// log pseudo-determinant of Q (sum of log of the r nonzero eigenvalues).
  double log_pdet_q(const VectorXd& a) const;
};

/// Computes the factors; requires a connected graph (rank m deficiency beyond
/// the single null vector is rejected).
IncidencePinv incidence_pseudoinverses(const Graph& g);

}  // namespace gknet

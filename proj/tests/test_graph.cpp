#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "gknet/graph.hpp"
#include "gknet/random.hpp"
#include "oracles.hpp"

using namespace gknet;

namespace {

Graph path3() { return build_graph({{0, 1, 1.0}, {1, 2, 1.0}}); }

}  // namespace

TEST_CASE("build_graph canonicalizes a path graph") {
  const Graph g = path3();
  CHECK(g.num_nodes() == 3);
  CHECK(g.num_edges() == 2);
  for (const auto& e : g.edges()) CHECK(e.u < e.v);
  const MatrixXd a = g.dense_adjacency();
  CHECK(a(0, 1) == 1.0);
  CHECK(a(1, 2) == 1.0);
  CHECK(a(0, 2) == 0.0);
}

TEST_CASE("build_graph rejects bad edges, naming the offender") {
  CHECK_THROWS_WITH_AS(build_graph({{0, 0, 1.0}}),
                       doctest::Contains("self-loop"), DataError);
  CHECK_THROWS_WITH_AS(build_graph({{0, 1, 1.0}, {1, 0, 2.0}}),
                       doctest::Contains("duplicate"), DataError);
  CHECK_THROWS_WITH_AS(build_graph({{0, 1, 0.0}}),
                       doctest::Contains("nonpositive"), DataError);
  CHECK_THROWS_WITH_AS(build_graph({{0, 1, -2.0}}),
                       doctest::Contains("nonpositive"), DataError);
  CHECK_THROWS_WITH_AS(build_graph({{0, 5, 1.0}}, 3),
                       doctest::Contains("out of range"), DataError);
  CHECK_THROWS_AS(build_graph({{-1, 2, 1.0}}), DataError);
}

TEST_CASE("random graphs: symmetric adjacency, zero Laplacian row sums") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const Graph g = oracle::random_connected_graph(10, 0.3, 0.5, 3.0, rng);
    const MatrixXd a = g.dense_adjacency();
    CHECK((a - a.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.diagonal().cwiseAbs().maxCoeff() == 0.0);
    const MatrixXd l = g.dense_laplacian();
    CHECK(l.rowwise().sum().cwiseAbs().maxCoeff() < 1e-12 * g.num_nodes());
  }
}

TEST_CASE("incidence columns carry +/- sqrt(w) and factor the Laplacians") {
  SUBCASE("path graph, unit weights") {
    const MatrixXd b = path3().incidence();
    // up to per-column sign
    for (int e = 0; e < 2; ++e) {
      VectorXd col = b.col(e);
      if (col.sum() != 0.0) continue;
      CHECK(col.cwiseAbs().maxCoeff() == 1.0);
    }
    MatrixXd expect(3, 2);
    expect << 1, 0, -1, 1, 0, -1;
    for (int e = 0; e < 2; ++e) {
      const double sign = b(e, e) > 0 ? 1.0 : -1.0;
      CHECK((b.col(e) * sign - expect.col(e)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  SUBCASE("single weight-4 edge: B B^T by hand") {
    const Graph g = build_graph({{0, 1, 4.0}});
    const MatrixXd q = g.incidence() * g.incidence().transpose();
    MatrixXd expect(2, 2);
    expect << 4, -4, -4, 4;
    CHECK((q - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("weighted random graphs: B B^T = L and B^T B = L1") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      const Graph g = oracle::random_connected_graph(9, 0.35, 0.5, 4.0, rng);
      const MatrixXd b = g.incidence();
      CHECK((b * b.transpose() - g.dense_laplacian()).cwiseAbs().maxCoeff() <
            1e-10);
      CHECK((b.transpose() * b - g.dense_edge_laplacian())
                .cwiseAbs()
                .maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("Laplacian spectrum: nonnegative with one zero mode when connected") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Graph g = oracle::random_connected_graph(8, 0.3, 0.5, 2.0, rng);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(g.dense_laplacian());
    const VectorXd lam = es.eigenvalues();
    CHECK(lam.minCoeff() > -1e-8);
    int zeros = 0;
    for (int i = 0; i < lam.size(); ++i)
      if (std::abs(lam[i]) < 1e-8) ++zeros;
    CHECK(zeros == 1);
  }
}

TEST_CASE("apply_filter") {
  SUBCASE("identity coefficients return the signal") {
    Rng rng(1);
    const Graph g = oracle::random_connected_graph(12, 0.3, 0.5, 2.0, rng);
    VectorXd x(12);
    for (int i = 0; i < 12; ++i) x[i] = rng.normal();
    GraphFilter f{{1.0}, OperatorKind::kLaplacian};
    CHECK((apply_filter(f, g, x) - x).cwiseAbs().maxCoeff() == 0.0);
    GraphFilter f4{{1.0, 0.0, 0.0, 0.0}, OperatorKind::kNormalizedLaplacian};
    CHECK((apply_filter(f4, g, x) - x).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("path graph L x by dense multiply") {
    const Graph g = path3();
    VectorXd x(3);
    x << 1, 0, 0;
    GraphFilter f{{0.0, 1.0}, OperatorKind::kLaplacian};
    const VectorXd lx = apply_filter(f, g, x);
    VectorXd expect(3);
    expect << 1, -1, 0;
    CHECK((lx - expect).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("matches the dense polynomial oracle on graphs up to n = 16") {
    Rng rng(3);
    const std::vector<double> coeffs = {1.0, -0.5, 0.1};
    for (int n : {4, 8, 16}) {
      const Graph g = oracle::random_connected_graph(n, 0.4, 0.5, 2.0, rng);
      for (auto op : {OperatorKind::kLaplacian,
                      OperatorKind::kNormalizedLaplacian,
                      OperatorKind::kEdgeLaplacian}) {
        const MatrixXd dense =
            op == OperatorKind::kLaplacian ? g.dense_laplacian()
            : op == OperatorKind::kNormalizedLaplacian
                ? g.dense_normalized_laplacian()
                : g.dense_edge_laplacian();
        const int dim = static_cast<int>(dense.rows());
        VectorXd x(dim);
        for (int i = 0; i < dim; ++i) x[i] = rng.normal();
        const VectorXd got = apply_filter({coeffs, op}, g, x);
        const VectorXd want = oracle::dense_poly(dense, coeffs) * x;
        CHECK((got - want).norm() < 1e-9 * std::max(1.0, want.norm()));
      }
    }
  }
  SUBCASE("linearity") {
    Rng rng(5);
    const Graph g = oracle::random_connected_graph(10, 0.3, 0.5, 2.0, rng);
    GraphFilter f{{0.3, -0.2, 0.05}, OperatorKind::kLaplacian};
    VectorXd x(10), y(10);
    for (int i = 0; i < 10; ++i) {
      x[i] = rng.normal();
      y[i] = rng.normal();
    }
    const VectorXd lhs = apply_filter(f, g, 2.0 * x - 3.0 * y);
    const VectorXd rhs =
        2.0 * apply_filter(f, g, x) - 3.0 * apply_filter(f, g, y);
    CHECK((lhs - rhs).norm() < 1e-10 * std::max(1.0, rhs.norm()));
  }
  SUBCASE("dimension mismatch is rejected") {
    const Graph g = path3();
    GraphFilter f{{1.0, 1.0}, OperatorKind::kLaplacian};
    CHECK_THROWS_AS(apply_filter(f, g, VectorXd::Zero(2)), DataError);
    GraphFilter fe{{1.0}, OperatorKind::kEdgeLaplacian};
    CHECK_THROWS_AS(apply_filter(fe, g, VectorXd::Zero(3)), DataError);
  }
}

TEST_CASE("erdos_renyi") {
  SUBCASE("bit-deterministic per seed") {
    const Graph a = erdos_renyi(32, 0.2, 7);
    const Graph b = erdos_renyi(32, 0.2, 7);
    REQUIRE(a.num_edges() == b.num_edges());
    for (int e = 0; e < a.num_edges(); ++e) {
      CHECK(a.edges()[e].u == b.edges()[e].u);
      CHECK(a.edges()[e].v == b.edges()[e].v);
    }
    const Graph c = erdos_renyi(32, 0.2, 8);
    bool identical = a.num_edges() == c.num_edges();
    if (identical)
      for (int e = 0; e < a.num_edges(); ++e)
        identical = identical && a.edges()[e].u == c.edges()[e].u &&
                    a.edges()[e].v == c.edges()[e].v;
    CHECK_FALSE(identical);
  }
  SUBCASE("n=2, p=1 forces the single edge") {
    const Graph g = erdos_renyi(2, 1.0, 0);
    CHECK(g.num_edges() == 1);
  }
  SUBCASE("all samples connected over 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Graph g = erdos_renyi(32, 0.2, seed);
      CHECK(g.connected());  // BFS reachability
    }
  }
  SUBCASE("invalid arguments") {
    CHECK_THROWS_AS(erdos_renyi(1, 0.5, 0), DataError);
    CHECK_THROWS_AS(erdos_renyi(8, 0.0, 0), DataError);
    CHECK_THROWS_AS(erdos_renyi(8, 1.5, 0), DataError);
  }
}

TEST_CASE("incidence pseudo-inverse factors") {
  SUBCASE("single weight-4 edge, a = [1]") {
    const Graph g = build_graph({{0, 1, 4.0}});
    const auto p = incidence_pseudoinverses(g);
    CHECK(p.left.rows() == 1);
    CHECK(p.left.cols() == 2);
    CHECK(p.right.rows() == 1);
    const MatrixXd got = p.pinv_q(VectorXd::Ones(1));
    // eigendecomposition: Q = [[4,-4],[-4,4]] has the single nonzero
    // eigenvalue 8 on the unit vector [1,-1]/sqrt(2), so pinv(Q) has
    // entries +/- 1/16.
    const MatrixXd want =
        oracle::eig_pinv(g.incidence() * g.incidence().transpose());
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(got(0, 0) == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
    CHECK(got(0, 1) == doctest::Approx(-1.0 / 16.0).epsilon(1e-12));
  }
  SUBCASE("path graph satisfies the Penrose identity") {
    const auto p = incidence_pseudoinverses(path3());
    const VectorXd a = VectorXd::Ones(2);
    const MatrixXd qp = p.pinv_q(a);
    const Graph g = path3();
    const MatrixXd q = g.incidence() * g.incidence().transpose();
    CHECK((qp * q * qp - qp).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((q * qp * q - q).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("random graphs: Q pinv(Q) projects onto the complement of ones") {
    Rng rng(13);
    for (int trial = 0; trial < 8; ++trial) {
      const Graph g = oracle::random_connected_graph(9, 0.35, 0.5, 2.0, rng);
      const auto p = incidence_pseudoinverses(g);
      VectorXd a(g.num_edges());
      for (int e = 0; e < a.size(); ++e) a[e] = 0.3 + 2.0 * rng.uniform();
      const MatrixXd b = g.incidence();
      const MatrixXd q = b * a.asDiagonal() * b.transpose();
      const MatrixXd projector =
          MatrixXd::Identity(9, 9) - MatrixXd::Constant(9, 9, 1.0 / 9.0);
      CHECK((q * p.pinv_q(a) - projector).cwiseAbs().maxCoeff() < 1e-9);
      // exactness against the eigendecomposition oracle, cyclic graphs included
      CHECK((p.pinv_q(a) - oracle::eig_pinv(q)).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(p.log_pdet_q(a) ==
            doctest::Approx(oracle::eig_log_pdet(q)).epsilon(1e-9));
    }
  }
  SUBCASE("disconnected graphs are rejected") {
    const Graph g = build_graph({{0, 1, 1.0}, {2, 3, 1.0}});
    CHECK_THROWS_WITH_AS(incidence_pseudoinverses(g),
                         doctest::Contains("disconnected"), DataError);
  }
}

TEST_CASE("edge list file round trip") {
  Rng rng(21);
  const Graph g = oracle::random_connected_graph(7, 0.4, 0.5, 2.5, rng);
  const std::string path = "test_graph_roundtrip.edges";
  write_edge_list(g, path);
  const Graph back = read_edge_list(path);
  REQUIRE(back.num_nodes() == g.num_nodes());
  REQUIRE(back.num_edges() == g.num_edges());
  for (int e = 0; e < g.num_edges(); ++e) {
    CHECK(back.edges()[e].u == g.edges()[e].u);
    CHECK(back.edges()[e].v == g.edges()[e].v);
    CHECK(back.edges()[e].w == doctest::Approx(g.edges()[e].w).epsilon(1e-15));
  }
  std::remove(path.c_str());
}

TEST_CASE("edge list files accept comments") {
  const std::string path = "test_graph_comments.edges";
  {
    std::ofstream out(path);
    out << "# a path\n0 1 1.0\n1 2 2.0  # trailing comment\n\n";
  }
  const Graph g = read_edge_list(path);
  CHECK(g.num_nodes() == 3);
  CHECK(g.num_edges() == 2);
  CHECK(g.edges()[1].w == 2.0);
  std::remove(path.c_str());
}

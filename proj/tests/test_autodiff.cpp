#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gknet/autodiff.hpp"
#include "gknet/random.hpp"
#include "oracles.hpp"

using namespace gknet;
using ad::Tape;
using ad::Tensor;

namespace {

Graph path3() { return build_graph({{0, 1, 1.0}, {1, 2, 1.0}}); }

MatrixXd random_matrix(Rng& rng, int r, int c) {
  MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Wraps a tape-built scalar function of a packed parameter vector for
// finite-difference checking.
double check_taped(
    const std::function<Tensor(Tape&, const VectorXd&)>& build,
    const VectorXd& point, double epsilon = 1e-6) {
  const auto f = [&](const VectorXd& x, VectorXd* grad) {
    Tape tape;
    const Tensor out = build(tape, x);
    const double value = out.value()(0, 0);
    if (grad) {
      tape.backward(out);
      // convention: the builder records the packed input as node 0
      Tensor leaf(&tape, 0);
      *grad = Eigen::Map<const VectorXd>(leaf.grad().data(),
                                         leaf.grad().size());
    }
    return value;
  };
  return ad::gradient_check(f, point, epsilon).max_rel_error;
}

}  // namespace

TEST_CASE("sum_sq analytic gradient") {
  Tape tape;
  MatrixXd x(2, 1);
  x << 1, -2;
  const Tensor in = tape.input(x);
  const Tensor out = tape.sum_sq(in);
  CHECK(out.value()(0, 0) == doctest::Approx(5.0));
  tape.backward(out);
  CHECK(in.grad()(0, 0) == doctest::Approx(2.0));
  CHECK(in.grad()(1, 0) == doctest::Approx(-4.0));
}

TEST_CASE("relu subgradient at zero is zero") {
  Tape tape;
  MatrixXd x(3, 1);
  x << -1.0, 0.0, 2.0;
  const Tensor in = tape.input(x);
  const Tensor out = tape.sum(tape.relu(in));
  tape.backward(out);
  CHECK(in.grad()(0, 0) == 0.0);
  CHECK(in.grad()(1, 0) == 0.0);  // the kink
  CHECK(in.grad()(2, 0) == 1.0);
}

TEST_CASE("linear chain y = a (b x)") {
  Tape tape;
  const Tensor x = tape.scalar(3.0, true);
  const Tensor y = tape.scale(tape.scale(x, 2.5), -1.5);
  tape.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(2.5 * -1.5));
}

TEST_CASE("shared subexpressions accumulate both paths") {
  Tape tape;
  const Tensor x = tape.scalar(0.7, true);
  const Tensor shared = tape.scale(x, 2.0);
  // y = shared^2 + 3*shared = 4x^2 + 6x; dy/dx = 8x + 6
  const Tensor y =
      tape.add(tape.sum_sq(shared), tape.scale(shared, 3.0));
  tape.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0 * 0.7 + 6.0));
}

TEST_CASE("disconnected leaves receive zero gradient") {
  Tape tape;
  const Tensor x = tape.scalar(1.0, true);
  const Tensor unused = tape.input(MatrixXd::Ones(3, 1), true);
  const Tensor y = tape.sum_sq(x);
  tape.backward(y);
  CHECK(unused.grad().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward contract") {
  Tape tape;
  const Tensor x = tape.input(MatrixXd::Ones(2, 2), true);
  SUBCASE("non-scalar output rejected") {
    CHECK_THROWS_AS(tape.backward(x), DataError);
  }
  SUBCASE("repeated backward without new forward work rejected") {
    const Tensor y = tape.sum_sq(x);
    tape.backward(y);
    CHECK_THROWS_AS(tape.backward(y), NumericalError);
    // new forward work re-arms the tape
    const Tensor z = tape.sum(x);
    tape.backward(z);
    CHECK(x.grad()(0, 0) == doctest::Approx(1.0));
  }
}

TEST_CASE("primitive pullbacks match finite differences at random points") {
  Rng rng(3);
  const Graph g = oracle::random_connected_graph(5, 0.5, 0.5, 2.0, rng);
  const int n = 5, m = g.num_edges();

  SUBCASE("linear and quadratic primitives at 1e-8") {
    for (int trial = 0; trial < 25; ++trial) {
      {  // matmul in both arguments, all transpose combinations
        const bool ta = trial % 2 == 0, tb = (trial / 2) % 2 == 0;
        const MatrixXd bmat = random_matrix(rng, 3, 3);
        const double err = check_taped(
            [&](Tape& tape, const VectorXd& x) {
              const Tensor a = tape.input(
                  Eigen::Map<const MatrixXd>(x.data(), 3, 3), true);
              const Tensor b = tape.constant(bmat);
              return tape.sum_sq(tape.matmul(a, b, ta, tb));
            },
            Eigen::Map<const VectorXd>(random_matrix(rng, 3, 3).data(), 9));
        CHECK(err < 1e-7);
      }
      {  // quadratic form against a fixed PSD map
        const MatrixXd root = random_matrix(rng, 4, 4);
        const MatrixXd psd = root * root.transpose();
        const double err = check_taped(
            [&](Tape& tape, const VectorXd& x) {
              const Tensor in = tape.input(x, true);
              return tape.quadratic_form(in, psd);
            },
            random_matrix(rng, 4, 1).col(0));
        CHECK(err < 1e-7);
      }
      {  // sparse operator application
        const double err = check_taped(
            [&](Tape& tape, const VectorXd& x) {
              const Tensor in = tape.input(x, true);
              return tape.sum_sq(
                  tape.sparse_op(g, OperatorKind::kLaplacian, in));
            },
            random_matrix(rng, n, 1).col(0));
        CHECK(err < 1e-7);
      }
      {  // incidence maps
        const double err = check_taped(
            [&](Tape& tape, const VectorXd& x) {
              const Tensor in = tape.input(x, true);
              return tape.sum_sq(tape.incidence_apply(g, in));
            },
            random_matrix(rng, m, 1).col(0));
        CHECK(err < 1e-7);
        const double err_t = check_taped(
            [&](Tape& tape, const VectorXd& x) {
              const Tensor in = tape.input(x, true);
              return tape.sum_sq(tape.incidence_t_apply(g, in));
            },
            random_matrix(rng, n, 1).col(0));
        CHECK(err_t < 1e-7);
      }
    }
  }

  SUBCASE("nonlinear primitives at 1e-4") {
    for (int trial = 0; trial < 100; ++trial) {
      const VectorXd point = random_matrix(rng, 6, 1).col(0);
      const auto builders = std::vector<
          std::function<Tensor(Tape&, const VectorXd&)>>{
          [&](Tape& t, const VectorXd& x) {
            return t.sum_sq(t.relu(t.input(x, true)));
          },
          [&](Tape& t, const VectorXd& x) {
            return t.sum_sq(t.sigmoid(t.input(x, true)));
          },
          [&](Tape& t, const VectorXd& x) {
            return t.sum_sq(t.softplus(t.input(x, true)));
          },
          [&](Tape& t, const VectorXd& x) {
            return t.sum_sq(t.sin(t.input(x, true)));
          },
          [&](Tape& t, const VectorXd& x) {
            return t.sum_sq(t.cos(t.input(x, true)));
          },
          [&](Tape& t, const VectorXd& x) {
            return t.sum_sq(t.abs(t.input(x, true)));
          },
          [&](Tape& t, const VectorXd& x) {
            const Tensor in = t.input(x, true);
            return t.sum(t.hadamard(in, t.sigmoid(in)));
          },
      };
      const auto& build = builders[trial % builders.size()];
      CHECK(check_taped(build, point) < 1e-4);
    }
  }

  SUBCASE("scale_by, bias, concat and slice") {
    for (int trial = 0; trial < 10; ++trial) {
      const double err = check_taped(
          [&](Tape& tape, const VectorXd& x) {
            const Tensor packed = tape.input(x, true);
            const Tensor s = tape.slice_rows(packed, 0, 1);
            const Tensor v = tape.slice_rows(packed, 1, 4);
            const Tensor b = tape.slice_rows(packed, 5, 4);
            const Tensor scaled = tape.scale_by(v, s);
            const Tensor biased = tape.add_bias(scaled, b);
            return tape.sum_sq(tape.concat_rows(biased, s));
          },
          random_matrix(rng, 9, 1).col(0));
      CHECK(err < 1e-6);
    }
  }
}

TEST_CASE("poly_filter matches the dense oracle and differentiates") {
  Rng rng(7);
  const Graph g = oracle::random_connected_graph(6, 0.5, 0.5, 2.0, rng);
  const std::vector<double> coeffs = {0.8, -0.3, 0.12};
  const VectorXd x = random_matrix(rng, 6, 1).col(0);

  Tape tape;
  const Tensor c =
      tape.input(Eigen::Map<const MatrixXd>(coeffs.data(), 3, 1), true);
  const Tensor in = tape.input(x, true);
  const Tensor y = tape.poly_filter(g, OperatorKind::kLaplacian, c, in);
  const VectorXd want =
      oracle::dense_poly(g.dense_laplacian(), coeffs) * x;
  CHECK((y.value().col(0) - want).cwiseAbs().maxCoeff() < 1e-12);

  // gradient in both coefficient and signal arguments
  VectorXd packed(3 + 6);
  packed << 0.8, -0.3, 0.12, x;
  const double err = check_taped(
      [&](Tape& t, const VectorXd& p) {
        const Tensor cc = t.slice_rows(t.input(p, true), 0, 3);
        const Tensor xx = t.slice_rows(Tensor(&t, 0), 3, 6);
        return t.sum_sq(t.poly_filter(g, OperatorKind::kLaplacian, cc, xx));
      },
      packed);
  CHECK(err < 1e-6);
}

TEST_CASE("pinv_quadratic equals the eigendecomposition oracle") {
  Rng rng(9);
  for (int trial = 0; trial < 6; ++trial) {
    const Graph g = oracle::random_connected_graph(7, 0.45, 0.5, 2.0, rng);
    const auto pinv = incidence_pseudoinverses(g);
    const int m = g.num_edges();
    VectorXd alpha(m);
    for (int e = 0; e < m; ++e) alpha[e] = 0.3 + rng.uniform();
    const VectorXd eps = random_matrix(rng, 7, 1).col(0);

    Tape tape;
    const Tensor te = tape.input(eps, true);
    const Tensor ta = tape.input(alpha, true);
    const Tensor q = tape.pinv_quadratic(pinv, g, te, ta);

    const MatrixXd b = g.incidence();
    const MatrixXd qmat =
        b * alpha.array().square().matrix().asDiagonal() * b.transpose();
    const double want = eps.dot(oracle::eig_pinv(qmat) * eps);
    CHECK(q.value()(0, 0) == doctest::Approx(want).epsilon(1e-9));

    VectorXd packed(7 + m);
    packed << eps, alpha;
    const double err = check_taped(
        [&](Tape& t, const VectorXd& p) {
          const Tensor all = t.input(p, true);
          const Tensor e2 = t.slice_rows(all, 0, 7);
          const Tensor a2 = t.slice_rows(all, 7, m);
          return t.pinv_quadratic(pinv, g, e2, a2);
        },
        packed);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("composite graph-convolution layer gradient") {
  Rng rng(11);
  const Graph g = path3();
  // one layer: ReLU(sum_k L^k X W_k), two input and two output channels
  const int taps = 3, fin = 2, fout = 2;
  const MatrixXd x0 = random_matrix(rng, 3, fin);
  VectorXd packed(taps * fin * fout);
  for (int i = 0; i < packed.size(); ++i) packed[i] = 0.4 * rng.normal();

  const double err = check_taped(
      [&](Tape& tape, const VectorXd& p) {
        const Tensor weights = tape.input(p, true);
        const Tensor x = tape.constant(x0);
        Tensor acc;
        Tensor power = x;
        for (int k = 0; k < taps; ++k) {
          if (k > 0) power = tape.sparse_op(g, OperatorKind::kLaplacian, power);
          // unpack W_k as fin x fout
          const Tensor wk_flat =
              tape.slice_rows(weights, k * fin * fout, fin * fout);
          // reshape by multiplying through explicit columns
          Tensor cols;
          for (int c = 0; c < fout; ++c) {
            const Tensor wcol = tape.slice_rows(wk_flat, c * fin, fin);
            const Tensor prod = tape.matmul(power, wcol);
            cols = c == 0 ? prod : tape.concat_rows(cols, prod);
          }
          acc = k == 0 ? cols : tape.add(acc, cols);
        }
        return tape.sum_sq(tape.relu(acc));
      },
      packed);
  CHECK(err < 1e-4);
}

TEST_CASE("backward through a 50-step toy recurrence") {
  Rng rng(13);
  const int units = 3, steps = 50;
  const MatrixXd w0 = 0.4 * random_matrix(rng, units, units);
  VectorXd packed(units * units);
  std::copy(w0.data(), w0.data() + w0.size(), packed.data());

  const double err = check_taped(
      [&](Tape& tape, const VectorXd& p) {
        const Tensor w = tape.input(
            Eigen::Map<const MatrixXd>(p.data(), units, units), true);
        Tensor h = tape.constant(MatrixXd::Constant(units, 1, 0.1));
        for (int t = 0; t < steps; ++t)
          h = tape.sigmoid(tape.matmul(w, h));
        return tape.sum_sq(h);
      },
      Eigen::Map<const VectorXd>(packed.data(), packed.size()));
  CHECK(err < 1e-4);
}

TEST_CASE("batch_norm") {
  Rng rng(15);
  SUBCASE("train mode normalizes the batch and tracks running statistics") {
    ad::BatchNormState state;
    Tape tape;
    const MatrixXd x = random_matrix(rng, 3, 8);
    const Tensor in = tape.input(x, true);
    const Tensor gamma = tape.input(MatrixXd::Ones(3, 1), true);
    const Tensor beta = tape.input(MatrixXd::Zero(3, 1), true);
    const Tensor out = tape.batch_norm(in, gamma, beta, state, true);
    for (int r = 0; r < 3; ++r) {
      CHECK(out.value().row(r).mean() == doctest::Approx(0.0).epsilon(1e-10));
      const double var = out.value()
                             .row(r)
                             .array()
                             .square()
                             .mean();
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps in denominator
    }
    CHECK(state.initialized);
    // momentum 0.1: second batch blends statistics
    const VectorXd mean_after_first = state.running_mean;
    Tape tape2;
    const MatrixXd x2 = random_matrix(rng, 3, 8);
    const Tensor in2 = tape2.input(x2, true);
    const Tensor g2 = tape2.input(MatrixXd::Ones(3, 1), false);
    const Tensor b2 = tape2.input(MatrixXd::Zero(3, 1), false);
    tape2.batch_norm(in2, g2, b2, state, true);
    const VectorXd expect =
        0.9 * mean_after_first + 0.1 * x2.rowwise().mean();
    CHECK((state.running_mean - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("eval mode is a fixed affine map and leaves statistics alone") {
    ad::BatchNormState state;
    state.initialized = true;
    state.running_mean = VectorXd::Constant(2, 1.0);
    state.running_var = VectorXd::Constant(2, 4.0);
    const VectorXd mean_before = state.running_mean;
    Tape tape;
    MatrixXd x(2, 1);
    x << 3.0, 5.0;
    const Tensor in = tape.input(x, true);
    const Tensor gamma = tape.input(MatrixXd::Constant(2, 1, 2.0), false);
    const Tensor beta = tape.input(MatrixXd::Constant(2, 1, 0.5), false);
    const Tensor out = tape.batch_norm(in, gamma, beta, state, false);
    // (x - 1) / sqrt(4 + eps) * 2 + 0.5
    CHECK(out.value()(0, 0) == doctest::Approx(2.0 / 2.0 * 2.0 + 0.5).epsilon(1e-4));
    CHECK(out.value()(1, 0) == doctest::Approx(4.0 / 2.0 * 2.0 + 0.5).epsilon(1e-4));
    CHECK((state.running_mean - mean_before).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("train mode with batch below two is rejected") {
    ad::BatchNormState state;
    Tape tape;
    const Tensor in = tape.input(MatrixXd::Ones(3, 1), true);
    const Tensor gamma = tape.input(MatrixXd::Ones(3, 1), false);
    const Tensor beta = tape.input(MatrixXd::Zero(3, 1), false);
    CHECK_THROWS_AS(tape.batch_norm(in, gamma, beta, state, true), DataError);
  }
  SUBCASE("train-mode gradient matches finite differences") {
    const MatrixXd x0 = random_matrix(rng, 3, 5);
    const VectorXd gamma0 = (VectorXd(3) << 1.1, 0.7, -0.4).finished();
    const VectorXd beta0 = (VectorXd(3) << 0.2, -0.1, 0.05).finished();
    const auto value_of = [&](const MatrixXd& x, const VectorXd& gm,
                              const VectorXd& bt, MatrixXd* gx) {
      ad::BatchNormState state;
      Tape tape;
      const Tensor in = tape.input(x, true);
      const Tensor g = tape.input(gm, true);
      const Tensor b = tape.input(bt, true);
      const Tensor out =
          tape.sum_sq(tape.batch_norm(in, g, b, state, true));
      const double v = out.value()(0, 0);
      if (gx) {
        tape.backward(out);
        *gx = in.grad();
      }
      return v;
    };
    MatrixXd analytic;
    value_of(x0, gamma0, beta0, &analytic);
    double max_rel = 0.0;
    const double eps = 1e-6;
    for (int i = 0; i < x0.size(); ++i) {
      MatrixXd hi = x0, lo = x0;
      hi.data()[i] += eps;
      lo.data()[i] -= eps;
      const double fd = (value_of(hi, gamma0, beta0, nullptr) -
                         value_of(lo, gamma0, beta0, nullptr)) /
                        (2.0 * eps);
      max_rel = std::max(max_rel,
                         std::abs(fd - analytic.data()[i]) /
                             std::max({1.0, std::abs(fd)}));
    }
    CHECK(max_rel < 1e-4);
  }
}

TEST_CASE("gradient_check itself") {
  SUBCASE("exact for quadratics up to roundoff") {
    const MatrixXd psd = (MatrixXd(2, 2) << 2.0, 0.5, 0.5, 1.0).finished();
    const auto f = [&](const VectorXd& x, VectorXd* grad) {
      if (grad) *grad = 2.0 * psd * x;
      return x.dot(psd * x);
    };
    const VectorXd point = (VectorXd(2) << 0.3, -1.2).finished();
    CHECK(ad::gradient_check(f, point).max_rel_error < 1e-8);
  }
  SUBCASE("sigmoid chain at saturation with epsilon scaling") {
    const auto f = [&](const VectorXd& x, VectorXd* grad) {
      const double s1 = 1.0 / (1.0 + std::exp(-x[0]));
      const double s2 = 1.0 / (1.0 + std::exp(-4.0 * s1));
      if (grad) {
        grad->resize(1);
        (*grad)[0] = s2 * (1.0 - s2) * 4.0 * s1 * (1.0 - s1);
      }
      return s2;
    };
    const VectorXd saturated = (VectorXd(1) << 6.0).finished();
    CHECK(ad::gradient_check(f, saturated, 1e-4).max_rel_error < 1e-3);
  }
  SUBCASE("reports the worst coordinate") {
    const auto f = [&](const VectorXd& x, VectorXd* grad) {
      if (grad) {
        *grad = 2.0 * x;
        (*grad)[1] += 0.5;  // deliberate error in coordinate 1
      }
      return x.squaredNorm();
    };
    const VectorXd point = (VectorXd(3) << 1.0, 2.0, 3.0).finished();
    const auto result = ad::gradient_check(f, point);
    CHECK(result.worst_index == 1);
    CHECK(result.max_rel_error > 0.1);
  }
}

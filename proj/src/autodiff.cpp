#include "gknet/autodiff.hpp"

#include <cmath>
#include <memory>

namespace gknet::ad {

const MatrixXd& Tensor::value() const { return tape_->node(id_).value; }
const MatrixXd& Tensor::grad() const { return tape_->node(id_).grad; }

int Tape::push(MatrixXd value, bool requires_grad,
               std::function<void()> pullback) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.pullback = std::move(pullback);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_same_tape(const Tensor& t) const {
  if (!t.valid()) throw DataError("tape: operation on an empty tensor");
}

Tensor Tape::input(const MatrixXd& value, bool requires_grad) {
  return Tensor(this, push(value, requires_grad, nullptr));
}

Tensor Tape::scalar(double value, bool requires_grad) {
  MatrixXd m(1, 1);
  m(0, 0) = value;
  return input(m, requires_grad);
}

namespace {


}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b, bool trans_a,
                    bool trans_b) {
  check_same_tape(a);
  check_same_tape(b);
  const MatrixXd& av = node(a.id()).value;
  const MatrixXd& bv = node(b.id()).value;
  const auto inner_a = trans_a ? av.rows() : av.cols();
  const auto inner_b = trans_b ? bv.cols() : bv.rows();
  if (inner_a != inner_b) throw DataError("matmul: shape mismatch");
  MatrixXd out;
  if (!trans_a && !trans_b)
    out = av * bv;
  else if (!trans_a && trans_b)
    out = av * bv.transpose();
  else if (trans_a && !trans_b)
    out = av.transpose() * bv;
  else
    out = av.transpose() * bv.transpose();
  const bool rg = node(a.id()).requires_grad || node(b.id()).requires_grad;
  const int ia = a.id(), ib = b.id();
  const int id = push(std::move(out), rg, nullptr);
  node(id).pullback = [this, ia, ib, id, trans_a, trans_b]() {
    const MatrixXd& g = node(id).grad;
    const MatrixXd& av = node(ia).value;
    const MatrixXd& bv = node(ib).value;
    if (node(ia).requires_grad) {
      if (!trans_a && !trans_b)
        node(ia).grad += g * bv.transpose();
      else if (!trans_a && trans_b)
        node(ia).grad += g * bv;
      else if (trans_a && !trans_b)
        node(ia).grad += bv * g.transpose();
      else
        node(ia).grad += bv.transpose() * g.transpose();
    }
    if (node(ib).requires_grad) {
      if (!trans_a && !trans_b)
        node(ib).grad += av.transpose() * g;
      else if (!trans_a && trans_b)
        node(ib).grad += g.transpose() * av;
      else if (trans_a && !trans_b)
        node(ib).grad += av * g;
      else
        node(ib).grad += g.transpose() * av.transpose();
    }
  };
  return Tensor(this, id);
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_same_tape(a);
  check_same_tape(b);
  if (node(a.id()).value.rows() != node(b.id()).value.rows() ||
      node(a.id()).value.cols() != node(b.id()).value.cols())
    throw DataError("add: shape mismatch");
  const bool rg = node(a.id()).requires_grad || node(b.id()).requires_grad;
  const int ia = a.id(), ib = b.id();
  const int id = push(node(ia).value + node(ib).value, rg, nullptr);
  node(id).pullback = [this, ia, ib, id]() {
    if (node(ia).requires_grad) node(ia).grad += node(id).grad;
    if (node(ib).requires_grad) node(ib).grad += node(id).grad;
  };
  return Tensor(this, id);
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_same_tape(a);
  check_same_tape(b);
  if (node(a.id()).value.rows() != node(b.id()).value.rows() ||
      node(a.id()).value.cols() != node(b.id()).value.cols())
    throw DataError("sub: shape mismatch");
  const bool rg = node(a.id()).requires_grad || node(b.id()).requires_grad;
  const int ia = a.id(), ib = b.id();
  const int id = push(node(ia).value - node(ib).value, rg, nullptr);
  node(id).pullback = [this, ia, ib, id]() {
    if (node(ia).requires_grad) node(ia).grad += node(id).grad;
    if (node(ib).requires_grad) node(ib).grad -= node(id).grad;
  };
  return Tensor(this, id);
}

Tensor Tape::add_bias(const Tensor& x, const Tensor& bias) {
  check_same_tape(x);
  check_same_tape(bias);
  const MatrixXd& xv = node(x.id()).value;
  const MatrixXd& bv = node(bias.id()).value;
  if (bv.cols() != 1 || bv.rows() != xv.rows())
    throw DataError("add_bias: bias must be rows-by-1");
  MatrixXd out = xv.colwise() + bv.col(0);
  const bool rg = node(x.id()).requires_grad || node(bias.id()).requires_grad;
  const int ix = x.id(), ib = bias.id();
  const int id = push(std::move(out), rg, nullptr);
  node(id).pullback = [this, ix, ib, id]() {
    if (node(ix).requires_grad) node(ix).grad += node(id).grad;
    if (node(ib).requires_grad)
      node(ib).grad.col(0) += node(id).grad.rowwise().sum();
  };
  return Tensor(this, id);
}

Tensor Tape::hadamard(const Tensor& a, const Tensor& b) {
  check_same_tape(a);
  check_same_tape(b);
  if (node(a.id()).value.rows() != node(b.id()).value.rows() ||
      node(a.id()).value.cols() != node(b.id()).value.cols())
    throw DataError("hadamard: shape mismatch");
  const bool rg = node(a.id()).requires_grad || node(b.id()).requires_grad;
  const int ia = a.id(), ib = b.id();
  const int id =
      push(node(ia).value.cwiseProduct(node(ib).value), rg, nullptr);
  node(id).pullback = [this, ia, ib, id]() {
    if (node(ia).requires_grad)
      node(ia).grad += node(id).grad.cwiseProduct(node(ib).value);
    if (node(ib).requires_grad)
      node(ib).grad += node(id).grad.cwiseProduct(node(ia).value);
  };
  return Tensor(this, id);
}

Tensor Tape::affine(const Tensor& x, double a, double b) {
  check_same_tape(x);
  const int ix = x.id();
  MatrixXd out = a * node(ix).value;
  out.array() += b;
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id, a]() {
    if (node(ix).requires_grad) node(ix).grad += a * node(id).grad;
  };
  return Tensor(this, id);
}

Tensor Tape::scale_by(const Tensor& x, const Tensor& s) {
  check_same_tape(x);
  check_same_tape(s);
  if (node(s.id()).value.size() != 1)
    throw DataError("scale_by: scalar must be 1x1");
  const int ix = x.id(), is = s.id();
  const double sv = node(is).value(0, 0);
  const int id = push(sv * node(ix).value,
                      node(ix).requires_grad || node(is).requires_grad,
                      nullptr);
  node(id).pullback = [this, ix, is, id]() {
    const double sv = node(is).value(0, 0);
    if (node(ix).requires_grad) node(ix).grad += sv * node(id).grad;
    if (node(is).requires_grad)
      node(is).grad(0, 0) +=
          (node(id).grad.array() * node(ix).value.array()).sum();
  };
  return Tensor(this, id);
}

Tensor Tape::relu(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  const int id =
      push(node(ix).value.cwiseMax(0.0), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id]() {
    if (!node(ix).requires_grad) return;
    // subgradient 0 at the kink
    node(ix).grad.array() +=
        node(id).grad.array() * (node(ix).value.array() > 0.0).cast<double>();
  };
  return Tensor(this, id);
}

Tensor Tape::sigmoid(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  MatrixXd out = (1.0 / (1.0 + (-node(ix).value.array()).exp())).matrix();
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id]() {
    if (!node(ix).requires_grad) return;
    const auto& y = node(id).value.array();
    node(ix).grad.array() += node(id).grad.array() * y * (1.0 - y);
  };
  return Tensor(this, id);
}

Tensor Tape::softplus(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  // numerically stable log(1 + e^x)
  MatrixXd out =
      (node(ix).value.array().max(0.0) +
       (1.0 + (-node(ix).value.array().abs()).exp()).log())
          .matrix();
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id]() {
    if (!node(ix).requires_grad) return;
    node(ix).grad.array() +=
        node(id).grad.array() / (1.0 + (-node(ix).value.array()).exp());
  };
  return Tensor(this, id);
}

Tensor Tape::sin(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  const int id =
      push(node(ix).value.array().sin().matrix(), node(ix).requires_grad,
           nullptr);
  node(id).pullback = [this, ix, id]() {
    if (!node(ix).requires_grad) return;
    node(ix).grad.array() +=
        node(id).grad.array() * node(ix).value.array().cos();
  };
  return Tensor(this, id);
}

Tensor Tape::cos(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  const int id =
      push(node(ix).value.array().cos().matrix(), node(ix).requires_grad,
           nullptr);
  node(id).pullback = [this, ix, id]() {
    if (!node(ix).requires_grad) return;
    node(ix).grad.array() -=
        node(id).grad.array() * node(ix).value.array().sin();
  };
  return Tensor(this, id);
}

Tensor Tape::abs(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  const int id = push(node(ix).value.cwiseAbs(), node(ix).requires_grad,
                      nullptr);
  node(id).pullback = [this, ix, id]() {
    if (!node(ix).requires_grad) return;
    // subgradient 0 at zero, matching relu's convention
    node(ix).grad.array() +=
        node(id).grad.array() * node(ix).value.array().sign();
  };
  return Tensor(this, id);
}

Tensor Tape::sum(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  MatrixXd out(1, 1);
  out(0, 0) = node(ix).value.sum();
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id]() {
    if (node(ix).requires_grad)
      node(ix).grad.array() += node(id).grad(0, 0);
  };
  return Tensor(this, id);
}

Tensor Tape::sum_sq(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  MatrixXd out(1, 1);
  out(0, 0) = node(ix).value.squaredNorm();
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id]() {
    if (node(ix).requires_grad)
      node(ix).grad += 2.0 * node(id).grad(0, 0) * node(ix).value;
  };
  return Tensor(this, id);
}

Tensor Tape::quadratic_form(const Tensor& x, const MatrixXd& psd) {
  check_same_tape(x);
  const int ix = x.id();
  const MatrixXd& xv = node(ix).value;
  if (xv.cols() != 1 || psd.rows() != xv.rows() || psd.cols() != xv.rows())
    throw DataError("quadratic_form: shape mismatch");
  const VectorXd mx = psd * xv.col(0);
  MatrixXd out(1, 1);
  out(0, 0) = xv.col(0).dot(mx);
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id, mx]() {
    if (node(ix).requires_grad)
      node(ix).grad.col(0) += 2.0 * node(id).grad(0, 0) * mx;
  };
  return Tensor(this, id);
}

Tensor Tape::concat_rows(const Tensor& a, const Tensor& b) {
  check_same_tape(a);
  check_same_tape(b);
  const int ia = a.id(), ib = b.id();
  if (node(ia).value.cols() != node(ib).value.cols())
    throw DataError("concat_rows: column mismatch");
  MatrixXd out(node(ia).value.rows() + node(ib).value.rows(),
               node(ia).value.cols());
  out.topRows(node(ia).value.rows()) = node(ia).value;
  out.bottomRows(node(ib).value.rows()) = node(ib).value;
  const bool rg = node(ia).requires_grad || node(ib).requires_grad;
  const int id = push(std::move(out), rg, nullptr);
  node(id).pullback = [this, ia, ib, id]() {
    const int ra = static_cast<int>(node(ia).value.rows());
    const int rb = static_cast<int>(node(ib).value.rows());
    if (node(ia).requires_grad) node(ia).grad += node(id).grad.topRows(ra);
    if (node(ib).requires_grad) node(ib).grad += node(id).grad.bottomRows(rb);
  };
  return Tensor(this, id);
}

Tensor Tape::slice_rows(const Tensor& x, int start, int count) {
  check_same_tape(x);
  const int ix = x.id();
  if (start < 0 || count < 0 || start + count > node(ix).value.rows())
    throw DataError("slice_rows: range out of bounds");
  const int id = push(node(ix).value.middleRows(start, count),
                      node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id, start, count]() {
    if (node(ix).requires_grad)
      node(ix).grad.middleRows(start, count) += node(id).grad;
  };
  return Tensor(this, id);
}

Tensor Tape::slice_cols(const Tensor& x, int start, int count) {
  check_same_tape(x);
  const int ix = x.id();
  if (start < 0 || count < 0 || start + count > node(ix).value.cols())
    throw DataError("slice_cols: range out of bounds");
  const int id = push(node(ix).value.middleCols(start, count),
                      node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id, start, count]() {
    if (node(ix).requires_grad)
      node(ix).grad.middleCols(start, count) += node(id).grad;
  };
  return Tensor(this, id);
}

Tensor Tape::transpose(const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  const int id =
      push(node(ix).value.transpose(), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id]() {
    if (node(ix).requires_grad) node(ix).grad += node(id).grad.transpose();
  };
  return Tensor(this, id);
}

Tensor Tape::scale_rows(const Tensor& x, const Tensor& v) {
  check_same_tape(x);
  check_same_tape(v);
  const int ix = x.id(), iv = v.id();
  const MatrixXd& xv = node(ix).value;
  const MatrixXd& vv = node(iv).value;
  if (vv.cols() != 1 || vv.rows() != xv.rows())
    throw DataError("scale_rows: scale must be rows-by-1");
  MatrixXd out = xv.array().colwise() * vv.col(0).array();
  const bool rg = node(ix).requires_grad || node(iv).requires_grad;
  const int id = push(std::move(out), rg, nullptr);
  node(id).pullback = [this, ix, iv, id]() {
    if (node(ix).requires_grad)
      node(ix).grad +=
          (node(id).grad.array().colwise() * node(iv).value.col(0).array())
              .matrix();
    if (node(iv).requires_grad)
      node(iv).grad.col(0) +=
          (node(id).grad.array() * node(ix).value.array())
              .rowwise()
              .sum()
              .matrix();
  };
  return Tensor(this, id);
}

namespace {

void apply_op_columns(const Graph& g, OperatorKind op, const MatrixXd& in,
                      MatrixXd& out) {
  out.resize(in.rows(), in.cols());
  VectorXd tmp;
  for (int c = 0; c < in.cols(); ++c) {
    switch (op) {
      case OperatorKind::kLaplacian:
        g.apply_laplacian(in.col(c), tmp);
        break;
      case OperatorKind::kNormalizedLaplacian:
        g.apply_normalized_laplacian(in.col(c), tmp);
        break;
      case OperatorKind::kEdgeLaplacian:
        g.apply_edge_laplacian(in.col(c), tmp);
        break;
    }
    out.col(c) = tmp;
  }
}

}  // namespace

Tensor Tape::sparse_op(const Graph& g, OperatorKind op, const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  MatrixXd out;
  apply_op_columns(g, op, node(ix).value, out);
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id, &g, op]() {
    if (!node(ix).requires_grad) return;
    MatrixXd back;  // operators are symmetric
    apply_op_columns(g, op, node(id).grad, back);
    node(ix).grad += back;
  };
  return Tensor(this, id);
}

Tensor Tape::incidence_apply(const Graph& g, const Tensor& z) {
  check_same_tape(z);
  const int iz = z.id();
  const MatrixXd& zv = node(iz).value;
  if (zv.rows() != g.num_edges())
    throw DataError("incidence_apply: rows != edge count");
  MatrixXd out(g.num_nodes(), zv.cols());
  VectorXd tmp;
  for (int c = 0; c < zv.cols(); ++c) {
    g.apply_incidence(zv.col(c), tmp);
    out.col(c) = tmp;
  }
  const int id = push(std::move(out), node(iz).requires_grad, nullptr);
  node(id).pullback = [this, iz, id, &g]() {
    if (!node(iz).requires_grad) return;
    VectorXd tmp;
    for (int c = 0; c < node(id).grad.cols(); ++c) {
      g.apply_incidence_t(node(id).grad.col(c), tmp);
      node(iz).grad.col(c) += tmp;
    }
  };
  return Tensor(this, id);
}

Tensor Tape::incidence_t_apply(const Graph& g, const Tensor& x) {
  check_same_tape(x);
  const int ix = x.id();
  const MatrixXd& xv = node(ix).value;
  if (xv.rows() != g.num_nodes())
    throw DataError("incidence_t_apply: rows != node count");
  MatrixXd out(g.num_edges(), xv.cols());
  VectorXd tmp;
  for (int c = 0; c < xv.cols(); ++c) {
    g.apply_incidence_t(xv.col(c), tmp);
    out.col(c) = tmp;
  }
  const int id = push(std::move(out), node(ix).requires_grad, nullptr);
  node(id).pullback = [this, ix, id, &g]() {
    if (!node(ix).requires_grad) return;
    VectorXd tmp;
    for (int c = 0; c < node(id).grad.cols(); ++c) {
      g.apply_incidence(node(id).grad.col(c), tmp);
      node(ix).grad.col(c) += tmp;
    }
  };
  return Tensor(this, id);
}

Tensor Tape::poly_filter(const Graph& g, OperatorKind op, const Tensor& coeffs,
                         const Tensor& x) {
  check_same_tape(coeffs);
  check_same_tape(x);
  const int ic = coeffs.id(), ix = x.id();
  const MatrixXd& cv = node(ic).value;
  if (cv.cols() != 1 || cv.rows() < 1)
    throw DataError("poly_filter: coefficients must be (K+1)-by-1");
  const int taps = static_cast<int>(cv.rows());
  // save Op^k x for the pullbacks
  auto powers = std::make_shared<std::vector<MatrixXd>>();
  powers->reserve(taps);
  powers->push_back(node(ix).value);
  for (int k = 1; k < taps; ++k) {
    MatrixXd next;
    apply_op_columns(g, op, powers->back(), next);
    powers->push_back(std::move(next));
  }
  MatrixXd out = cv(0, 0) * (*powers)[0];
  for (int k = 1; k < taps; ++k) out += cv(k, 0) * (*powers)[k];
  const bool rg = node(ic).requires_grad || node(ix).requires_grad;
  const int id = push(std::move(out), rg, nullptr);
  node(id).pullback = [this, ic, ix, id, &g, op, powers, taps]() {
    const MatrixXd& gout = node(id).grad;
    if (node(ic).requires_grad) {
      for (int k = 0; k < taps; ++k)
        node(ic).grad(k, 0) += (gout.array() * (*powers)[k].array()).sum();
    }
    if (node(ix).requires_grad) {
      // operators are symmetric: d/dx = sum_k c_k Op^k gout
      MatrixXd acc = node(ic).value(0, 0) * gout;
      MatrixXd power = gout;
      for (int k = 1; k < taps; ++k) {
        MatrixXd next;
        apply_op_columns(g, op, power, next);
        power = std::move(next);
        acc += node(ic).value(k, 0) * power;
      }
      node(ix).grad += acc;
    }
  };
  return Tensor(this, id);
}

Tensor Tape::pinv_quadratic(const IncidencePinv& pinv, const Graph& g,
                            const Tensor& eps, const Tensor& alpha) {
  check_same_tape(eps);
  check_same_tape(alpha);
  const int ie = eps.id(), ia = alpha.id();
  const MatrixXd& ev = node(ie).value;
  const MatrixXd& av = node(ia).value;
  if (ev.cols() != 1 || av.cols() != 1 || av.rows() != g.num_edges())
    throw DataError("pinv_quadratic: expected column vectors (eps n, alpha m)");
  const VectorXd alpha_sq = av.col(0).array().square();
  const VectorXd solution = pinv.pinv_q_apply(alpha_sq, ev.col(0));
  VectorXd edge_proj;
  g.apply_incidence_t(solution, edge_proj);  // B^T pinv(Q) eps
  MatrixXd out(1, 1);
  out(0, 0) = ev.col(0).dot(solution);
  const bool rg = node(ie).requires_grad || node(ia).requires_grad;
  const int id = push(std::move(out), rg, nullptr);
  node(id).pullback = [this, ie, ia, id, solution, edge_proj]() {
    const double gout = node(id).grad(0, 0);
    if (node(ie).requires_grad)
      node(ie).grad.col(0) += 2.0 * gout * solution;
    if (node(ia).requires_grad) {
      // d/d alpha_e of eps^T pinv(Q) eps = -2 alpha_e ((B^T pinv(Q) eps)_e)^2
      node(ia).grad.col(0).array() += -2.0 * gout *
                                      node(ia).value.col(0).array() *
                                      edge_proj.array().square();
    }
  };
  return Tensor(this, id);
}

Tensor Tape::batch_norm(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, BatchNormState& state, bool train,
                        double momentum) {
  check_same_tape(x);
  check_same_tape(gamma);
  check_same_tape(beta);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  const MatrixXd& xv = node(ix).value;
  const int rows = static_cast<int>(xv.rows());
  const int batch = static_cast<int>(xv.cols());
  if (node(ig).value.rows() != rows || node(ib).value.rows() != rows ||
      node(ig).value.cols() != 1 || node(ib).value.cols() != 1)
    throw DataError("batch_norm: gamma/beta must be rows-by-1");
  constexpr double kEps = 1e-5;

  VectorXd mean, var;
  if (train) {
    if (batch < 2)
      throw DataError("batch_norm: train mode needs batch size >= 2");
    mean = xv.rowwise().mean();
    var = (xv.colwise() - mean).array().square().rowwise().mean();
    if (!state.initialized) {
      state.running_mean = mean;
      state.running_var = var;
      state.initialized = true;
    } else {
      state.running_mean =
          (1.0 - momentum) * state.running_mean + momentum * mean;
      state.running_var = (1.0 - momentum) * state.running_var + momentum * var;
    }
  } else {
    if (!state.initialized) {
      mean = VectorXd::Zero(rows);
      var = VectorXd::Ones(rows);
    } else {
      mean = state.running_mean;
      var = state.running_var;
    }
  }
  const VectorXd inv_std = (var.array() + kEps).rsqrt();
  const MatrixXd normalized =
      ((xv.colwise() - mean).array().colwise() * inv_std.array()).matrix();
  MatrixXd out =
      (normalized.array().colwise() * node(ig).value.col(0).array()).matrix();
  out.colwise() += node(ib).value.col(0);

  const bool rg = node(ix).requires_grad || node(ig).requires_grad ||
                  node(ib).requires_grad;
  const int id = push(std::move(out), rg, nullptr);
  node(id).pullback = [this, ix, ig, ib, id, normalized, inv_std, train,
                       batch]() {
    const MatrixXd& gout = node(id).grad;
    if (node(ig).requires_grad)
      node(ig).grad.col(0) +=
          (gout.array() * normalized.array()).rowwise().sum().matrix();
    if (node(ib).requires_grad)
      node(ib).grad.col(0) += gout.rowwise().sum();
    if (!node(ix).requires_grad) return;
    const VectorXd gamma_v = node(ig).value.col(0);
    if (!train) {
      // eval mode is a fixed affine map
      node(ix).grad +=
          (gout.array().colwise() * (gamma_v.array() * inv_std.array()))
              .matrix();
      return;
    }
    // train mode: gradients flow through the batch statistics
    const MatrixXd gh =
        (gout.array().colwise() * gamma_v.array()).matrix();  // d/d normalized
    const VectorXd sum_gh = gh.rowwise().sum();
    const VectorXd sum_gh_x =
        (gh.array() * normalized.array()).rowwise().sum().matrix();
    MatrixXd gx = static_cast<double>(batch) * gh;
    gx.colwise() -= sum_gh;
    gx -= (normalized.array().colwise() * sum_gh_x.array()).matrix();
    gx.array().colwise() *= inv_std.array() / static_cast<double>(batch);
    node(ix).grad += gx;
  };
  return Tensor(this, id);
}

void Tape::backward(const Tensor& output) {
  check_same_tape(output);
  if (swept_ && static_cast<int>(nodes_.size()) == swept_size_)
    throw NumericalError("tape: repeated backward without new forward work");
  if (node(output.id()).value.size() != 1)
    throw DataError("tape: backward requires a scalar output");
  for (auto& n : nodes_) {
    n.grad.resize(n.value.rows(), n.value.cols());
    n.grad.setZero();
  }
  node(output.id()).grad(0, 0) = 1.0;
  for (int id = output.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.pullback && n.requires_grad && n.grad.cwiseAbs().maxCoeff() != 0.0)
      n.pullback();
  }
  swept_ = true;
  swept_size_ = static_cast<int>(nodes_.size());
}

void Tape::reset() {
  nodes_.clear();
  swept_ = false;
  swept_size_ = 0;
}

GradCheckResult gradient_check(
    const std::function<double(const VectorXd&, VectorXd*)>& f,
    const VectorXd& point, double epsilon) {
  VectorXd analytic(point.size());
  f(point, &analytic);
  GradCheckResult result;
  for (int i = 0; i < point.size(); ++i) {
    VectorXd hi = point, lo = point;
    hi[i] += epsilon;
    lo[i] -= epsilon;
    const double fd = (f(hi, nullptr) - f(lo, nullptr)) / (2.0 * epsilon);
    const double rel = std::abs(analytic[i] - fd) /
                       std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace gknet::ad

#pragma once

#include <functional>
#include <vector>

#include "gknet/graph.hpp"

namespace gknet::ad {

class Tape;

/// Handle to a tape node.  Values are dense matrices (vectors are n-by-1,
/// scalars 1-by-1); the shape list is (rows, cols).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const MatrixXd& value() const;
  const MatrixXd& grad() const;
  int rows() const { return static_cast<int>(value().rows()); }
  int cols() const { return static_cast<int>(value().cols()); }
  std::vector<int> shape() const { return {rows(), cols()}; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Running batch-norm statistics (owned by the model, updated in train mode).
struct BatchNormState {
  VectorXd running_mean;
  VectorXd running_var;
  bool initialized = false;
};

/// Reverse-mode tape.  Nodes are recorded in forward order, which is a valid
/// topological order for the single backward sweep.  A tape is single-owner:
/// record, call backward once, read leaf gradients, reset.
class Tape {
 public:
  Tensor input(const MatrixXd& value, bool requires_grad = true);
  Tensor constant(const MatrixXd& value) { return input(value, false); }
  Tensor scalar(double value, bool requires_grad = false);

  Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                bool trans_b = false);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  /// x + bias broadcast across columns (bias is rows-by-1).
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  Tensor hadamard(const Tensor& a, const Tensor& b);
  /// a * x + b elementwise with constant a, b.
  Tensor affine(const Tensor& x, double a, double b);
  Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }
  /// x scaled by a 1x1 tape scalar.
  Tensor scale_by(const Tensor& x, const Tensor& s);
  Tensor relu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor softplus(const Tensor& x);
  Tensor sin(const Tensor& x);
  Tensor cos(const Tensor& x);
  Tensor abs(const Tensor& x);
  Tensor sum(const Tensor& x);
  Tensor sum_sq(const Tensor& x);
  /// x^T M x for a fixed PSD map M.
  Tensor quadratic_form(const Tensor& x, const MatrixXd& psd);
  Tensor concat_rows(const Tensor& a, const Tensor& b);
  Tensor slice_rows(const Tensor& x, int start, int count);
  Tensor slice_cols(const Tensor& x, int start, int count);
  Tensor transpose(const Tensor& x);
  /// Rows of x scaled by the entries of v (rows-by-1).
  Tensor scale_rows(const Tensor& x, const Tensor& v);

  /// Applies the graph operator to each column; differentiates with respect
  /// to the signal only.
  Tensor sparse_op(const Graph& g, OperatorKind op, const Tensor& x);
  /// y = B z (edge signals to nodes) and z = B^T x.
  Tensor incidence_apply(const Graph& g, const Tensor& z);
  Tensor incidence_t_apply(const Graph& g, const Tensor& x);
  /// y = sum_k coeffs[k] Op^k x with trainable coefficients ((K+1)-by-1).
  Tensor poly_filter(const Graph& g, OperatorKind op, const Tensor& coeffs,
                     const Tensor& x);
  /// eps^T pinv(B diag(alpha^2) B^T) eps, differentiable in eps and alpha.
  Tensor pinv_quadratic(const IncidencePinv& pinv, const Graph& g,
                        const Tensor& eps, const Tensor& alpha);
  /// Row-wise batch normalization over columns.  Train mode uses batch
  /// statistics (batch >= 2) and updates `state` with momentum 0.1; eval mode
  /// is the fixed affine map given by `state`.
  Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool train, double momentum = 0.1);

  /// Reverse sweep from a scalar output.  A second backward without new
  /// forward work is rejected.
  void backward(const Tensor& output);

  void reset();
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  friend class Tensor;
  struct Node {
    MatrixXd value;
    MatrixXd grad;
    bool requires_grad = false;
    std::function<void()> pullback;  // accumulates into parent grads
  };

  int push(MatrixXd value, bool requires_grad, std::function<void()> pullback);
  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  MatrixXd& grad_of(int id) { return nodes_[id].grad; }
  void check_same_tape(const Tensor& t) const;

  std::vector<Node> nodes_;
  bool swept_ = false;
  int swept_size_ = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int worst_index = -1;
};

/// Central-difference check of an analytic gradient.  `f(x, grad)` returns
/// the value at x and fills `grad` when non-null.
GradCheckResult gradient_check(
    const std::function<double(const VectorXd&, VectorXd*)>& f,
    const VectorXd& point, double epsilon = 1e-5);

}  // namespace gknet::ad

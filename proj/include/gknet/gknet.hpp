#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gknet/autodiff.hpp"
#include "gknet/statespace.hpp"

namespace gknet {

struct GcnnConfig {
  std::vector<int> widths;  // channel chain including input and output
  int order = 2;            // filter order K per layer
  OperatorKind op = OperatorKind::kNormalizedLaplacian;

  int layers() const { return static_cast<int>(widths.size()) - 1; }
};

enum class GateMode { kSigmoid, kPaperLiteralRelu };

struct GKNetConfig {
  GcnnConfig encoder;  // 1 -> ... -> 2 channels (state estimate, noise scale)
  GcnnConfig decoder;  // 1 -> ... -> 1 channel
  int kalman_order = 2;  // K for the gain / edge / input filters
  // Operator for the gain filter; the normalized Laplacian keeps the filter
  // spectrum bounded independent of graph size.
  OperatorKind kalman_op = OperatorKind::kNormalizedLaplacian;
  TransitionMode transition_mode = TransitionMode::kEuler;
  double dt = 1.0;
  // c_t = c_scale * softplus(.); nonpositive means auto 1/lambda_max(L), the
  // largest scale for which the euler map stays contractive at softplus <= 2
  double c_scale = 0.0;
  GateMode gate = GateMode::kSigmoid;
  bool water_variant = false;  // runoff input enters the prediction step
  double lambda = 0.05;        // weight of the state-smoothness penalty
  double alpha_floor = 1e-3;   // loss floors alpha entries instead of failing
  bool sigma_input_zeroed = false;  // transfer mode: recurrence ignores sigma

  // RNN state length: [c | gain (K+1) | edge (K+1) | input (K+1, water)]
  int state_len() const {
    return water_variant ? 3 * kalman_order + 4 : 2 * kalman_order + 3;
  }
};

/// Fixed layout of the inference-RNN state vector.
struct KalmanParams {
  double c_raw = 0.0;  // pre-softplus
  VectorXd gain;       // K+1
  VectorXd edge;       // K+1
  VectorXd input;      // K+1 (water variant only, otherwise empty)
};
KalmanParams unpack_kalman_params(const VectorXd& h, int order, bool water);
VectorXd pack_kalman_params(const KalmanParams& p);

/// Model parameters live in a flat registry so the trainer and checkpoints
/// can treat them uniformly.
struct ParamRegistry {
  std::vector<std::string> names;
  std::vector<MatrixXd> values;

  int add(const std::string& name, MatrixXd init) {
    names.push_back(name);
    values.push_back(std::move(init));
    return static_cast<int>(values.size()) - 1;
  }
  int find(const std::string& name) const;
  std::size_t total_size() const;
};

class GKNetModel {
 public:
  GKNetModel(const Graph& graph, GKNetConfig config, std::uint64_t seed);

  const Graph& graph() const { return graph_; }
  const GKNetConfig& config() const { return config_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  const IncidencePinv& pinv() const { return pinv_; }
  /// Edge-filter input, default B^T d with d the degree vector.
  const VectorXd& edge_input() const { return edge_input_; }
  void set_edge_input(VectorXd w);

  /// Tape handles for every parameter, in registry order.
  struct Staged {
    std::vector<ad::Tensor> tensors;
    const ad::Tensor& of(int index) const { return tensors[index]; }
  };
  Staged stage(ad::Tape& tape) const;

  // --- architecture blocks, all recorded on the tape ---

  /// Encoder GCNN on one zero-padded observation; returns the rough state
  /// estimate and the softplus-positive noise-scale channel.
  std::pair<ad::Tensor, ad::Tensor> encode(ad::Tape& tape, const Staged& s,
                                           const ad::Tensor& y_padded) const;

  /// Decoder GCNN on a latent state column.
  ad::Tensor decode(ad::Tape& tape, const Staged& s,
                    const ad::Tensor& state) const;

  /// Pre-activation sigma branches for a whole window (batch-normalized over
  /// the window's time axis); feeds infer_step.
  struct SigmaBranches {
    ad::Tensor z_branch;  // Khat x T
    ad::Tensor h_branch;  // Khat x T
  };
  SigmaBranches rnn_sigma_branches(ad::Tape& tape, const Staged& s,
                                   const ad::Tensor& sigma_window,
                                   bool train_mode);

  /// One recurrence step: returns the new RNN state h_t.
  ad::Tensor infer_step(ad::Tape& tape, const Staged& s,
                        const SigmaBranches& branches, int t,
                        const ad::Tensor& h_prev) const;

  /// Slices h_t into the Kalman-module parameters (c through softplus).
  struct StepParams {
    ad::Tensor c;        // 1x1, positive
    ad::Tensor gain;     // (K+1)x1
    ad::Tensor edge;     // (K+1)x1
    ad::Tensor input;    // (K+1)x1 when water variant
  };
  StepParams unpack_step(ad::Tape& tape, const ad::Tensor& h_t) const;

  /// alpha_t = |sum_k edge_k (B^T B)^k w|.
  ad::Tensor edge_uncertainty(ad::Tape& tape, const ad::Tensor& edge_coeffs,
                              const ad::Tensor& w) const;

  struct Belief {
    ad::Tensor mean;  // N x 1
    ad::Tensor cov;   // N x N
  };
  Belief km_predict(ad::Tape& tape, const Belief& prev, const ad::Tensor& c,
                    const ad::Tensor& alpha,
                    const ad::Tensor* input_coeffs = nullptr,
                    const ad::Tensor* runoff = nullptr) const;
  Belief km_correct(ad::Tape& tape, const Belief& pred,
                    const ad::Tensor& encoded_state,
                    const ad::Tensor& gain_coeffs) const;

  /// Per-step training objective: masked squared error plus the
  /// lambda-weighted state-smoothness quadratic form (alpha floored).
  ad::Tensor loss_step(ad::Tape& tape, const ad::Tensor& prediction,
                       const VectorXd& target, const VectorXd& target_mask,
                       const ad::Tensor& state, const Belief& predicted,
                       const ad::Tensor& alpha) const;

  struct ForwardResult {
    MatrixXd predictions;       // N x T decoder outputs
    MatrixXd states;            // N x T corrected means
    MatrixXd alphas;            // m x T
    VectorXd cs;                // T
    ad::Tensor loss;            // total window loss (valid if targets given)
    std::vector<ad::Tensor> prediction_tensors;
  };

  /// Full window pass: encode -> infer -> predict -> correct -> decode per
  /// step, carrying (x_t, P_t, h_t).  With `targets` the window loss is
  /// recorded on the tape.
  ForwardResult forward(ad::Tape& tape, const Staged& s,
                        const MatrixXd& window_padded,
                        const MatrixXd* targets, const MatrixXd* target_mask,
                        const MatrixXd* runoff, bool train_mode);

  /// Convenience evaluation pass (its own tape, eval-mode batch norm).
  MatrixXd predict(const MatrixXd& window_padded,
                   const MatrixXd* runoff = nullptr);

  // batch-norm running statistics (two branches, one per gate)
  ad::BatchNormState& bn_z() { return bn_z_; }
  ad::BatchNormState& bn_h() { return bn_h_; }
  const ad::BatchNormState& bn_z() const { return bn_z_; }
  const ad::BatchNormState& bn_h() const { return bn_h_; }

 private:
  Graph graph_;
  GKNetConfig config_;
  ParamRegistry params_;
  IncidencePinv pinv_;
  VectorXd edge_input_;
  MatrixXd edge_taps_;       // precomputed [w, L1 w, ..., L1^K w], m x (K+1)
  MatrixXd incidence_t_;     // dense B^T for the process-noise assembly
  ad::BatchNormState bn_z_;
  ad::BatchNormState bn_h_;

  // registry indices
  struct Indices {
    std::vector<std::vector<int>> encoder_taps;  // [layer][tap]
    std::vector<int> encoder_bias;
    std::vector<std::vector<int>> decoder_taps;
    std::vector<int> decoder_bias;
    int u_in = -1, u_out = -1, u_z = -1, u_h = -1;
    int bn_z_gamma = -1, bn_z_beta = -1, bn_h_gamma = -1, bn_h_beta = -1;
  } idx_;

  ad::Tensor gcnn(ad::Tape& tape, const Staged& s, const GcnnConfig& cfg,
                  const std::vector<std::vector<int>>& taps,
                  const std::vector<int>& bias, const ad::Tensor& x) const;
};

// --- training ---

struct TrainWindow {
  MatrixXd inputs;       // N x T zero-padded observations
  MatrixXd targets;      // N x T
  MatrixXd target_mask;  // N x T in {0, 1}
  std::optional<MatrixXd> runoff;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int patience = 10;      // early stopping on validation loss
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  int max_batches_per_epoch = 0;  // 0 = all
};

struct TrainResult {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;
  int best_epoch = -1;
  bool early_stopped = false;
};

/// Adam with truncated backpropagation through the provided windows;
/// deterministic per config.seed.  Aborts with the offending batch index on a
/// non-finite loss.
TrainResult train(GKNetModel& model, const std::vector<TrainWindow>& train_set,
                  const std::vector<TrainWindow>& val_set,
                  const TrainConfig& config);

/// Mean validation loss under the current parameters (eval-mode batch norm).
double evaluate_loss(GKNetModel& model, const std::vector<TrainWindow>& windows);

// checkpoint: one JSON document with shapes, flattened weights, config echo
// and the RNG seed
void save_checkpoint(const GKNetModel& model, std::uint64_t seed,
                     const std::string& path);
GKNetModel load_checkpoint(const Graph& graph, const std::string& path);

void write_loss_curves_csv(const TrainResult& result, const std::string& path);

}  // namespace gknet

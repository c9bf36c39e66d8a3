#include "gknet/gknet.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "gknet/random.hpp"

namespace gknet {

using ad::Tape;
using ad::Tensor;

KalmanParams unpack_kalman_params(const VectorXd& h, int order, bool water) {
  const int taps = order + 1;
  const int expect = water ? 3 * taps + 1 : 2 * taps + 1;
  if (h.size() != expect)
    throw DataError("unpack_kalman_params: wrong state length");
  KalmanParams p;
  p.c_raw = h[0];
  p.gain = h.segment(1, taps);
  p.edge = h.segment(1 + taps, taps);
  if (water) p.input = h.segment(1 + 2 * taps, taps);
  return p;
}

VectorXd pack_kalman_params(const KalmanParams& p) {
  const int taps = static_cast<int>(p.gain.size());
  VectorXd h(1 + 2 * taps + p.input.size());
  h[0] = p.c_raw;
  h.segment(1, taps) = p.gain;
  h.segment(1 + taps, taps) = p.edge;
  if (p.input.size() > 0) h.segment(1 + 2 * taps, taps) = p.input;
  return h;
}

int ParamRegistry::find(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  throw DataError("parameter not found: " + name);
}

std::size_t ParamRegistry::total_size() const {
  std::size_t total = 0;
  for (const auto& v : values) total += v.size();
  return total;
}

namespace {

MatrixXd init_matrix(Rng& rng, int rows, int cols, double scale) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

}  // namespace

GKNetModel::GKNetModel(const Graph& graph, GKNetConfig config,
                       std::uint64_t seed)
    : graph_(graph), config_(std::move(config)) {
  if (config_.encoder.widths.empty() || config_.encoder.widths.front() != 1 ||
      config_.encoder.widths.back() != 2)
    throw ConfigError("gknet: encoder widths must run from 1 to 2 channels");
  if (config_.decoder.widths.empty() || config_.decoder.widths.front() != 1 ||
      config_.decoder.widths.back() != 1)
    throw ConfigError("gknet: decoder widths must run from 1 to 1 channel");
  if (config_.c_scale <= 0.0) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(graph_.dense_laplacian());
    config_.c_scale = 1.0 / std::max(es.eigenvalues().maxCoeff(), 1e-12);
  }
  pinv_ = incidence_pseudoinverses(graph_);
  incidence_t_ = graph_.incidence().transpose();

  // default edge-filter input: w = B^T d
  VectorXd w;
  graph_.apply_incidence_t(graph_.degrees(), w);
  set_edge_input(std::move(w));

  Rng rng = Rng(seed).substream("init");
  const auto init_gcnn = [&](const GcnnConfig& cfg, const std::string& prefix,
                             std::vector<std::vector<int>>& taps,
                             std::vector<int>& bias) {
    taps.resize(cfg.layers());
    bias.resize(cfg.layers());
    for (int l = 0; l < cfg.layers(); ++l) {
      const int fin = cfg.widths[l], fout = cfg.widths[l + 1];
      const double scale = 1.0 / std::sqrt(fin * (cfg.order + 1));
      taps[l].resize(cfg.order + 1);
      for (int k = 0; k <= cfg.order; ++k)
        taps[l][k] = params_.add(
            prefix + ".l" + std::to_string(l) + ".w" + std::to_string(k),
            init_matrix(rng, fin, fout, scale));
      bias[l] = params_.add(prefix + ".l" + std::to_string(l) + ".b",
                            MatrixXd::Zero(fout, 1));
    }
  };
  init_gcnn(config_.encoder, "enc", idx_.encoder_taps, idx_.encoder_bias);
  init_gcnn(config_.decoder, "dec", idx_.decoder_taps, idx_.decoder_bias);

  const int khat = config_.state_len();
  const int n = graph_.num_nodes();
  idx_.u_in = params_.add("rnn.u_in",
                          init_matrix(rng, khat, n, 1.0 / std::sqrt(n)));
  idx_.u_out = params_.add("rnn.u_out",
                           init_matrix(rng, khat, n, 1.0 / std::sqrt(n)));
  idx_.u_z = params_.add("rnn.u_z",
                         init_matrix(rng, khat, khat, 0.5 / std::sqrt(khat)));
  idx_.u_h = params_.add("rnn.u_h",
                         init_matrix(rng, khat, khat, 0.5 / std::sqrt(khat)));
  // small batch-norm gains keep the unpacked filter coefficients in the
  // stable region at initialization
  idx_.bn_z_gamma = params_.add("rnn.bn_z.gamma",
                                MatrixXd::Constant(khat, 1, 0.1));
  idx_.bn_z_beta = params_.add("rnn.bn_z.beta", MatrixXd::Zero(khat, 1));
  idx_.bn_h_gamma = params_.add("rnn.bn_h.gamma",
                                MatrixXd::Constant(khat, 1, 0.1));
  idx_.bn_h_beta = params_.add("rnn.bn_h.beta", MatrixXd::Zero(khat, 1));
}

void GKNetModel::set_edge_input(VectorXd w) {
  if (w.size() != graph_.num_edges())
    throw DataError("gknet: edge input length != edge count");
  edge_input_ = std::move(w);
  const int taps = config_.kalman_order + 1;
  edge_taps_.resize(graph_.num_edges(), taps);
  VectorXd power = edge_input_, tmp;
  edge_taps_.col(0) = power;
  for (int k = 1; k < taps; ++k) {
    graph_.apply_edge_laplacian(power, tmp);
    power = tmp;
    edge_taps_.col(k) = power;
  }
}

GKNetModel::Staged GKNetModel::stage(Tape& tape) const {
  Staged staged;
  staged.tensors.reserve(params_.values.size());
  for (const auto& value : params_.values)
    staged.tensors.push_back(tape.input(value, true));
  return staged;
}

Tensor GKNetModel::gcnn(Tape& tape, const Staged& s, const GcnnConfig& cfg,
                        const std::vector<std::vector<int>>& taps,
                        const std::vector<int>& bias, const Tensor& x) const {
  const MatrixXd ones = MatrixXd::Ones(graph_.num_nodes(), 1);
  Tensor h = x;
  for (int l = 0; l < cfg.layers(); ++l) {
    Tensor acc;
    Tensor power = h;
    for (int k = 0; k <= cfg.order; ++k) {
      if (k > 0) power = tape.sparse_op(graph_, cfg.op, power);
      const Tensor term = tape.matmul(power, s.of(taps[l][k]));
      acc = k == 0 ? term : tape.add(acc, term);
    }
    // per-channel bias: ones * b^T
    acc = tape.add(acc, tape.matmul(tape.constant(ones), s.of(bias[l]), false,
                                    true));
    h = l + 1 < cfg.layers() ? tape.relu(acc) : acc;
  }
  return h;
}

std::pair<Tensor, Tensor> GKNetModel::encode(Tape& tape, const Staged& s,
                                             const Tensor& y_padded) const {
  const Tensor out = gcnn(tape, s, config_.encoder, idx_.encoder_taps,
                          idx_.encoder_bias, y_padded);
  const Tensor xtilde = tape.slice_cols(out, 0, 1);
  const Tensor sigma = tape.softplus(tape.slice_cols(out, 1, 1));
  return {xtilde, sigma};
}

Tensor GKNetModel::decode(Tape& tape, const Staged& s,
                          const Tensor& state) const {
  return gcnn(tape, s, config_.decoder, idx_.decoder_taps, idx_.decoder_bias,
              state);
}

GKNetModel::SigmaBranches GKNetModel::rnn_sigma_branches(
    Tape& tape, const Staged& s, const Tensor& sigma_window, bool train_mode) {
  SigmaBranches branches;
  if (config_.sigma_input_zeroed) {
    const int khat = config_.state_len();
    const int steps = sigma_window.cols();
    branches.z_branch = tape.constant(MatrixXd::Zero(khat, steps));
    branches.h_branch = tape.constant(MatrixXd::Zero(khat, steps));
    return branches;
  }
  const Tensor zin = tape.matmul(s.of(idx_.u_in), sigma_window);
  const Tensor zout = tape.matmul(s.of(idx_.u_out), sigma_window);
  branches.z_branch =
      tape.batch_norm(zin, s.of(idx_.bn_z_gamma), s.of(idx_.bn_z_beta), bn_z_,
                      train_mode);
  branches.h_branch =
      tape.batch_norm(zout, s.of(idx_.bn_h_gamma), s.of(idx_.bn_h_beta), bn_h_,
                      train_mode);
  return branches;
}

Tensor GKNetModel::infer_step(Tape& tape, const Staged& s,
                              const SigmaBranches& branches, int t,
                              const Tensor& h_prev) const {
  const Tensor z_pre = tape.add(tape.slice_cols(branches.z_branch, t, 1),
                                tape.matmul(s.of(idx_.u_z), h_prev));
  const Tensor z = config_.gate == GateMode::kSigmoid ? tape.sigmoid(z_pre)
                                                      : tape.relu(z_pre);
  const Tensor h_hat = tape.relu(tape.add(
      tape.slice_cols(branches.h_branch, t, 1),
      tape.matmul(s.of(idx_.u_h), h_prev)));
  return tape.add(tape.hadamard(z, h_prev),
                  tape.hadamard(tape.affine(z, -1.0, 1.0), h_hat));
}

GKNetModel::StepParams GKNetModel::unpack_step(Tape& tape,
                                               const Tensor& h_t) const {
  const int taps = config_.kalman_order + 1;
  StepParams p;
  p.c = tape.scale(tape.softplus(tape.slice_rows(h_t, 0, 1)), config_.c_scale);
  p.gain = tape.slice_rows(h_t, 1, taps);
  p.edge = tape.slice_rows(h_t, 1 + taps, taps);
  if (config_.water_variant)
    p.input = tape.slice_rows(h_t, 1 + 2 * taps, taps);
  return p;
}

Tensor GKNetModel::edge_uncertainty(Tape& tape, const Tensor& edge_coeffs,
                                    const Tensor& w) const {
  if (w.value().rows() != graph_.num_edges())
    throw DataError("edge_uncertainty: input length != edge count");
  return tape.abs(tape.poly_filter(graph_, OperatorKind::kEdgeLaplacian,
                                   edge_coeffs, w));
}

namespace {

// x - c dt L x (euler) or -c L x (literal); works on matrices columnwise.
Tensor apply_transition_taped(Tape& tape, const Graph& g, TransitionMode mode,
                              double dt, const Tensor& c, const Tensor& x) {
  const Tensor lx = tape.sparse_op(g, OperatorKind::kLaplacian, x);
  const Tensor clx = tape.scale_by(lx, c);
  if (mode == TransitionMode::kPaperLiteral) return tape.scale(clx, -1.0);
  return tape.sub(x, tape.scale(clx, dt));
}

}  // namespace

GKNetModel::Belief GKNetModel::km_predict(Tape& tape, const Belief& prev,
                                          const Tensor& c, const Tensor& alpha,
                                          const Tensor* input_coeffs,
                                          const Tensor* runoff) const {
  Belief out;
  out.mean = apply_transition_taped(tape, graph_, config_.transition_mode,
                                    config_.dt, c, prev.mean);
  if (config_.water_variant && input_coeffs && runoff) {
    out.mean = tape.add(
        out.mean, tape.poly_filter(graph_, OperatorKind::kLaplacian,
                                   *input_coeffs, *runoff));
  }
  // A P A^T using the symmetry of A, plus B diag(alpha^2) B^T
  const Tensor ap = apply_transition_taped(tape, graph_,
                                           config_.transition_mode, config_.dt,
                                           c, prev.cov);
  const Tensor apa = apply_transition_taped(tape, graph_,
                                            config_.transition_mode,
                                            config_.dt, c, tape.transpose(ap));
  const Tensor alpha_sq = tape.hadamard(alpha, alpha);
  const Tensor q = tape.incidence_apply(
      graph_, tape.scale_rows(tape.constant(incidence_t_), alpha_sq));
  out.cov = tape.add(apa, q);
  return out;
}

GKNetModel::Belief GKNetModel::km_correct(Tape& tape, const Belief& pred,
                                          const Tensor& encoded_state,
                                          const Tensor& gain_coeffs) const {
  Belief out;
  const Tensor innovation = tape.sub(encoded_state, pred.mean);
  const Tensor correction =
      tape.poly_filter(graph_, config_.kalman_op, gain_coeffs, innovation);
  out.mean = tape.add(pred.mean, correction);
  const Tensor kp =
      tape.poly_filter(graph_, config_.kalman_op, gain_coeffs, pred.cov);
  const Tensor cov = tape.sub(pred.cov, kp);
  out.cov = tape.scale(tape.add(cov, tape.transpose(cov)), 0.5);
  return out;
}

Tensor GKNetModel::loss_step(Tape& tape, const Tensor& prediction,
                             const VectorXd& target,
                             const VectorXd& target_mask, const Tensor& state,
                             const Belief& predicted,
                             const Tensor& alpha) const {
  const Tensor resid = tape.sub(prediction, tape.constant(target));
  const Tensor fid =
      tape.sum_sq(tape.hadamard(resid, tape.constant(target_mask)));
  if (config_.lambda == 0.0) return fid;
  const Tensor eps = tape.sub(state, predicted.mean);
  // alpha entries below the floor are floored, never rejected
  const MatrixXd floor_v =
      MatrixXd::Constant(graph_.num_edges(), 1, config_.alpha_floor);
  const Tensor floor_c = tape.constant(floor_v);
  const Tensor alpha_floored =
      tape.add(tape.relu(tape.sub(alpha, floor_c)), floor_c);
  const Tensor reg = tape.pinv_quadratic(pinv_, graph_, eps, alpha_floored);
  return tape.add(fid, tape.scale(reg, config_.lambda));
}

GKNetModel::ForwardResult GKNetModel::forward(
    Tape& tape, const Staged& s, const MatrixXd& window_padded,
    const MatrixXd* targets, const MatrixXd* target_mask,
    const MatrixXd* runoff, bool train_mode) {
  const int n = graph_.num_nodes();
  const int steps = static_cast<int>(window_padded.cols());
  if (steps < 1) throw DataError("gknet forward: empty window");
  if (window_padded.rows() != n)
    throw DataError("gknet forward: window rows != node count");
  if (!window_padded.allFinite())
    throw NumericalError("gknet forward: non-finite input");
  if (config_.water_variant && !runoff)
    throw DataError("gknet forward: water variant needs a runoff signal");

  ForwardResult result;
  result.predictions.resize(n, steps);
  result.states.resize(n, steps);
  result.alphas.resize(graph_.num_edges(), steps);
  result.cs.resize(steps);

  // encode every step first; batch-normalize the sigma branches over the
  // window's time axis, then run the recurrence
  std::vector<Tensor> xtilde(steps);
  Tensor sigma_rows;  // steps x N
  for (int t = 0; t < steps; ++t) {
    const auto [xt, st] = encode(tape, s, tape.constant(window_padded.col(t)));
    xtilde[t] = xt;
    const Tensor row = tape.transpose(st);
    sigma_rows = t == 0 ? row : tape.concat_rows(sigma_rows, row);
  }
  const SigmaBranches branches =
      rnn_sigma_branches(tape, s, tape.transpose(sigma_rows), train_mode);

  Belief belief;
  belief.mean = tape.constant(MatrixXd::Zero(n, 1));
  belief.cov = tape.constant(MatrixXd::Identity(n, n));
  Tensor h_state = tape.constant(MatrixXd::Zero(config_.state_len(), 1));
  const Tensor edge_taps = tape.constant(edge_taps_);
  Tensor total_loss;

  for (int t = 0; t < steps; ++t) {
    h_state = infer_step(tape, s, branches, t, h_state);
    const StepParams p = unpack_step(tape, h_state);
    const Tensor alpha =
        tape.abs(tape.matmul(edge_taps, p.edge));
    Tensor runoff_col;
    if (config_.water_variant)
      runoff_col = tape.constant(runoff->col(t));
    const Belief pred = km_predict(
        tape, belief, p.c, alpha,
        config_.water_variant ? &p.input : nullptr,
        config_.water_variant ? &runoff_col : nullptr);
    belief = km_correct(tape, pred, xtilde[t], p.gain);
    const Tensor decoded = decode(tape, s, belief.mean);

    result.predictions.col(t) = decoded.value().col(0);
    result.states.col(t) = belief.mean.value().col(0);
    result.alphas.col(t) = alpha.value().col(0);
    result.cs[t] = p.c.value()(0, 0);
    result.prediction_tensors.push_back(decoded);

    if (targets) {
      const VectorXd mask_col = target_mask
                                    ? VectorXd(target_mask->col(t))
                                    : VectorXd::Ones(n);
      const Tensor step_loss =
          loss_step(tape, decoded, targets->col(t), mask_col, belief.mean,
                    pred, alpha);
      total_loss = t == 0 ? step_loss : tape.add(total_loss, step_loss);
    }
  }
  if (targets) result.loss = total_loss;
  if (!result.predictions.allFinite())
    throw NumericalError("gknet forward: non-finite prediction");
  return result;
}

MatrixXd GKNetModel::predict(const MatrixXd& window_padded,
                             const MatrixXd* runoff) {
  Tape tape;
  const Staged s = stage(tape);
  return forward(tape, s, window_padded, nullptr, nullptr, runoff, false)
      .predictions;
}

double evaluate_loss(GKNetModel& model,
                     const std::vector<TrainWindow>& windows) {
  if (windows.empty()) throw DataError("evaluate_loss: no windows");
  double total = 0.0;
  for (const auto& w : windows) {
    Tape tape;
    const auto s = model.stage(tape);
    const auto out = model.forward(
        tape, s, w.inputs, &w.targets, &w.target_mask,
        w.runoff ? &*w.runoff : nullptr, false);
    total += out.loss.value()(0, 0);
  }
  return total / windows.size();
}

TrainResult train(GKNetModel& model, const std::vector<TrainWindow>& train_set,
                  const std::vector<TrainWindow>& val_set,
                  const TrainConfig& config) {
  if (train_set.empty()) throw DataError("train: empty training set");
  TrainResult result;
  auto& params = model.params().values;
  const int count = static_cast<int>(params.size());

  std::vector<MatrixXd> adam_m(count), adam_v(count);
  for (int i = 0; i < count; ++i) {
    adam_m[i] = MatrixXd::Zero(params[i].rows(), params[i].cols());
    adam_v[i] = adam_m[i];
  }
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  long long adam_t = 0;

  std::vector<MatrixXd> best_params = params;
  ad::BatchNormState best_bn_z = model.bn_z(), best_bn_h = model.bn_h();
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  Rng order_root = Rng(config.seed).substream("order");
  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng order_rng = order_root.substream("epoch", epoch);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[order_rng.below(i + 1)]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += config.batch_size) {
      if (config.max_batches_per_epoch > 0 &&
          batches >= config.max_batches_per_epoch)
        break;
      const std::size_t end =
          std::min(order.size(), start + config.batch_size);
      std::vector<MatrixXd> grad_sum(count);
      for (int i = 0; i < count; ++i)
        grad_sum[i] = MatrixXd::Zero(params[i].rows(), params[i].cols());
      double batch_loss = 0.0;
      for (std::size_t j = start; j < end; ++j) {
        const TrainWindow& w = train_set[order[j]];
        Tape tape;
        const auto staged = model.stage(tape);
        const auto out = model.forward(
            tape, staged, w.inputs, &w.targets, &w.target_mask,
            w.runoff ? &*w.runoff : nullptr, true);
        const double loss = out.loss.value()(0, 0);
        if (!std::isfinite(loss))
          throw NumericalError("train: non-finite loss in batch " +
                               std::to_string(batches) + " of epoch " +
                               std::to_string(epoch));
        batch_loss += loss;
        tape.backward(out.loss);
        for (int i = 0; i < count; ++i)
          grad_sum[i] += staged.tensors[i].grad();
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      double sq_norm = 0.0;
      for (int i = 0; i < count; ++i) {
        grad_sum[i] *= inv;
        sq_norm += grad_sum[i].squaredNorm();
      }
      const double norm = std::sqrt(sq_norm);
      if (config.clip_norm > 0.0 && norm > config.clip_norm) {
        const double shrink = config.clip_norm / norm;
        for (auto& g : grad_sum) g *= shrink;
      }
      ++adam_t;
      const double correction =
          std::sqrt(1.0 - std::pow(beta2, adam_t)) /
          (1.0 - std::pow(beta1, adam_t));
      for (int i = 0; i < count; ++i) {
        adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * grad_sum[i];
        adam_v[i] =
            beta2 * adam_v[i] +
            (1.0 - beta2) * grad_sum[i].cwiseProduct(grad_sum[i]);
        params[i] -=
            (config.learning_rate * correction) *
            (adam_m[i].array() / (adam_v[i].array().sqrt() + adam_eps))
                .matrix();
      }
      epoch_loss += batch_loss / static_cast<double>(end - start);
      ++batches;
    }
    result.train_loss.push_back(epoch_loss / std::max(batches, 1));

    const double val =
        val_set.empty() ? result.train_loss.back()
                        : evaluate_loss(model, val_set);
    result.val_loss.push_back(val);
    if (val < best_val) {
      best_val = val;
      best_params = params;
      best_bn_z = model.bn_z();
      best_bn_h = model.bn_h();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  params = best_params;
  model.bn_z() = best_bn_z;
  model.bn_h() = best_bn_h;
  return result;
}

namespace {

nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["data"] = std::vector<double>(m.data(), m.data() + m.size());
  return j;
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const int rows = j.at("rows").get<int>();
  const int cols = j.at("cols").get<int>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<int>(data.size()) != rows * cols)
    throw DataError("checkpoint: matrix size mismatch");
  return Eigen::Map<const MatrixXd>(data.data(), rows, cols);
}

nlohmann::json bn_to_json(const ad::BatchNormState& state) {
  nlohmann::json j;
  j["initialized"] = state.initialized;
  if (state.initialized) {
    j["mean"] = std::vector<double>(
        state.running_mean.data(),
        state.running_mean.data() + state.running_mean.size());
    j["var"] = std::vector<double>(
        state.running_var.data(),
        state.running_var.data() + state.running_var.size());
  }
  return j;
}

void bn_from_json(const nlohmann::json& j, ad::BatchNormState& state) {
  state.initialized = j.at("initialized").get<bool>();
  if (state.initialized) {
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto var = j.at("var").get<std::vector<double>>();
    state.running_mean =
        Eigen::Map<const VectorXd>(mean.data(), mean.size());
    state.running_var = Eigen::Map<const VectorXd>(var.data(), var.size());
  }
}

nlohmann::json gcnn_config_to_json(const GcnnConfig& cfg) {
  nlohmann::json j;
  j["widths"] = cfg.widths;
  j["order"] = cfg.order;
  j["operator"] = cfg.op == OperatorKind::kNormalizedLaplacian
                      ? "normalized-laplacian"
                      : "laplacian";
  return j;
}

GcnnConfig gcnn_config_from_json(const nlohmann::json& j) {
  GcnnConfig cfg;
  cfg.widths = j.at("widths").get<std::vector<int>>();
  cfg.order = j.at("order").get<int>();
  cfg.op = j.at("operator").get<std::string>() == "normalized-laplacian"
               ? OperatorKind::kNormalizedLaplacian
               : OperatorKind::kLaplacian;
  return cfg;
}

}  // namespace

void save_checkpoint(const GKNetModel& model, std::uint64_t seed,
                     const std::string& path) {
  nlohmann::json j;
  j["seed"] = seed;
  nlohmann::json cfg;
  const GKNetConfig& c = model.config();
  cfg["encoder"] = gcnn_config_to_json(c.encoder);
  cfg["decoder"] = gcnn_config_to_json(c.decoder);
  cfg["kalman_order"] = c.kalman_order;
  cfg["kalman_operator"] = c.kalman_op == OperatorKind::kNormalizedLaplacian
                               ? "normalized-laplacian"
                               : "laplacian";
  cfg["transition_mode"] =
      c.transition_mode == TransitionMode::kEuler ? "euler" : "paper-literal";
  cfg["dt"] = c.dt;
  cfg["gate"] = c.gate == GateMode::kSigmoid ? "sigmoid" : "paper-literal-relu";
  cfg["water_variant"] = c.water_variant;
  cfg["lambda"] = c.lambda;
  cfg["alpha_floor"] = c.alpha_floor;
  cfg["sigma_input_zeroed"] = c.sigma_input_zeroed;
  cfg["c_scale"] = c.c_scale;
  j["config"] = cfg;
  nlohmann::json weights;
  const auto& params = model.params();
  for (std::size_t i = 0; i < params.values.size(); ++i)
    weights[params.names[i]] = matrix_to_json(params.values[i]);
  j["weights"] = weights;
  j["bn_z"] = bn_to_json(model.bn_z());
  j["bn_h"] = bn_to_json(model.bn_h());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out << j.dump(2) << "\n";
}

GKNetModel load_checkpoint(const Graph& graph, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  const auto& cfg = j.at("config");
  GKNetConfig config;
  config.encoder = gcnn_config_from_json(cfg.at("encoder"));
  config.decoder = gcnn_config_from_json(cfg.at("decoder"));
  config.kalman_order = cfg.at("kalman_order").get<int>();
  config.kalman_op =
      cfg.at("kalman_operator").get<std::string>() == "normalized-laplacian"
          ? OperatorKind::kNormalizedLaplacian
          : OperatorKind::kLaplacian;
  config.transition_mode =
      cfg.at("transition_mode").get<std::string>() == "euler"
          ? TransitionMode::kEuler
          : TransitionMode::kPaperLiteral;
  config.dt = cfg.at("dt").get<double>();
  config.gate = cfg.at("gate").get<std::string>() == "sigmoid"
                    ? GateMode::kSigmoid
                    : GateMode::kPaperLiteralRelu;
  config.water_variant = cfg.at("water_variant").get<bool>();
  config.lambda = cfg.at("lambda").get<double>();
  config.alpha_floor = cfg.at("alpha_floor").get<double>();
  config.sigma_input_zeroed = cfg.at("sigma_input_zeroed").get<bool>();
  config.c_scale = cfg.at("c_scale").get<double>();
  GKNetModel model(graph, config, j.at("seed").get<std::uint64_t>());
  auto& params = model.params();
  for (std::size_t i = 0; i < params.values.size(); ++i)
    params.values[i] = matrix_from_json(j.at("weights").at(params.names[i]));
  bn_from_json(j.at("bn_z"), model.bn_z());
  bn_from_json(j.at("bn_h"), model.bn_h());
  return model;
}

void write_loss_curves_csv(const TrainResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write loss curves: " + path);
  out.precision(17);
  out << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < result.train_loss.size(); ++e)
    out << e << "," << result.train_loss[e] << "," << result.val_loss[e]
        << "\n";
}

}  // namespace gknet

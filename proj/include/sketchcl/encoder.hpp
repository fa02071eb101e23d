#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"
#include "linalg.hpp"
#include "rng.hpp"

namespace sketchcl {

struct EncoderConfig {
  std::size_t input_dim = 64;
  std::vector<std::size_t> hidden_dims{128, 128};
  std::size_t embedding_dim = 64;
  std::uint64_t seed = 0;
  // Scale of the cosine classifier logits.
  double temperature = 0.07;

  void validate() const {
    if (hidden_dims.empty()) throw ConfigError("encoder: hidden_dims must be non-empty");
    if (input_dim == 0 || embedding_dim == 0) throw ConfigError("encoder: dims must be >= 1");
    for (auto d : hidden_dims)
      if (d == 0) throw ConfigError("encoder: hidden dims must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("encoder: temperature must be > 0");
  }

  bool operator==(const EncoderConfig&) const = default;
};

// y = x * weight + bias, weight is (fan_in x fan_out).
struct DenseLayer {
  Matrix weight;
  RowVector bias;

  bool operator==(const DenseLayer& o) const { return weight == o.weight && bias == o.bias; }
};

// Per-task identity prototypes, one row per identity of that task. They serve
// as the cosine classifier and as the semantic anchors of the i2tce term.
struct TaskHead {
  int task_id = -1;
  Matrix prototypes;

  bool operator==(const TaskHead& o) const {
    return task_id == o.task_id && prototypes == o.prototypes;
  }
};

namespace detail {
inline std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline void fill_uniform(Matrix& m, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
}

// Smoothed norm so the cosine head stays differentiable at the origin.
inline constexpr double kNormFloor = 1e-12;
}  // namespace detail

// Hidden layers use tanh; the final (embedding) layer is linear.
struct EncoderState {
  EncoderConfig config;
  std::vector<DenseLayer> layers;
  std::vector<TaskHead> heads;
  int active_task = -1;
  // Changes on every mutation; activation stacks remember it to detect staleness.
  std::uint64_t stamp = detail::next_stamp();

  std::size_t depth() const { return layers.size(); }

  const TaskHead* find_head(int task_id) const {
    for (const auto& h : heads)
      if (h.task_id == task_id) return &h;
    return nullptr;
  }
  TaskHead* find_head(int task_id) {
    for (auto& h : heads)
      if (h.task_id == task_id) return &h;
    return nullptr;
  }
  const TaskHead& head(int task_id) const {
    const auto* h = find_head(task_id);
    if (!h) throw UsageError("task " + std::to_string(task_id) + " has no registered head");
    return *h;
  }

  void touch() { stamp = detail::next_stamp(); }

  // Stamp is bookkeeping, not state.
  bool operator==(const EncoderState& o) const {
    return config == o.config && layers == o.layers && heads == o.heads &&
           active_task == o.active_task;
  }
};

inline EncoderState init_encoder(const EncoderConfig& config) {
  config.validate();
  EncoderState state;
  state.config = config;
  Rng rng(config.seed);
  std::size_t fan_in = config.input_dim;
  auto add_layer = [&](std::size_t fan_out) {
    DenseLayer layer;
    layer.weight.resize(static_cast<Eigen::Index>(fan_in), static_cast<Eigen::Index>(fan_out));
    layer.bias.resize(static_cast<Eigen::Index>(fan_out));
    detail::fill_uniform(layer.weight, fan_in, rng);
    for (Eigen::Index c = 0; c < layer.bias.size(); ++c) {
      const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
      layer.bias(c) = rng.uniform(-bound, bound);
    }
    state.layers.push_back(std::move(layer));
    fan_in = fan_out;
  };
  for (auto d : config.hidden_dims) add_layer(d);
  add_layer(config.embedding_dim);
  return state;
}

inline void register_task_head(EncoderState& state, int task_id, std::size_t num_identities,
                               std::uint64_t seed) {
  if (state.find_head(task_id))
    throw UsageError("task " + std::to_string(task_id) + " already has a head");
  if (num_identities == 0) throw UsageError("task head needs at least one identity");
  TaskHead head;
  head.task_id = task_id;
  head.prototypes.resize(static_cast<Eigen::Index>(num_identities),
                         static_cast<Eigen::Index>(state.config.embedding_dim));
  Rng rng(seed);
  detail::fill_uniform(head.prototypes, state.config.embedding_dim, rng);
  state.heads.push_back(std::move(head));
  if (state.active_task < 0) state.active_task = task_id;
  state.touch();
}

// Per-layer activations of one batch.
//
// Layer indices used by layer(): 0..depth-1 are the dense layer outputs (the
// last one is the embedding), depth is the logits layer and depth+1 the
// softmax probabilities.
struct ActivationStack {
  Matrix input;
  std::vector<Matrix> pre;     // pre-activations of the dense layers
  std::vector<Matrix> layers;  // dense outputs followed by the logits
  Matrix probabilities;
  RowVector embedding_norms;   // smoothed, one per row
  RowVector prototype_norms;   // smoothed, one per prototype row
  Matrix cosines;              // unscaled cosine similarities
  int task_id = -1;
  std::uint64_t stamp = 0;

  std::size_t depth() const { return pre.size(); }
  std::size_t num_layers() const { return layers.size() + 1; }
  std::size_t rows() const { return static_cast<std::size_t>(input.rows()); }
  const Matrix& embedding() const { return layers[depth() - 1]; }
  const Matrix& logits() const { return layers.back(); }
  const Matrix& layer(std::size_t index) const {
    if (index < layers.size()) return layers[index];
    if (index == layers.size()) return probabilities;
    throw ShapeError("activation layer index out of range");
  }
};

// Runs the shared layers only.
inline Matrix embed(const EncoderState& state, const Matrix& batch) {
  if (static_cast<std::size_t>(batch.cols()) != state.config.input_dim)
    throw ShapeError("batch feature dim " + std::to_string(batch.cols()) + " != input dim " +
                     std::to_string(state.config.input_dim));
  Matrix x = batch;
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    Matrix z = x * state.layers[l].weight;
    z.rowwise() += state.layers[l].bias;
    if (l + 1 < state.layers.size()) z = z.array().tanh().matrix();
    x = std::move(z);
  }
  return x;
}

namespace detail {
inline RowVector smoothed_row_norms(const Matrix& m) {
  RowVector n(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    n(r) = std::sqrt(m.row(r).squaredNorm() + kNormFloor);
  return n;
}

inline Matrix row_softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      p(r, c) = std::exp(logits(r, c) - mx);
      sum += p(r, c);
    }
    p.row(r) /= sum;
  }
  return p;
}
}  // namespace detail

// Logits are cosine similarities to the task prototypes divided by the temperature.
inline ActivationStack forward(const EncoderState& state, const Matrix& batch, int task_id) {
  const TaskHead& head = state.head(task_id);
  if (static_cast<std::size_t>(batch.cols()) != state.config.input_dim)
    throw ShapeError("batch feature dim " + std::to_string(batch.cols()) + " != input dim " +
                     std::to_string(state.config.input_dim));
  ActivationStack s;
  s.input = batch;
  s.task_id = task_id;
  s.stamp = state.stamp;
  const Matrix* x = &s.input;
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    Matrix z = (*x) * state.layers[l].weight;
    z.rowwise() += state.layers[l].bias;
    s.pre.push_back(z);
    if (l + 1 < state.layers.size()) z = z.array().tanh().matrix();
    s.layers.push_back(std::move(z));
    x = &s.layers.back();
  }
  const Matrix& e = s.layers.back();
  s.embedding_norms = detail::smoothed_row_norms(e);
  s.prototype_norms = detail::smoothed_row_norms(head.prototypes);
  s.cosines = e * head.prototypes.transpose();
  for (Eigen::Index r = 0; r < s.cosines.rows(); ++r)
    for (Eigen::Index c = 0; c < s.cosines.cols(); ++c)
      s.cosines(r, c) /= s.embedding_norms(r) * s.prototype_norms(c);
  s.layers.push_back(s.cosines / state.config.temperature);
  s.probabilities = detail::row_softmax(s.layers.back());
  return s;
}

// Upstream gradients, shaped like ActivationStack::layer(i) for every i.
struct ActivationGrads {
  std::vector<Matrix> layers;

  static ActivationGrads zeros_like(const ActivationStack& s) {
    ActivationGrads g;
    for (std::size_t i = 0; i < s.num_layers(); ++i) {
      const Matrix& a = s.layer(i);
      g.layers.push_back(Matrix::Zero(a.rows(), a.cols()));
    }
    return g;
  }
  Matrix& operator[](std::size_t i) { return layers[i]; }
  const Matrix& operator[](std::size_t i) const { return layers[i]; }
};

struct ParameterGradients {
  std::vector<Matrix> weights;
  std::vector<RowVector> biases;
  int task_id = -1;
  Matrix prototypes;

  static ParameterGradients zeros_like(const EncoderState& state, int task_id) {
    ParameterGradients g;
    for (const auto& l : state.layers) {
      g.weights.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      g.biases.push_back(RowVector::Zero(l.bias.size()));
    }
    g.task_id = task_id;
    const auto& p = state.head(task_id).prototypes;
    g.prototypes = Matrix::Zero(p.rows(), p.cols());
    return g;
  }

  bool all_zero() const {
    for (const auto& w : weights)
      if (!w.isZero(0.0)) return false;
    for (const auto& b : biases)
      if (!b.isZero(0.0)) return false;
    return prototypes.isZero(0.0);
  }
};

// Adds d(loss)/d(cosine logits) contributions to embedding and prototype gradients.
namespace detail {
inline void cosine_head_backward(const Matrix& embedding, const RowVector& emb_norms,
                                 const Matrix& prototypes, const RowVector& proto_norms,
                                 const Matrix& cosines, const Matrix& grad_cos,
                                 Matrix& grad_embedding, Matrix& grad_prototypes) {
  // cos_ic = <e_i, w_c> / (n(e_i) n(w_c)) with n(v) = sqrt(|v|^2 + floor), so
  // d cos_ic / d e_i = w_c / (n(e_i) n(w_c)) - cos_ic * e_i / n(e_i)^2.
  Matrix scaled = grad_cos;
  for (Eigen::Index r = 0; r < scaled.rows(); ++r)
    for (Eigen::Index c = 0; c < scaled.cols(); ++c)
      scaled(r, c) /= emb_norms(r) * proto_norms(c);
  grad_embedding.noalias() += scaled * prototypes;
  grad_prototypes.noalias() += scaled.transpose() * embedding;
  const Matrix weighted = grad_cos.cwiseProduct(cosines);
  for (Eigen::Index r = 0; r < embedding.rows(); ++r) {
    const double s = weighted.row(r).sum() / (emb_norms(r) * emb_norms(r));
    grad_embedding.row(r) -= s * embedding.row(r);
  }
  for (Eigen::Index c = 0; c < prototypes.rows(); ++c) {
    const double s = weighted.col(c).sum() / (proto_norms(c) * proto_norms(c));
    grad_prototypes.row(c) -= s * prototypes.row(c);
  }
}
}  // namespace detail

// Backpropagates upstream gradients (given on any subset of layers) to all
// shared parameters and the prototypes of the stack's task.
inline ParameterGradients backward(const EncoderState& state, const ActivationStack& stack,
                                   const ActivationGrads& upstream) {
  if (stack.stamp != state.stamp)
    throw UsageError("activation stack is stale: encoder changed since forward");
  if (upstream.layers.size() != stack.num_layers())
    throw ShapeError("upstream gradient layer count mismatch");
  const std::size_t depth = stack.depth();
  const TaskHead& head = state.head(stack.task_id);
  ParameterGradients grads = ParameterGradients::zeros_like(state, stack.task_id);

  // softmax: dz = p .* (dp - <dp, p>)
  const Matrix& p = stack.probabilities;
  const Matrix& dp = upstream[depth + 1];
  Matrix dlogits = upstream[depth];
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double inner = dp.row(r).dot(p.row(r));
    dlogits.row(r) += (p.row(r).array() * (dp.row(r).array() - inner)).matrix();
  }
  const Matrix dcos = dlogits / state.config.temperature;
  Matrix dx = upstream[depth - 1];
  detail::cosine_head_backward(stack.embedding(), stack.embedding_norms, head.prototypes,
                               stack.prototype_norms, stack.cosines, dcos, dx, grads.prototypes);

  for (std::size_t l = depth; l-- > 0;) {
    Matrix dz = std::move(dx);
    if (l + 1 < depth) dz = dz.cwiseProduct((1.0 - stack.layers[l].array().square()).matrix());
    const Matrix& in = l == 0 ? stack.input : stack.layers[l - 1];
    grads.weights[l].noalias() = in.transpose() * dz;
    grads.biases[l] = dz.colwise().sum();
    if (l > 0) {
      dx = dz * state.layers[l].weight.transpose();
      dx += upstream[l - 1];
    }
  }
  return grads;
}

}  // namespace sketchcl

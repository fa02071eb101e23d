#pragma once

// Fixtures shared by the unit suite and the acceptance binary.

#include <string>
#include <vector>

#include <sketchcl/datasets.hpp>
#include <sketchcl/encoder.hpp>
#include <sketchcl/losses.hpp>

#include "oracles.hpp"

namespace support {

using sketchcl::Matrix;

inline std::string source_path(const std::string& rel) { return std::string(SKETCHCL_SOURCE_DIR) + "/" + rel; }

inline sketchcl::EncoderConfig tiny_encoder(std::uint64_t seed) {
  sketchcl::EncoderConfig c;
  c.input_dim = 6;
  c.hidden_dims = {5, 4};
  c.embedding_dim = 3;
  c.seed = seed;
  return c;
}

// Eight rows: identities 0..3, one sketch then one photo each.
struct Batch {
  Matrix x;
  std::vector<int> labels;
  std::vector<bool> is_sketch;
};

inline Batch tiny_batch(sketchcl::Rng& rng, Eigen::Index dim, int ids = 4) {
  Batch b;
  b.x = oracle::random_matrix(rng, 2 * ids, dim);
  for (int i = 0; i < ids; ++i) {
    b.labels.insert(b.labels.end(), {i, i});
    b.is_sketch.insert(b.is_sketch.end(), {true, false});
  }
  return b;
}

// The full training objective of one batch with bandwidths held fixed, and
// optionally its parameter gradients.
inline double sim_objective(const sketchcl::EncoderState& st, const Batch& b, int task,
                            const sketchcl::JmmdSpec& spec, sketchcl::ParameterGradients* grads) {
  using namespace sketchcl;
  const ActivationStack stack = forward(st, b.x, task);
  ActivationGrads up = ActivationGrads::zeros_like(stack);
  const std::size_t depth = stack.depth();
  const LossGradient id = id_loss(stack.probabilities, b.labels, 0.1);
  up[depth + 1] += id.grad;
  const I2tceGradient i2t = i2tce_loss(stack.embedding(), st.head(task).prototypes, b.labels, 0.07);
  up[depth - 1] += i2t.embeddings;
  const LossGradient tri = triplet_loss(stack.embedding(), b.labels, 0.3);
  up[depth - 1] += tri.grad;
  const JmmdTerm jm = jmmd_on_stack(stack, b.is_sketch, spec, spec.alpha, up);
  if (grads) {
    *grads = backward(st, stack, up);
    grads->prototypes += i2t.prototypes;
  }
  return sim_loss(id.value, tri.value, i2t.value, jm.value, spec.alpha).l_sim;
}

// Median bandwidths of the batch frozen into an explicit spec.
inline sketchcl::JmmdSpec frozen_spec(const sketchcl::EncoderState& st, const Batch& b, int task) {
  using namespace sketchcl;
  JmmdSpec spec = JmmdSpec::defaults(st.depth());
  const ActivationStack stack = forward(st, b.x, task);
  ActivationGrads scratch = ActivationGrads::zeros_like(stack);
  const JmmdTerm t = jmmd_on_stack(stack, b.is_sketch, spec, 0.0, scratch);
  spec.bandwidths.clear();
  for (double s2 : t.squared_bandwidths) spec.bandwidths.emplace_back(std::sqrt(s2));
  return spec;
}

// Worst finite-difference relative error per component for one seed.
struct GradReport {
  double jmmd = 0.0, triplet = 0.0, id = 0.0, i2tce = 0.0, encoder = 0.0;
};

inline GradReport gradient_errors(std::uint64_t seed) {
  using namespace sketchcl;
  Rng rng(mix_seed(seed, 424242));
  GradReport r;

  {  // jmmd w.r.t. every activation of both sets
    const Eigen::Index ns = 2 + static_cast<Eigen::Index>(rng.below(5));
    const Eigen::Index np = 2 + static_cast<Eigen::Index>(rng.below(5));
    LayerSet s, p;
    for (Eigen::Index d : {3, 4, 2}) {
      s.push_back(oracle::random_matrix(rng, ns, d));
      p.push_back(oracle::random_matrix(rng, np, d, 1.0) + Matrix::Constant(np, d, 0.5));
    }
    LayerSet pooled;
    std::vector<double> bw;
    for (std::size_t l = 0; l < s.size(); ++l) {
      Matrix m(ns + np, s[l].cols());
      m << s[l], p[l];
      bw.push_back(median_bandwidth(m));
    }
    const JmmdGradient g = jmmd_grad(s, p, bw);
    for (std::size_t l = 0; l < s.size(); ++l) {
      r.jmmd = std::max(r.jmmd, oracle::fd_check(s[l], g.sketch[l], [&] { return jmmd(s, p, bw); }));
      r.jmmd = std::max(r.jmmd, oracle::fd_check(p[l], g.photo[l], [&] { return jmmd(s, p, bw); }));
    }
  }
  {  // triplet
    Matrix e = oracle::random_matrix(rng, 8, 4);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
    const LossGradient g = triplet_loss(e, labels, 0.3);
    r.triplet = oracle::fd_check(e, g.grad, [&] { return triplet_loss(e, labels, 0.3).value; });
  }
  {  // id loss w.r.t. probabilities
    Matrix probs(8, 5);
    for (Eigen::Index i = 0; i < 8; ++i) {
      const auto row = oracle::random_simplex(rng, 5);
      for (Eigen::Index k = 0; k < 5; ++k) probs(i, k) = 0.05 + row[static_cast<std::size_t>(k)];
    }
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(rng.below(5)));
    const LossGradient g = id_loss(probs, labels, 0.1);
    r.id = oracle::fd_check(probs, g.grad, [&] { return id_loss(probs, labels, 0.1).value; });
  }
  {  // i2tce w.r.t. embeddings and prototypes
    Matrix e = oracle::random_matrix(rng, 8, 4);
    Matrix w = oracle::random_matrix(rng, 5, 4);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(rng.below(5)));
    const I2tceGradient g = i2tce_loss(e, w, labels, 0.07);
    auto f = [&] { return i2tce_loss(e, w, labels, 0.07).value; };
    r.i2tce = std::max(oracle::fd_check(e, g.embeddings, f), oracle::fd_check(w, g.prototypes, f));
  }
  {  // full objective through the encoder, every parameter
    EncoderState st = init_encoder(tiny_encoder(mix_seed(seed, 7)));
    register_task_head(st, 0, 4, mix_seed(seed, 8));
    const Batch b = tiny_batch(rng, 6);
    const JmmdSpec spec = frozen_spec(st, b, 0);
    ParameterGradients g;
    sim_objective(st, b, 0, spec, &g);
    auto f = [&] { return sim_objective(st, b, 0, spec, nullptr); };
    for (std::size_t l = 0; l < st.layers.size(); ++l) {
      r.encoder = std::max(r.encoder, oracle::fd_check(st.layers[l].weight, g.weights[l], f));
      Matrix bias = st.layers[l].bias;
      const Matrix gb = g.biases[l];
      r.encoder = std::max(r.encoder, oracle::fd_check(bias, gb, [&] {
                             st.layers[l].bias = bias.row(0);
                             return f();
                           }));
      st.layers[l].bias = bias.row(0);
    }
    r.encoder = std::max(r.encoder, oracle::fd_check(st.heads[0].prototypes, g.prototypes, f));
  }
  return r;
}

}  // namespace support

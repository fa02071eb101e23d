#include <gtest/gtest.h>

#include <sketchcl/encoder.hpp>
#include <sketchcl/optim.hpp>
#include <sketchcl/serialize.hpp>

#include "oracles.hpp"
#include "support.hpp"

using namespace sketchcl;

TEST(Encoder, SameSeedGivesIdenticalState) {
  EncoderConfig c;
  c.seed = 17;
  EXPECT_EQ(init_encoder(c), init_encoder(c));
  EXPECT_EQ(encoder_to_json(init_encoder(c)), encoder_to_json(init_encoder(c)));
}

TEST(Encoder, EmptyHiddenDimsRejected) {
  EncoderConfig c;
  c.hidden_dims = {};
  EXPECT_THROW(init_encoder(c), ConfigError);
  c = EncoderConfig{};
  c.hidden_dims = {8, 0};
  EXPECT_THROW(init_encoder(c), ConfigError);
}

TEST(Encoder, DifferentSeedsDiffer) {
  EncoderConfig a, b;
  a.seed = 1;
  b.seed = 2;
  EXPECT_NE(encoder_to_json(init_encoder(a)), encoder_to_json(init_encoder(b)));
}

TEST(Encoder, DefaultShapesAndInitRange) {
  const EncoderState st = init_encoder(EncoderConfig{});
  ASSERT_EQ(st.layers.size(), 3u);
  const std::vector<std::pair<long, long>> shapes{{64, 128}, {128, 128}, {128, 64}};
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(st.layers[l].weight.rows(), shapes[l].first);
    EXPECT_EQ(st.layers[l].weight.cols(), shapes[l].second);
    const double bound = std::sqrt(3.0 / static_cast<double>(shapes[l].first));
    EXPECT_LE(st.layers[l].weight.cwiseAbs().maxCoeff(), bound);
    // A uniform draw fills most of the interval.
    EXPECT_GT(st.layers[l].weight.cwiseAbs().maxCoeff(), 0.9 * bound);
  }
}

TEST(Encoder, RegisteredHeadSetsLogitWidth) {
  EncoderState st = init_encoder(support::tiny_encoder(3));
  register_task_head(st, 0, 5, 11);
  register_task_head(st, 1, 7, 11);
  EXPECT_EQ(st.head(0).prototypes.rows(), 5);
  EXPECT_EQ(st.head(1).prototypes.rows(), 7);
  Rng rng(1);
  const Matrix x = oracle::random_matrix(rng, 4, 6);
  EXPECT_EQ(forward(st, x, 0).logits().cols(), 5);
  EXPECT_EQ(forward(st, x, 1).logits().cols(), 7);
}

TEST(Encoder, RegisteringLeavesOtherHeadsUntouched) {
  EncoderState st = init_encoder(support::tiny_encoder(3));
  register_task_head(st, 0, 5, 11);
  const Matrix before = st.head(0).prototypes;
  register_task_head(st, 1, 5, 12);
  EXPECT_TRUE(st.head(0).prototypes == before);
}

TEST(Encoder, DuplicateOrEmptyHeadRejected) {
  EncoderState st = init_encoder(support::tiny_encoder(3));
  register_task_head(st, 0, 5, 11);
  EXPECT_THROW(register_task_head(st, 0, 5, 11), UsageError);
  EXPECT_THROW(register_task_head(st, 1, 0, 11), UsageError);
  EXPECT_THROW(st.head(9), UsageError);
}

TEST(Encoder, ZeroInputZeroBiasRowsIdentical) {
  EncoderState st = init_encoder(support::tiny_encoder(5));
  for (auto& l : st.layers) l.bias.setZero();
  register_task_head(st, 0, 3, 1);
  const ActivationStack s = forward(st, Matrix::Zero(4, 6), 0);
  // tanh(0) = 0 and a linear last layer keep everything at the origin.
  EXPECT_TRUE(s.embedding().isZero(0.0));
  for (Eigen::Index r = 1; r < 4; ++r) EXPECT_TRUE(s.probabilities.row(r) == s.probabilities.row(0));
}

TEST(Encoder, SoftmaxRowsSumToOne) {
  EncoderState st = init_encoder(EncoderConfig{});
  register_task_head(st, 0, 30, 9);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const ActivationStack s = forward(st, oracle::random_matrix(rng, 16, 64, 3.0), 0);
    for (Eigen::Index r = 0; r < 16; ++r) EXPECT_NEAR(s.probabilities.row(r).sum(), 1.0, 1e-9);
  }
}

TEST(Encoder, ForwardIsDeterministic) {
  EncoderState st = init_encoder(EncoderConfig{});
  register_task_head(st, 0, 10, 9);
  Rng rng(4);
  const Matrix x = oracle::random_matrix(rng, 8, 64);
  const ActivationStack a = forward(st, x, 0), b = forward(st, x, 0);
  for (std::size_t i = 0; i < a.num_layers(); ++i) EXPECT_TRUE(a.layer(i) == b.layer(i));
}

TEST(Encoder, LayerIndexing) {
  EncoderState st = init_encoder(support::tiny_encoder(1));
  register_task_head(st, 0, 4, 2);
  const ActivationStack s = forward(st, Matrix::Ones(2, 6), 0);
  EXPECT_EQ(s.depth(), 3u);
  EXPECT_EQ(s.num_layers(), 5u);
  EXPECT_EQ(s.layer(0).cols(), 5);
  EXPECT_EQ(s.layer(1).cols(), 4);
  EXPECT_EQ(s.layer(2).cols(), 3);
  EXPECT_EQ(s.layer(3).cols(), 4);
  EXPECT_TRUE(s.layer(4) == s.probabilities);
  EXPECT_THROW(s.layer(5), ShapeError);
  EXPECT_TRUE(embed(st, Matrix::Ones(2, 6)) == s.embedding());
}

TEST(Encoder, InputWidthChecked) {
  EncoderState st = init_encoder(support::tiny_encoder(1));
  register_task_head(st, 0, 4, 2);
  EXPECT_THROW(forward(st, Matrix::Ones(2, 7), 0), ShapeError);
  EXPECT_THROW(forward(st, Matrix::Ones(2, 6), 3), UsageError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  EncoderState st = init_encoder(support::tiny_encoder(1));
  register_task_head(st, 0, 4, 2);
  Rng rng(8);
  const ActivationStack s = forward(st, oracle::random_matrix(rng, 5, 6), 0);
  EXPECT_TRUE(backward(st, s, ActivationGrads::zeros_like(s)).all_zero());
}

TEST(Backward, StaleStackRejected) {
  EncoderState st = init_encoder(support::tiny_encoder(1));
  register_task_head(st, 0, 4, 2);
  const ActivationStack s = forward(st, Matrix::Ones(2, 6), 0);
  st.touch();
  EXPECT_THROW(backward(st, s, ActivationGrads::zeros_like(s)), UsageError);
}

TEST(Backward, MatchesFiniteDifferencesOnEveryParameter) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = support::gradient_errors(seed);
    EXPECT_LT(r.encoder, 1e-4) << "seed " << seed;
  }
}

// Linear probe on every layer, so every layer's upstream path is exercised.
TEST(Backward, LinearProbeOnAllLayersMatchesFiniteDifferences) {
  EncoderState st = init_encoder(support::tiny_encoder(21));
  register_task_head(st, 0, 4, 22);
  Rng rng(23);
  const Matrix x = oracle::random_matrix(rng, 6, 6);
  const ActivationStack s = forward(st, x, 0);
  ActivationGrads up = ActivationGrads::zeros_like(s);
  for (std::size_t i = 0; i < s.num_layers(); ++i)
    up[i] = oracle::random_matrix(rng, up[i].rows(), up[i].cols());
  auto f = [&] {
    const ActivationStack t = forward(st, x, 0);
    double v = 0.0;
    for (std::size_t i = 0; i < t.num_layers(); ++i) v += t.layer(i).cwiseProduct(up[i]).sum();
    return v;
  };
  const ParameterGradients g = backward(st, s, up);
  for (std::size_t l = 0; l < st.layers.size(); ++l)
    EXPECT_LT(oracle::fd_check(st.layers[l].weight, g.weights[l], f), 1e-4);
  EXPECT_LT(oracle::fd_check(st.heads[0].prototypes, g.prototypes, f), 1e-4);
}

// For a mean-reduced loss the batch gradient is the mean of per-sample gradients.
TEST(Backward, BatchOfTwoIsMeanOfSingles) {
  EncoderState st = init_encoder(support::tiny_encoder(31));
  register_task_head(st, 0, 3, 32);
  Rng rng(33);
  const Matrix x = oracle::random_matrix(rng, 2, 6);
  const std::vector<int> labels{0, 2};
  auto grads_for = [&](const Matrix& rows, const std::vector<int>& ys) {
    const ActivationStack s = forward(st, rows, 0);
    ActivationGrads up = ActivationGrads::zeros_like(s);
    up[s.depth() + 1] = id_loss(s.probabilities, ys, 0.1).grad;
    return backward(st, s, up);
  };
  const ParameterGradients both = grads_for(x, labels);
  const ParameterGradients a = grads_for(x.topRows(1), {labels[0]});
  const ParameterGradients b = grads_for(x.bottomRows(1), {labels[1]});
  for (std::size_t l = 0; l < st.layers.size(); ++l)
    EXPECT_LT((both.weights[l] - 0.5 * (a.weights[l] + b.weights[l])).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((both.prototypes - 0.5 * (a.prototypes + b.prototypes)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Optimizer, StepsOnlyTheNamedHead) {
  EncoderState st = init_encoder(support::tiny_encoder(41));
  register_task_head(st, 0, 3, 42);
  register_task_head(st, 1, 4, 43);
  const Matrix old_head = st.head(0).prototypes;
  const auto old_layer = st.layers[0].weight;
  Rng rng(44);
  const ActivationStack s = forward(st, oracle::random_matrix(rng, 4, 6), 1);
  ActivationGrads up = ActivationGrads::zeros_like(s);
  up[s.depth() + 1] = id_loss(s.probabilities, std::vector<int>{0, 1, 2, 3}).grad;
  AdamOptimizer opt;
  opt.step(st, backward(st, s, up), 1e-2);
  EXPECT_TRUE(st.head(0).prototypes == old_head);
  EXPECT_FALSE(st.layers[0].weight == old_layer);
}

TEST(Optimizer, FrozenSharedLayersStayPut) {
  EncoderState st = init_encoder(support::tiny_encoder(41));
  register_task_head(st, 0, 3, 42);
  const auto layers = st.layers;
  const Matrix head = st.head(0).prototypes;
  Rng rng(45);
  const ActivationStack s = forward(st, oracle::random_matrix(rng, 3, 6), 0);
  ActivationGrads up = ActivationGrads::zeros_like(s);
  up[s.depth() + 1] = id_loss(s.probabilities, std::vector<int>{0, 1, 2}).grad;
  AdamOptimizer opt;
  opt.step(st, backward(st, s, up), 1e-2, false);
  for (std::size_t l = 0; l < layers.size(); ++l) EXPECT_TRUE(st.layers[l].weight == layers[l].weight);
  EXPECT_FALSE(st.head(0).prototypes == head);
}

// First Adam step moves each parameter by lr * g / (|g| + eps') = ~lr * sign(g).
TEST(Optimizer, FirstAdamStepIsSignScaled) {
  EncoderState st = init_encoder(support::tiny_encoder(51));
  register_task_head(st, 0, 3, 52);
  const auto before = st.layers[2].weight;
  Rng rng(53);
  const ActivationStack s = forward(st, oracle::random_matrix(rng, 3, 6), 0);
  ActivationGrads up = ActivationGrads::zeros_like(s);
  up[s.depth() + 1] = id_loss(s.probabilities, std::vector<int>{0, 1, 2}).grad;
  const ParameterGradients g = backward(st, s, up);
  AdamOptimizer opt;
  opt.step(st, g, 1e-3);
  const Matrix delta = st.layers[2].weight - before;
  for (Eigen::Index i = 0; i < delta.rows(); ++i)
    for (Eigen::Index j = 0; j < delta.cols(); ++j) {
      const double gij = g.weights[2](i, j);
      const double expect = -1e-3 * gij / (std::abs(gij) + 1e-8);
      EXPECT_NEAR(delta(i, j), expect, 1e-12);
    }
}

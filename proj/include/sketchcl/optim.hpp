#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "encoder.hpp"

namespace sketchcl {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with separate step counters for the shared layers and for each task
// head. A head is stepped only when the gradients name its task, so heads
// that do not take part in a batch stay bitwise unchanged.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {}

  void step(EncoderState& state, const ParameterGradients& grads, double lr,
            bool update_shared = true) {
    if (!state.find_head(grads.task_id))
      throw UsageError("adam: no head for task " + std::to_string(grads.task_id));
    if (update_shared) {
      if (shared_.weights.empty()) {
        for (const auto& l : state.layers) {
          shared_.weights.push_back(Moments::zeros(l.weight.rows(), l.weight.cols()));
          shared_.biases.push_back(Moments::zeros(1, l.bias.size()));
        }
      }
      ++shared_.t;
      for (std::size_t l = 0; l < state.layers.size(); ++l) {
        apply(state.layers[l].weight, grads.weights[l], shared_.weights[l], shared_.t, lr);
        Matrix bias = state.layers[l].bias;
        apply(bias, grads.biases[l], shared_.biases[l], shared_.t, lr);
        state.layers[l].bias = bias.row(0);
      }
    }
    TaskHead& head = *state.find_head(grads.task_id);
    auto [it, inserted] = heads_.try_emplace(grads.task_id);
    HeadMoments& hm = it->second;
    if (inserted) hm.prototypes = Moments::zeros(head.prototypes.rows(), head.prototypes.cols());
    ++hm.t;
    apply(head.prototypes, grads.prototypes, hm.prototypes, hm.t, lr);
    state.touch();
  }

 private:
  struct Moments {
    Matrix m, v;
    static Moments zeros(Eigen::Index r, Eigen::Index c) {
      return {Matrix::Zero(r, c), Matrix::Zero(r, c)};
    }
  };
  struct SharedMoments {
    std::vector<Moments> weights, biases;
    long t = 0;
  };
  struct HeadMoments {
    Moments prototypes;
    long t = 0;
  };

  template <typename G>
  void apply(Matrix& param, const G& grad, Moments& mo, long t, double lr) const {
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (Eigen::Index r = 0; r < param.rows(); ++r) {
      for (Eigen::Index c = 0; c < param.cols(); ++c) {
        const double g = grad(r, c);
        double& m = mo.m(r, c);
        double& v = mo.v(r, c);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        param(r, c) -= lr * (m / c1) / (std::sqrt(v / c2) + config_.epsilon);
      }
    }
  }

  AdamConfig config_;
  SharedMoments shared_;
  std::map<int, HeadMoments> heads_;
};

}  // namespace sketchcl

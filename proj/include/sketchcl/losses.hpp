#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "encoder.hpp"
#include "error.hpp"
#include "linalg.hpp"

namespace sketchcl {

// Floor applied to resolved squared bandwidths.
inline constexpr double kMinSquaredBandwidth = 1e-12;

// exp(-|x - y|^2 / (2 sigma^2))
template <typename A, typename B>
double gaussian_kernel(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y,
                       double bandwidth) {
  if (!(bandwidth > 0.0)) throw DomainError("gaussian_kernel: bandwidth must be > 0");
  if (x.size() != y.size()) throw ShapeError("gaussian_kernel: dimension mismatch");
  return std::exp(-(x - y).squaredNorm() / (2.0 * bandwidth * bandwidth));
}

// Median heuristic. Returns the squared bandwidth: the median of the pairwise
// squared distances between the rows (mean of the two middle values for an
// even pair count), floored at kMinSquaredBandwidth.
inline double median_bandwidth(const Matrix& features) {
  const Eigen::Index n = features.rows();
  if (n < 2) throw DomainError("median_bandwidth: need at least 2 vectors");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      d.push_back((features.row(i) - features.row(j)).squaredNorm());
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return std::max(med, kMinSquaredBandwidth);
}

// ---------------------------------------------------------------------------
// Joint MMD

struct JmmdSpec {
  // Indices into ActivationStack::layer().
  std::vector<std::size_t> layers;
  // Per-layer kernel bandwidth sigma; nullopt selects the median heuristic
  // on the pooled sketch+photo batch.
  std::vector<std::optional<double>> bandwidths;
  double alpha = 5.0;

  // Embedding, last hidden layer and softmax layer of an encoder with
  // `depth` dense layers.
  static JmmdSpec defaults(std::size_t depth) {
    JmmdSpec s;
    s.layers = {depth - 1, depth - 2, depth + 1};
    s.bandwidths.assign(3, std::nullopt);
    return s;
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("jmmd: layer set must be non-empty");
    if (bandwidths.size() != layers.size())
      throw ConfigError("jmmd: one bandwidth entry per layer required");
    for (const auto& b : bandwidths)
      if (b && !(*b > 0.0)) throw ConfigError("jmmd: bandwidths must be > 0");
    if (!(alpha >= 0.0)) throw ConfigError("jmmd: alpha must be >= 0");
  }
};

// One matrix per kernel layer, rows are samples.
using LayerSet = std::vector<Matrix>;

namespace detail {
inline void check_sets(const LayerSet& s, const LayerSet& p, std::size_t nsig) {
  if (s.empty() || s.size() != p.size() || s.size() != nsig)
    throw ShapeError("jmmd: layer counts do not match the spec");
  const Eigen::Index ns = s[0].rows(), np = p[0].rows();
  if (ns == 0 || np == 0) throw DomainError("jmmd: sample sets must be non-empty");
  for (std::size_t l = 0; l < s.size(); ++l) {
    if (s[l].rows() != ns || p[l].rows() != np)
      throw ShapeError("jmmd: inconsistent sample counts across layers");
    if (s[l].cols() != p[l].cols()) throw ShapeError("jmmd: layer dimension mismatch");
  }
}

// Product over layers of exp(-|a_i - b_j|^2 / (2 sigma_l^2)).
inline Matrix product_kernel(const LayerSet& a, const LayerSet& b, std::span<const double> sq_bw) {
  const Eigen::Index na = a[0].rows(), nb = b[0].rows();
  Matrix exponent = Matrix::Zero(na, nb);
  for (std::size_t l = 0; l < a.size(); ++l) {
    const double inv = 1.0 / (2.0 * std::max(sq_bw[l], kMinSquaredBandwidth));
    for (Eigen::Index i = 0; i < na; ++i)
      for (Eigen::Index j = 0; j < nb; ++j)
        exponent(i, j) += (a[l].row(i) - b[l].row(j)).squaredNorm() * inv;
  }
  return (-exponent.array()).exp().matrix();
}
}  // namespace detail

// Squared bandwidth per layer: fixed sigma^2, or the median heuristic over
// the pooled rows of both sets.
inline std::vector<double> resolve_bandwidths(const LayerSet& sketch, const LayerSet& photo,
                                              const JmmdSpec& spec) {
  std::vector<double> sq(spec.layers.size());
  for (std::size_t l = 0; l < sq.size(); ++l) {
    if (spec.bandwidths[l]) {
      sq[l] = std::max((*spec.bandwidths[l]) * (*spec.bandwidths[l]), kMinSquaredBandwidth);
    } else {
      Matrix pooled(sketch[l].rows() + photo[l].rows(), sketch[l].cols());
      pooled << sketch[l], photo[l];
      sq[l] = pooled.rows() >= 2 ? median_bandwidth(pooled) : 1.0;
    }
  }
  return sq;
}

// Biased (V-statistic) joint MMD with product kernels across layers, i = j
// terms included. `squared_bandwidths` holds sigma_l^2 per layer.
inline double jmmd(const LayerSet& sketch, const LayerSet& photo,
                   std::span<const double> squared_bandwidths) {
  detail::check_sets(sketch, photo, squared_bandwidths.size());
  const double ns = static_cast<double>(sketch[0].rows());
  const double np = static_cast<double>(photo[0].rows());
  const double ss = detail::product_kernel(sketch, sketch, squared_bandwidths).sum();
  const double pp = detail::product_kernel(photo, photo, squared_bandwidths).sum();
  const double sp = detail::product_kernel(sketch, photo, squared_bandwidths).sum();
  return ss / (ns * ns) + pp / (np * np) - 2.0 * sp / (ns * np);
}

struct JmmdGradient {
  double value = 0.0;
  LayerSet sketch;  // d value / d sketch activations
  LayerSet photo;   // d value / d photo activations
};

// Analytic gradient of jmmd(); bandwidths are constants.
inline JmmdGradient jmmd_grad(const LayerSet& sketch, const LayerSet& photo,
                              std::span<const double> squared_bandwidths) {
  detail::check_sets(sketch, photo, squared_bandwidths.size());
  const Eigen::Index ns = sketch[0].rows(), np = photo[0].rows();
  const double fs = static_cast<double>(ns), fp = static_cast<double>(np);
  const Matrix kss = detail::product_kernel(sketch, sketch, squared_bandwidths);
  const Matrix kpp = detail::product_kernel(photo, photo, squared_bandwidths);
  const Matrix ksp = detail::product_kernel(sketch, photo, squared_bandwidths);

  JmmdGradient out;
  out.value = kss.sum() / (fs * fs) + kpp.sum() / (fp * fp) - 2.0 * ksp.sum() / (fs * fp);

  // d K_ij / d a_i = -K_ij (a_i - b_j) / sigma^2 at each layer.
  // Coefficients: self terms 2/n^2 (both index slots), cross term -2/(ns np).
  for (std::size_t l = 0; l < sketch.size(); ++l) {
    const double inv = 1.0 / std::max(squared_bandwidths[l], kMinSquaredBandwidth);
    const Matrix& s = sketch[l];
    const Matrix& p = photo[l];
    Matrix gs = Matrix::Zero(ns, s.cols());
    Matrix gp = Matrix::Zero(np, p.cols());
    const double css = 2.0 / (fs * fs), cpp = 2.0 / (fp * fp), csp = -2.0 / (fs * fp);
    for (Eigen::Index i = 0; i < ns; ++i) {
      for (Eigen::Index j = 0; j < ns; ++j)
        gs.row(i) -= css * kss(i, j) * inv * (s.row(i) - s.row(j));
      for (Eigen::Index j = 0; j < np; ++j) {
        const double w = csp * ksp(i, j) * inv;
        gs.row(i) -= w * (s.row(i) - p.row(j));
        gp.row(j) -= w * (p.row(j) - s.row(i));
      }
    }
    for (Eigen::Index i = 0; i < np; ++i)
      for (Eigen::Index j = 0; j < np; ++j)
        gp.row(i) -= cpp * kpp(i, j) * inv * (p.row(i) - p.row(j));
    out.sketch.push_back(std::move(gs));
    out.photo.push_back(std::move(gp));
  }
  return out;
}

struct JmmdTerm {
  double value = 0.0;
  std::vector<double> squared_bandwidths;
};

// JMMD between the rows flagged as sketches and the remaining rows of one
// activation stack. Adds weight * gradient into `grads`.
inline JmmdTerm jmmd_on_stack(const ActivationStack& stack, const std::vector<bool>& is_sketch,
                              const JmmdSpec& spec, double weight, ActivationGrads& grads) {
  spec.validate();
  std::vector<Eigen::Index> si, pi;
  for (std::size_t r = 0; r < is_sketch.size(); ++r)
    (is_sketch[r] ? si : pi).push_back(static_cast<Eigen::Index>(r));
  if (si.empty() || pi.empty()) throw DomainError("jmmd: batch lacks one modality");
  LayerSet s, p;
  for (auto l : spec.layers) {
    const Matrix& a = stack.layer(l);
    s.push_back(a(si, Eigen::all));
    p.push_back(a(pi, Eigen::all));
  }
  JmmdTerm term;
  term.squared_bandwidths = resolve_bandwidths(s, p, spec);
  const JmmdGradient g = jmmd_grad(s, p, term.squared_bandwidths);
  term.value = g.value;
  if (weight != 0.0) {
    for (std::size_t k = 0; k < spec.layers.size(); ++k) {
      Matrix& dst = grads[spec.layers[k]];
      for (std::size_t r = 0; r < si.size(); ++r) dst.row(si[r]) += weight * g.sketch[k].row(r);
      for (std::size_t r = 0; r < pi.size(); ++r) dst.row(pi[r]) += weight * g.photo[k].row(r);
    }
  }
  return term;
}

// ---------------------------------------------------------------------------
// ReID terms

struct LossGradient {
  double value = 0.0;
  Matrix grad;
};

namespace detail {
// Smoothed Euclidean distance; differentiable when rows coincide.
inline double smooth_distance(const Matrix& e, Eigen::Index i, Eigen::Index j) {
  return std::sqrt((e.row(i) - e.row(j)).squaredNorm() + 1e-12);
}
}  // namespace detail

// Batch-hard triplet loss: for every anchor that has at least one positive,
// max(0, d(a, farthest positive) - d(a, nearest negative) + margin), averaged
// over those anchors. Ties pick the lowest row index.
inline LossGradient triplet_loss(const Matrix& embeddings, std::span<const int> labels,
                                 double margin) {
  const Eigen::Index n = embeddings.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("triplet: label count");
  bool two_ids = false, has_pos = false;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? has_pos
                                                                                  : two_ids) = true;
  if (!two_ids) throw DomainError("triplet: batch needs at least two identities");
  if (!has_pos) throw DomainError("triplet: batch needs an identity with two samples");

  LossGradient out;
  out.grad = Matrix::Zero(n, embeddings.cols());
  std::size_t anchors = 0;
  struct Active {
    Eigen::Index a, p, q;
    double dp, dn;
  };
  std::vector<Active> active;
  for (Eigen::Index a = 0; a < n; ++a) {
    Eigen::Index best_p = -1, best_n = -1;
    double dp = -1.0, dn = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = detail::smooth_distance(embeddings, a, j);
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (d > dp) dp = d, best_p = j;
      } else if (best_n < 0 || d < dn) {
        dn = d, best_n = j;
      }
    }
    if (best_p < 0) continue;
    ++anchors;
    const double v = dp - dn + margin;
    if (v > 0.0) {
      out.value += v;
      active.push_back({a, best_p, best_n, dp, dn});
    }
  }
  const double inv = 1.0 / static_cast<double>(anchors);
  out.value *= inv;
  for (const auto& t : active) {
    const RowVector up = (embeddings.row(t.a) - embeddings.row(t.p)) / t.dp;
    const RowVector un = (embeddings.row(t.a) - embeddings.row(t.q)) / t.dn;
    out.grad.row(t.a) += inv * (up - un);
    out.grad.row(t.p) -= inv * up;
    out.grad.row(t.q) += inv * un;
  }
  return out;
}

// Mean label-smoothed cross-entropy on probabilities; the smoothed target puts
// 1 - eps + eps/C on the label and eps/C elsewhere. Gradient is w.r.t. the
// probabilities.
inline LossGradient id_loss(const Matrix& probabilities, std::span<const int> labels,
                            double smoothing = 0.1) {
  const Eigen::Index n = probabilities.rows(), c = probabilities.cols();
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("id_loss: label count");
  if (n == 0) throw DomainError("id_loss: empty batch");
  LossGradient out;
  out.grad = Matrix::Zero(n, c);
  const double off = smoothing / static_cast<double>(c);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw DomainError("id_loss: label out of range");
    for (Eigen::Index k = 0; k < c; ++k) {
      const double t = (k == y ? 1.0 - smoothing : 0.0) + off;
      if (t == 0.0) continue;
      const double p = std::max(probabilities(i, k), 1e-300);
      out.value -= inv_n * t * std::log(p);
      out.grad(i, k) = -inv_n * t / p;
    }
  }
  return out;
}

struct I2tceGradient {
  double value = 0.0;
  Matrix embeddings;
  Matrix prototypes;
};

// Cross-entropy of temperature-scaled cosine similarities between each
// embedding and every prototype row, against the label's row.
inline I2tceGradient i2tce_loss(const Matrix& embeddings, const Matrix& prototypes,
                                std::span<const int> labels, double temperature = 0.07) {
  const Eigen::Index n = embeddings.rows(), c = prototypes.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("i2tce: label count");
  if (embeddings.cols() != prototypes.cols()) throw ShapeError("i2tce: dimension mismatch");
  if (!(temperature > 0.0)) throw DomainError("i2tce: temperature must be > 0");
  const RowVector en = detail::smoothed_row_norms(embeddings);
  const RowVector pn = detail::smoothed_row_norms(prototypes);
  Matrix cos = embeddings * prototypes.transpose();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < c; ++k) cos(i, k) /= en(i) * pn(k);
  const Matrix p = detail::row_softmax(cos / temperature);

  I2tceGradient out;
  out.embeddings = Matrix::Zero(n, embeddings.cols());
  out.prototypes = Matrix::Zero(c, prototypes.cols());
  Matrix dcos = p;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw DomainError("i2tce: label out of range");
    const double mx = cos.row(i).maxCoeff() / temperature;
    double lse = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) lse += std::exp(cos(i, k) / temperature - mx);
    out.value += inv_n * (std::log(lse) + mx - cos(i, y) / temperature);
    dcos(i, y) -= 1.0;
  }
  dcos *= inv_n / temperature;
  detail::cosine_head_backward(embeddings, en, prototypes, pn, cos, dcos, out.embeddings,
                               out.prototypes);
  return out;
}

struct LossBreakdown {
  double l_id = 0.0;
  double l_tri = 0.0;
  double l_i2tce = 0.0;
  double l_reid = 0.0;
  double l_jmmd = 0.0;
  double l_sim = 0.0;
};

// L_reid = L_id + L_tri + L_i2tce; L_sim = L_reid + alpha * L_jmmd.
inline LossBreakdown sim_loss(double l_id, double l_tri, double l_i2tce, double l_jmmd,
                              double alpha = 5.0) {
  LossBreakdown b;
  b.l_id = l_id;
  b.l_tri = l_tri;
  b.l_i2tce = l_i2tce;
  b.l_jmmd = l_jmmd;
  b.l_reid = l_id + l_tri + l_i2tce;
  b.l_sim = b.l_reid + alpha * l_jmmd;
  return b;
}

}  // namespace sketchcl

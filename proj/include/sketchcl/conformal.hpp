#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "error.hpp"

namespace sketchcl {

// Rank-penalized conformal prediction sets.
//
// For a probability vector pi over C identities, identities are ranked by
// descending probability (o_y = 1 is the most probable; ties go to the lower
// identity index). rho_y is the mass of all strictly higher-ranked
// identities and
//
//   score_y = rho_y + pi_y + lambda * max(0, o_y - k_reg)
//
// The prediction set holds every identity with score_y <= tau. Its
// uncertainty is |C(x)| + (max pi - min pi over the members).

struct CpConfig {
  double lambda = 0.3;
  int k_reg = 10;
  double tau = 5.0;
  // When set, tau is replaced by a quantile of true-label scores computed on
  // labelled calibration data (see calibrate_tau). Off by default.
  bool calibrate = false;
  double coverage = 0.9;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("conformal: lambda must be >= 0");
    if (k_reg < 1) throw ConfigError("conformal: k_reg must be >= 1");
    if (!(tau > 0.0)) throw ConfigError("conformal: tau must be > 0");
    if (!(coverage > 0.0 && coverage < 1.0)) throw ConfigError("conformal: coverage in (0,1)");
  }
};

struct RankedProbabilities {
  std::vector<std::size_t> rank;     // 1-based rank of each identity
  std::vector<double> cumulative;    // rho of each identity
  std::vector<std::size_t> order;    // identities sorted by rank
};

inline RankedProbabilities rank_and_cumulate(std::span<const double> probs) {
  if (probs.empty()) throw DomainError("conformal: empty probability vector");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw DomainError("conformal: negative or non-finite probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw DomainError("conformal: probabilities do not sum to 1");

  RankedProbabilities r;
  r.order.resize(probs.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  r.rank.resize(probs.size());
  r.cumulative.resize(probs.size());
  double mass = 0.0;
  for (std::size_t k = 0; k < r.order.size(); ++k) {
    const std::size_t y = r.order[k];
    r.rank[y] = k + 1;
    r.cumulative[y] = mass;
    mass += probs[y];
  }
  return r;
}

namespace detail {
inline double score_from(const RankedProbabilities& r, std::span<const double> probs,
                         std::size_t y, const CpConfig& cfg) {
  const double over = std::max(0.0, static_cast<double>(r.rank[y]) - cfg.k_reg);
  return r.cumulative[y] + probs[y] + cfg.lambda * over;
}
}  // namespace detail

inline double cp_score(std::span<const double> probs, std::size_t y, const CpConfig& cfg = {}) {
  if (y >= probs.size()) throw DomainError("conformal: identity out of range");
  return detail::score_from(rank_and_cumulate(probs), probs, y, cfg);
}

struct PredictionSet {
  std::vector<std::size_t> members;  // ascending rank order
  std::vector<double> scores;        // score of each member
  std::size_t size = 0;
  double conf = 0.0;
  double unc = 0.0;
  // True when no identity clears tau; such samples are never admitted to a bank.
  bool empty = true;
};

inline PredictionSet prediction_set(std::span<const double> probs, const CpConfig& cfg = {}) {
  const RankedProbabilities r = rank_and_cumulate(probs);
  PredictionSet set;
  double hi = 0.0, lo = 0.0;
  for (std::size_t y : r.order) {
    const double s = detail::score_from(r, probs, y, cfg);
    if (s > cfg.tau) continue;
    if (set.members.empty()) {
      hi = lo = probs[y];
    } else {
      hi = std::max(hi, probs[y]);
      lo = std::min(lo, probs[y]);
    }
    set.members.push_back(y);
    set.scores.push_back(s);
  }
  set.size = set.members.size();
  set.empty = set.members.empty();
  set.conf = set.empty ? 0.0 : hi - lo;
  set.unc = static_cast<double>(set.size) + set.conf;
  return set;
}

inline double uncertainty(std::span<const double> probs, const CpConfig& cfg = {}) {
  return prediction_set(probs, cfg).unc;
}

// Split-conformal threshold: the ceil((n + 1) * coverage)-th smallest
// true-label score over the calibration rows (capped at the largest).
inline double calibrate_tau(const std::vector<std::vector<double>>& probs,
                            std::span<const std::size_t> labels, const CpConfig& cfg) {
  if (probs.empty() || probs.size() != labels.size())
    throw DomainError("calibrate_tau: need matching non-empty probabilities and labels");
  std::vector<double> scores;
  scores.reserve(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) scores.push_back(cp_score(probs[i], labels[i], cfg));
  std::sort(scores.begin(), scores.end());
  const double n = static_cast<double>(scores.size());
  auto k = static_cast<std::size_t>(std::ceil((n + 1.0) * cfg.coverage));
  k = std::clamp<std::size_t>(k, 1, scores.size());
  return scores[k - 1];
}

}  // namespace sketchcl

#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "datasets.hpp"
#include "encoder.hpp"
#include "error.hpp"

namespace sketchcl {

// Retrieval metrics of one task at one evaluation step, in percent.
struct MetricsRecord {
  int task_id = -1;
  int step = 0;
  double map = 0.0;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  std::size_t num_queries = 0;
  // Queries with no relevant gallery item; left out of every metric.
  std::size_t excluded_queries = 0;

  bool operator==(const MetricsRecord&) const = default;
};

// Mean over relevant positions r (1-based) of precision@r. Accumulated in
// extended precision so short lists round to the nearest double.
template <typename Flags>
double average_precision(const Flags& ranked_relevance) {
  long double hits = 0.0L, sum = 0.0L;
  std::size_t pos = 0;
  for (const bool relevant : ranked_relevance) {
    ++pos;
    if (!relevant) continue;
    hits += 1.0L;
    sum += hits / static_cast<long double>(pos);
  }
  if (hits == 0.0L) throw DomainError("average_precision: no relevant item");
  return static_cast<double>(sum / hits);
}

inline double average_precision(std::initializer_list<bool> ranked_relevance) {
  return average_precision<std::initializer_list<bool>>(ranked_relevance);
}

enum class Distance { euclidean, cosine };

struct RetrievalOptions {
  Distance distance = Distance::euclidean;
  // Query with photos against a sketch gallery instead of the default.
  bool swap_query_gallery = false;
};

// Ranks the gallery for every query by ascending distance (ties by gallery
// index) and computes mAP and CMC rank@{1,5,10}.
inline MetricsRecord evaluate_embeddings(const Matrix& query, std::span<const int> query_ids,
                                         const Matrix& gallery, std::span<const int> gallery_ids,
                                         Distance distance = Distance::euclidean) {
  if (query.cols() != gallery.cols()) throw ShapeError("evaluate: embedding dim mismatch");
  if (static_cast<std::size_t>(query.rows()) != query_ids.size() ||
      static_cast<std::size_t>(gallery.rows()) != gallery_ids.size())
    throw ShapeError("evaluate: label count mismatch");
  Matrix q = query, g = gallery;
  if (distance == Distance::cosine) {
    q.rowwise().normalize();
    g.rowwise().normalize();
  }
  MetricsRecord rec;
  const auto ng = static_cast<std::size_t>(g.rows());
  std::vector<double> dist(ng);
  std::vector<std::size_t> order(ng);
  std::vector<bool> rel(ng);
  double ap_sum = 0.0, c1 = 0.0, c5 = 0.0, c10 = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < ng; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      dist[j] = distance == Distance::cosine ? -q.row(i).dot(g.row(jj))
                                             : (q.row(i) - g.row(jj)).squaredNorm();
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    std::size_t first = ng;
    for (std::size_t r = 0; r < ng; ++r) {
      rel[r] = gallery_ids[order[r]] == query_ids[static_cast<std::size_t>(i)];
      if (rel[r] && first == ng) first = r;
    }
    if (first == ng) {
      ++rec.excluded_queries;
      continue;
    }
    ++rec.num_queries;
    ap_sum += average_precision(rel);
    c1 += first < 1;
    c5 += first < 5;
    c10 += first < 10;
  }
  if (rec.num_queries > 0) {
    const double n = static_cast<double>(rec.num_queries);
    rec.map = 100.0 * ap_sum / n;
    rec.r1 = 100.0 * c1 / n;
    rec.r5 = 100.0 * c5 / n;
    rec.r10 = 100.0 * c10 / n;
  }
  return rec;
}

// Cross-modal retrieval on a task's test split using the shared embedding.
inline MetricsRecord evaluate(const EncoderState& encoder, const TaskDataset& task,
                              const RetrievalOptions& opts = {}) {
  std::set<int> gallery_ids;
  for (const auto& s : task.gallery) gallery_ids.insert(s.identity);
  for (const auto& s : task.query)
    if (!gallery_ids.count(s.identity))
      throw ValidationError("query-in-gallery",
                            "query identity " + std::to_string(s.identity) + " has no gallery photo");
  const auto& qs = opts.swap_query_gallery ? task.gallery : task.query;
  const auto& gs = opts.swap_query_gallery ? task.query : task.gallery;
  std::vector<int> qid, gid;
  for (const auto& s : qs) qid.push_back(s.identity);
  for (const auto& s : gs) gid.push_back(s.identity);
  MetricsRecord rec = evaluate_embeddings(embed(encoder, to_matrix(qs)), qid,
                                          embed(encoder, to_matrix(gs)), gid, opts.distance);
  rec.task_id = task.task_id;
  return rec;
}

// Unweighted mean across tasks; task_id of the result is -1.
inline MetricsRecord aggregate(std::span<const MetricsRecord> records) {
  if (records.empty()) throw DomainError("aggregate: no records");
  MetricsRecord out;
  out.step = records.front().step;
  for (const auto& r : records) {
    out.map += r.map;
    out.r1 += r.r1;
    out.r5 += r.r5;
    out.r10 += r.r10;
    out.num_queries += r.num_queries;
    out.excluded_queries += r.excluded_queries;
  }
  const double n = static_cast<double>(records.size());
  out.map /= n;
  out.r1 /= n;
  out.r5 /= n;
  out.r10 /= n;
  return out;
}

}  // namespace sketchcl

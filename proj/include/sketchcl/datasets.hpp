#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "linalg.hpp"
#include "rng.hpp"

namespace sketchcl {

enum class Modality { sketch, photo };
enum class Split { train, query, gallery };

inline const char* to_string(Modality m) { return m == Modality::sketch ? "sketch" : "photo"; }
inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    default: return "gallery";
  }
}

struct Sample {
  int identity = 0;
  Modality modality = Modality::photo;
  Split split = Split::train;
  std::vector<double> features;
  // Training-only identities from the auxiliary synthetic partition.
  bool auxiliary = false;

  bool operator==(const Sample&) const = default;
};

struct TaskDataset {
  int task_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> query;    // sketches
  std::vector<Sample> gallery;  // photos

  bool operator==(const TaskDataset&) const = default;

  std::size_t feature_dim() const {
    for (const auto* part : {&train, &query, &gallery})
      if (!part->empty()) return part->front().features.size();
    return 0;
  }

  // Sorted distinct identities of the train split; a head row per entry.
  std::vector<int> train_identities() const {
    std::set<int> ids;
    for (const auto& s : train) ids.insert(s.identity);
    return {ids.begin(), ids.end()};
  }

  std::vector<int> test_identities() const {
    std::set<int> ids;
    for (const auto& s : query) ids.insert(s.identity);
    for (const auto& s : gallery) ids.insert(s.identity);
    return {ids.begin(), ids.end()};
  }

  // Identity -> head row.
  std::map<int, int> head_index() const {
    std::map<int, int> idx;
    for (int id : train_identities()) idx.emplace(id, static_cast<int>(idx.size()));
    return idx;
  }

  void validate() const {
    const std::size_t dim = feature_dim();
    for (const auto* part : {&train, &query, &gallery})
      for (const auto& s : *part)
        if (s.features.size() != dim)
          throw ValidationError("feature-dim", "inconsistent feature dimensions within task " +
                                                   std::to_string(task_id));
    for (const auto& s : train)
      if (s.split != Split::train) throw ValidationError("split", "train part holds a non-train row");
    for (const auto& s : query) {
      if (s.split != Split::query) throw ValidationError("split", "query part holds a non-query row");
      if (s.auxiliary) throw ValidationError("aux-train-only", "auxiliary identity in query split");
    }
    for (const auto& s : gallery) {
      if (s.split != Split::gallery)
        throw ValidationError("split", "gallery part holds a non-gallery row");
      if (s.auxiliary) throw ValidationError("aux-train-only", "auxiliary identity in gallery split");
    }
    const auto tr = train_identities();
    const auto te = test_identities();
    std::vector<int> both;
    std::set_intersection(tr.begin(), tr.end(), te.begin(), te.end(), std::back_inserter(both));
    if (!both.empty())
      throw ValidationError("train-test-disjoint",
                            "identity " + std::to_string(both.front()) + " is in train and test");
    std::set<int> gallery_ids;
    for (const auto& s : gallery) gallery_ids.insert(s.identity);
    for (const auto& s : query)
      if (!gallery_ids.count(s.identity))
        throw ValidationError("query-in-gallery",
                              "query identity " + std::to_string(s.identity) + " has no gallery photo");
  }

  // Copy without the auxiliary partition.
  TaskDataset without_auxiliary() const {
    TaskDataset d = *this;
    std::erase_if(d.train, [](const Sample& s) { return s.auxiliary; });
    return d;
  }
};

inline Matrix to_matrix(const std::vector<Sample>& samples, std::span<const std::size_t> rows) {
  const std::size_t dim = samples.empty() ? 0 : samples.front().features.size();
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& f = samples[rows[r]].features;
    for (std::size_t c = 0; c < dim; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = f[c];
  }
  return m;
}

inline Matrix to_matrix(const std::vector<Sample>& samples) {
  std::vector<std::size_t> rows(samples.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return to_matrix(samples, rows);
}

// ---------------------------------------------------------------------------
// Synthetic tasks

// Linear-Gaussian cross-modal generator. Every identity draws a latent z;
// photos are A_p z + b_p + N w + e and sketches A_s z + b_s + N w + e, where
// w is a per-sample latent nuisance and e isotropic noise. The base maps
// (signal, nuisance, modality gap) come from base_seed and are shared by all
// tasks of an experiment; the task's own seed draws the identities and the
// task-specific parts of the gap and offsets. task_shift rotates the signal
// and nuisance maps into each other by shift * pi/2, so at shift 1 the
// base task's identity directions are pure nuisance and vice versa.
struct SynthSpec {
  int task_id = 0;
  int id_offset = 0;
  std::size_t latent_dim = 16;
  std::size_t feature_dim = 64;
  std::size_t num_train_ids = 50;
  std::size_t num_test_ids = 20;
  std::size_t num_aux_ids = 0;
  std::size_t sketches_per_id = 2;
  std::size_t photos_per_id = 4;
  // Scale of the sketch-only perturbation of the photo matrix.
  double modality_gap = 0.5;
  // Scale of the sketch-only offset vector.
  double modality_offset = 0.5;
  double noise = 0.1;
  // Scale of the structured per-sample nuisance N w.
  double nuisance = 0.0;
  // 0 keeps the base transforms, 1 replaces them with task-specific ones.
  double task_shift = 0.0;
  std::uint64_t base_seed = 0;
  std::uint64_t seed = 1;

  std::size_t total_ids() const { return num_train_ids + num_aux_ids + num_test_ids; }

  void validate() const {
    if (latent_dim == 0 || feature_dim == 0) throw ConfigError("synth: dims must be >= 1");
    if (num_train_ids == 0) throw ConfigError("synth: num_train_ids must be >= 1");
    if (num_test_ids == 0) throw ConfigError("synth: num_test_ids must be >= 1");
    if (sketches_per_id == 0 || photos_per_id == 0)
      throw ConfigError("synth: samples per identity must be >= 1");
    if (!(noise >= 0.0) || !(nuisance >= 0.0)) throw ConfigError("synth: noise must be >= 0");
    if (!(modality_gap >= 0.0) || !(modality_offset >= 0.0))
      throw ConfigError("synth: modality gap and offset must be >= 0");
  }
};

namespace detail {
inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  return m;
}
}  // namespace detail

inline TaskDataset generate_synthetic_task(const SynthSpec& spec) {
  spec.validate();
  const auto f = static_cast<Eigen::Index>(spec.feature_dim);
  const auto d = static_cast<Eigen::Index>(spec.latent_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));

  Rng base(spec.base_seed);
  const Matrix a0 = detail::gaussian_matrix(f, d, scale, base);
  const Matrix n0 = detail::gaussian_matrix(f, d, scale, base);
  const Matrix g0 = detail::gaussian_matrix(f, d, scale, base);
  const RowVector u0 = detail::gaussian_matrix(1, f, 1.0, base).row(0);

  Rng rng(spec.seed);
  const Matrix g1 = detail::gaussian_matrix(f, d, scale, rng);
  const RowVector u1 = detail::gaussian_matrix(1, f, 1.0, rng).row(0);
  const RowVector c1 = detail::gaussian_matrix(1, f, 1.0, rng).row(0);

  const double theta = spec.task_shift * std::numbers::pi / 2.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const Matrix photo_map = cs * a0 + sn * n0;
  const Matrix nuisance_map = spec.nuisance * (cs * n0 - sn * a0);
  const Matrix sketch_map = photo_map + spec.modality_gap * (cs * g0 + sn * g1);
  const RowVector photo_bias = spec.task_shift * c1;
  const RowVector sketch_bias = photo_bias + spec.modality_offset * (cs * u0 + sn * u1);

  TaskDataset task;
  task.task_id = spec.task_id;
  auto emit = [&](int identity, const Eigen::VectorXd& z, Modality m, Split split, bool aux) {
    const Matrix& map = m == Modality::sketch ? sketch_map : photo_map;
    const RowVector& bias = m == Modality::sketch ? sketch_bias : photo_bias;
    RowVector x = (map * z).transpose() + bias;
    if (spec.nuisance > 0.0) {
      Eigen::VectorXd w(d);
      for (Eigen::Index k = 0; k < d; ++k) w(k) = rng.normal();
      x += (nuisance_map * w).transpose();
    }
    Sample s;
    s.identity = identity;
    s.modality = m;
    s.split = split;
    s.auxiliary = aux;
    s.features.resize(spec.feature_dim);
    for (Eigen::Index c = 0; c < f; ++c)
      s.features[static_cast<std::size_t>(c)] = x(c) + spec.noise * rng.normal();
    return s;
  };

  int next_id = spec.id_offset;
  auto make_identity = [&](bool test, bool aux) {
    const int identity = next_id++;
    Eigen::VectorXd z(d);
    for (Eigen::Index k = 0; k < d; ++k) z(k) = rng.normal();
    for (std::size_t k = 0; k < spec.sketches_per_id; ++k) {
      auto s = emit(identity, z, Modality::sketch, test ? Split::query : Split::train, aux);
      (test ? task.query : task.train).push_back(std::move(s));
    }
    for (std::size_t k = 0; k < spec.photos_per_id; ++k) {
      auto s = emit(identity, z, Modality::photo, test ? Split::gallery : Split::train, aux);
      (test ? task.gallery : task.train).push_back(std::move(s));
    }
  };
  for (std::size_t i = 0; i < spec.num_train_ids; ++i) make_identity(false, false);
  for (std::size_t i = 0; i < spec.num_aux_ids; ++i) make_identity(false, true);
  for (std::size_t i = 0; i < spec.num_test_ids; ++i) make_identity(true, false);
  return task;
}

// ---------------------------------------------------------------------------
// Task files: JSONL, one sample per row, floats with 17 significant digits.

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_task(std::ostream& out, const TaskDataset& task) {
  for (const auto* part : {&task.train, &task.query, &task.gallery}) {
    for (const auto& s : *part) {
      out << "{\"task\": " << task.task_id << ", \"id\": " << s.identity << ", \"modality\": \""
          << to_string(s.modality) << "\", \"split\": \"" << to_string(s.split) << "\"";
      if (s.auxiliary) out << ", \"aux\": true";
      out << ", \"features\": [";
      for (std::size_t i = 0; i < s.features.size(); ++i)
        out << (i ? ", " : "") << format_double(s.features[i]);
      out << "]}\n";
    }
  }
}

inline void save_task(const std::string& path, const TaskDataset& task) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_task(out, task);
}

inline TaskDataset read_task(std::istream& in) {
  TaskDataset task;
  bool have_task = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    }
    Sample s;
    int task_id = 0;
    try {
      if (!row.is_object()) throw ParseError(lineno, "row is not an object");
      for (const char* key : {"task", "id", "modality", "split", "features"})
        if (!row.contains(key)) throw ParseError(lineno, std::string("missing field '") + key + "'");
      task_id = row.at("task").get<int>();
      s.identity = row.at("id").get<int>();
      const auto m = row.at("modality").get<std::string>();
      if (m == "sketch") s.modality = Modality::sketch;
      else if (m == "photo") s.modality = Modality::photo;
      else throw ParseError(lineno, "unknown modality '" + m + "'");
      const auto sp = row.at("split").get<std::string>();
      if (sp == "train") s.split = Split::train;
      else if (sp == "query") s.split = Split::query;
      else if (sp == "gallery") s.split = Split::gallery;
      else throw ParseError(lineno, "unknown split '" + sp + "'");
      s.features = row.at("features").get<std::vector<double>>();
      s.auxiliary = row.value("aux", false);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("bad field type: ") + e.what());
    }
    if (!have_task) {
      task.task_id = task_id;
      have_task = true;
    } else if (task_id != task.task_id) {
      throw ValidationError("single-task", "line " + std::to_string(lineno) + " belongs to task " +
                                               std::to_string(task_id));
    }
    switch (s.split) {
      case Split::train: task.train.push_back(std::move(s)); break;
      case Split::query:
        if (s.modality != Modality::sketch)
          throw ValidationError("query-modality", "line " + std::to_string(lineno) + ": query rows must be sketches");
        task.query.push_back(std::move(s));
        break;
      case Split::gallery:
        if (s.modality != Modality::photo)
          throw ValidationError("gallery-modality", "line " + std::to_string(lineno) + ": gallery rows must be photos");
        task.gallery.push_back(std::move(s));
        break;
    }
  }
  task.validate();
  return task;
}

inline TaskDataset load_task(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open task file " + path);
  return read_task(in);
}

// ---------------------------------------------------------------------------
// PK sampling

// Draws batches of P identities x K samples. Within an identity the K slots
// are split between sketches and photos (sketches take the odd slot), taken
// without replacement while possible; identities with fewer than K samples
// are topped up with replacement.
class PkSampler {
 public:
  PkSampler(const std::vector<Sample>& samples, std::size_t p, std::size_t k, std::uint64_t seed)
      : p_(p), k_(k), rng_(seed) {
    if (p == 0 || k == 0) throw UsageError("pk: P and K must be >= 1");
    std::map<int, std::size_t> slot;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      auto [it, fresh] = slot.emplace(samples[i].identity, ids_.size());
      if (fresh) ids_.push_back({samples[i].identity, {}, {}});
      auto& g = ids_[it->second];
      (samples[i].modality == Modality::sketch ? g.sketches : g.photos).push_back(i);
    }
    if (ids_.size() < p_)
      throw UsageError("pk: " + std::to_string(ids_.size()) + " identities, fewer than P=" +
                       std::to_string(p_));
  }

  std::size_t num_identities() const { return ids_.size(); }

  // One batch of P distinct identities drawn uniformly.
  std::vector<std::size_t> sample_batch() {
    std::vector<std::size_t> order(ids_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_.shuffle(order);
    order.resize(p_);
    return assemble(order);
  }

  // ceil(N / P) batches covering every identity once; the final batch is
  // filled up with identities drawn from the rest.
  std::vector<std::vector<std::size_t>> epoch() {
    std::vector<std::size_t> order(ids_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += p_) {
      std::vector<std::size_t> chosen(order.begin() + static_cast<std::ptrdiff_t>(start),
                                      order.begin() + static_cast<std::ptrdiff_t>(std::min(start + p_, order.size())));
      if (chosen.size() < p_) {
        std::vector<std::size_t> rest(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(start));
        rng_.shuffle(rest);
        for (std::size_t i = 0; chosen.size() < p_; ++i) chosen.push_back(rest[i]);
      }
      batches.push_back(assemble(chosen));
    }
    return batches;
  }

 private:
  struct Group {
    int identity;
    std::vector<std::size_t> sketches, photos;
  };

  void take(std::vector<std::size_t> pool, std::size_t n, std::vector<std::size_t>& out) {
    rng_.shuffle(pool);
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  }

  std::vector<std::size_t> assemble(const std::vector<std::size_t>& groups) {
    std::vector<std::size_t> batch;
    batch.reserve(p_ * k_);
    for (std::size_t gi : groups) {
      const Group& g = ids_[gi];
      std::size_t qs = std::min(k_ - k_ / 2, g.sketches.size());
      const std::size_t qp = std::min(k_ - qs, g.photos.size());
      qs = std::min(k_ - qp, g.sketches.size());
      take(g.sketches, qs, batch);
      take(g.photos, qp, batch);
      const std::size_t missing = k_ - qs - qp;
      if (missing > 0) {
        std::vector<std::size_t> all = g.sketches;
        all.insert(all.end(), g.photos.begin(), g.photos.end());
        for (std::size_t i = 0; i < missing; ++i) batch.push_back(all[rng_.below(all.size())]);
      }
    }
    return batch;
  }

  std::size_t p_, k_;
  Rng rng_;
  std::vector<Group> ids_;
};

inline std::vector<std::size_t> pk_sample(const std::vector<Sample>& samples, std::size_t p,
                                          std::size_t k, std::uint64_t seed) {
  PkSampler sampler(samples, p, k, seed);
  return sampler.sample_batch();
}

}  // namespace sketchcl

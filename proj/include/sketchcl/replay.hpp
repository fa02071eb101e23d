#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "conformal.hpp"
#include "datasets.hpp"
#include "encoder.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace sketchcl {

struct ScoredSample {
  std::size_t index = 0;  // row in the task's train split
  double uncertainty = 0.0;
  bool empty_set = false;
};

// Uncertainty of every train sample under the task's own head.
inline std::vector<ScoredSample> score_task(const EncoderState& encoder, const TaskDataset& task,
                                            const CpConfig& cfg) {
  if (!encoder.find_head(task.task_id))
    throw UsageError("score_task: task " + std::to_string(task.task_id) + " has no head");
  std::vector<ScoredSample> out;
  if (task.train.empty()) return out;
  const ActivationStack stack = forward(encoder, to_matrix(task.train), task.task_id);
  CpConfig effective = cfg;
  if (cfg.calibrate) {
    const auto index = task.head_index();
    std::vector<std::vector<double>> probs;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < task.train.size(); ++i) {
      const auto row = stack.probabilities.row(static_cast<Eigen::Index>(i));
      probs.emplace_back(row.begin(), row.end());
      labels.push_back(static_cast<std::size_t>(index.at(task.train[i].identity)));
    }
    effective.tau = calibrate_tau(probs, labels, cfg);
  }
  out.reserve(task.train.size());
  std::vector<double> row(static_cast<std::size_t>(stack.probabilities.cols()));
  for (std::size_t i = 0; i < task.train.size(); ++i) {
    for (std::size_t c = 0; c < row.size(); ++c)
      row[c] = stack.probabilities(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    const PredictionSet set = prediction_set(row, effective);
    out.push_back({i, set.unc, set.empty});
  }
  return out;
}

struct BankEntry {
  Sample sample;
  double uncertainty = 0.0;
  int task_id = -1;

  bool operator==(const BankEntry&) const = default;
};

// Sketch bank and photo bank: at most one exemplar per identity each,
// always the lowest-uncertainty candidate offered so far (ties keep the
// incumbent).
class ReplayBanks {
 public:
  // Returns true when the candidate was stored.
  bool offer(const Sample& sample, double uncertainty, int task_id) {
    auto& bank = sample.modality == Modality::sketch ? sketch_ : photo_;
    auto it = bank.find(sample.identity);
    if (it != bank.end() && !(uncertainty < it->second.uncertainty)) return false;
    bank.insert_or_assign(sample.identity, BankEntry{sample, uncertainty, task_id});
    return true;
  }

  const std::map<int, BankEntry>& sketch_bank() const { return sketch_; }
  const std::map<int, BankEntry>& photo_bank() const { return photo_; }
  bool empty() const { return sketch_.empty() && photo_.empty(); }
  std::size_t size() const { return sketch_.size() + photo_.size(); }

  // Origin tasks present in either bank, ascending.
  std::vector<int> tasks() const {
    std::set<int> t;
    for (const auto* b : {&sketch_, &photo_})
      for (const auto& [id, e] : *b) t.insert(e.task_id);
    return {t.begin(), t.end()};
  }

  // Identities (ascending) with at least one entry, optionally restricted to one origin task.
  std::vector<int> identities(std::optional<int> task_id = std::nullopt) const {
    std::set<int> ids;
    for (const auto* b : {&sketch_, &photo_})
      for (const auto& [id, e] : *b)
        if (!task_id || e.task_id == *task_id) ids.insert(id);
    return {ids.begin(), ids.end()};
  }

  bool operator==(const ReplayBanks&) const = default;

 private:
  std::map<int, BankEntry> sketch_;
  std::map<int, BankEntry> photo_;
};

inline bool update_bank(ReplayBanks& banks, const Sample& sample, double uncertainty, int task_id) {
  return banks.offer(sample, uncertainty, task_id);
}

// Offers every admissible scored sample of a finished task.
inline void admit_task(ReplayBanks& banks, const TaskDataset& task,
                       const std::vector<ScoredSample>& scored) {
  for (const auto& s : scored)
    if (!s.empty_set) banks.offer(task.train[s.index], s.uncertainty, task.task_id);
}

struct ReplayBatch {
  std::vector<BankEntry> entries;
};

namespace detail {
// Stored sketch then stored photo of `id`, then uniform picks among them up to k.
inline void tile_identity(const ReplayBanks& banks, int id, std::size_t k, Rng& rng, ReplayBatch& batch) {
  std::vector<const BankEntry*> stored;
  if (auto it = banks.sketch_bank().find(id); it != banks.sketch_bank().end()) stored.push_back(&it->second);
  if (auto it = banks.photo_bank().find(id); it != banks.photo_bank().end()) stored.push_back(&it->second);
  for (std::size_t i = 0; i < k; ++i)
    batch.entries.push_back(i < stored.size() ? *stored[i] : *stored[rng.below(stored.size())]);
}
}  // namespace detail

// P identities drawn without replacement (all of them if fewer), then for
// each its stored sketch and photo tiled with replacement up to K samples.
inline ReplayBatch replay_batch(const ReplayBanks& banks, std::size_t p, std::size_t k,
                                std::uint64_t seed, std::optional<int> task_id = std::nullopt) {
  if (banks.empty()) throw UsageError("replay_batch: both banks are empty");
  if (p == 0 || k == 0) throw UsageError("replay_batch: P and K must be >= 1");
  auto ids = banks.identities(task_id);
  if (ids.empty()) throw UsageError("replay_batch: no entries for the requested task");
  Rng rng(seed);
  rng.shuffle(ids);
  if (ids.size() > p) ids.resize(p);
  ReplayBatch batch;
  for (int id : ids) detail::tile_identity(banks, id, k, rng, batch);
  return batch;
}

// One epoch of replay: every stored identity of the task once, in batches of P.
inline std::vector<ReplayBatch> replay_epoch(const ReplayBanks& banks, std::size_t p, std::size_t k,
                                             std::uint64_t seed, int task_id) {
  if (p == 0 || k == 0) throw UsageError("replay_epoch: P and K must be >= 1");
  auto ids = banks.identities(task_id);
  if (ids.empty()) throw UsageError("replay_epoch: no entries for task " + std::to_string(task_id));
  Rng rng(seed);
  rng.shuffle(ids);
  std::vector<ReplayBatch> out;
  for (std::size_t start = 0; start < ids.size(); start += p) {
    ReplayBatch batch;
    const std::size_t end = std::min(start + p, ids.size());
    for (std::size_t n = start; n < end; ++n) detail::tile_identity(banks, ids[n], k, rng, batch);
    out.push_back(std::move(batch));
  }
  return out;
}

// Banks file: JSONL, one entry per row, sketch bank first, identities ascending.
inline void write_banks(std::ostream& out, const ReplayBanks& banks) {
  for (const auto* bank : {&banks.sketch_bank(), &banks.photo_bank()}) {
    for (const auto& [id, e] : *bank) {
      out << "{\"task_id\": " << e.task_id << ", \"identity\": " << id << ", \"modality\": \""
          << to_string(e.sample.modality) << "\", \"uncertainty\": " << format_double(e.uncertainty)
          << ", \"features\": [";
      for (std::size_t i = 0; i < e.sample.features.size(); ++i)
        out << (i ? ", " : "") << format_double(e.sample.features[i]);
      out << "]}\n";
    }
  }
}

inline ReplayBanks read_banks(std::istream& in) {
  ReplayBanks banks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto row = nlohmann::json::parse(line);
      Sample s;
      s.identity = row.at("identity").get<int>();
      const auto m = row.at("modality").get<std::string>();
      if (m != "sketch" && m != "photo") throw ParseError(lineno, "unknown modality '" + m + "'");
      s.modality = m == "sketch" ? Modality::sketch : Modality::photo;
      s.features = row.at("features").get<std::vector<double>>();
      banks.offer(s, row.at("uncertainty").get<double>(), row.at("task_id").get<int>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return banks;
}

}  // namespace sketchcl

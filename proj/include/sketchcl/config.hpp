#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "datasets.hpp"
#include "error.hpp"
#include "trainer.hpp"

namespace sketchcl {

// Ablation arms:
//   full        replay on, configured alpha
//   no_mpm      replay off
//   alpha_zero  replay on, alpha = 0
//   no_aux      replay on, auxiliary identities dropped from train splits
inline const std::vector<std::string>& known_arms() {
  static const std::vector<std::string> arms{"full", "no_mpm", "alpha_zero", "no_aux"};
  return arms;
}

struct TaskSource {
  std::optional<SynthSpec> synthetic;
  std::optional<std::string> file;
};

struct ExperimentConfig {
  std::vector<TaskSource> tasks;
  EncoderConfig encoder;
  Schedule schedule;
  CpConfig cp;
  TrainOptions train;
  std::vector<std::string> arms;
  std::string output_dir = "runs";
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  bool reverse_order = false;

  void validate() const {
    if (tasks.empty()) throw ConfigError("config: at least one task required");
    if (arms.empty()) throw ConfigError("config: arms must be non-empty");
    for (const auto& a : arms)
      if (std::find(known_arms().begin(), known_arms().end(), a) == known_arms().end())
        throw ConfigError("config: unknown arm '" + a + "'");
    if (seeds == 0) throw ConfigError("config: seeds must be >= 1");
    schedule.validate();
    cp.validate();
    if (!train.jmmd.layers.empty()) train.jmmd.validate();
  }
};

namespace detail {
using json = nlohmann::json;

inline void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError("config: unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for key '") + key + "'");
  }
}

inline const json& require(const json& obj, const char* key) {
  if (!obj.contains(key)) throw ConfigError(std::string("missing config key: ") + key);
  return obj.at(key);
}
}  // namespace detail

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "synthetic",
                     {"task_id", "id_offset", "latent_dim", "feature_dim", "num_train_ids", "num_test_ids",
                      "num_aux_ids", "sketches_per_id", "photos_per_id", "modality_gap", "modality_offset",
                      "noise", "nuisance", "task_shift", "base_seed", "seed"});
  SynthSpec s;
  detail::read(j, "task_id", s.task_id);
  detail::read(j, "id_offset", s.id_offset);
  detail::read(j, "latent_dim", s.latent_dim);
  detail::read(j, "feature_dim", s.feature_dim);
  detail::read(j, "num_train_ids", s.num_train_ids);
  detail::read(j, "num_test_ids", s.num_test_ids);
  detail::read(j, "num_aux_ids", s.num_aux_ids);
  detail::read(j, "sketches_per_id", s.sketches_per_id);
  detail::read(j, "photos_per_id", s.photos_per_id);
  detail::read(j, "modality_gap", s.modality_gap);
  detail::read(j, "modality_offset", s.modality_offset);
  detail::read(j, "noise", s.noise);
  detail::read(j, "nuisance", s.nuisance);
  detail::read(j, "task_shift", s.task_shift);
  detail::read(j, "base_seed", s.base_seed);
  detail::read(j, "seed", s.seed);
  return s;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  detail::check_keys(j, "config",
                     {"tasks", "arms", "seed", "seeds", "reverse_order", "output_dir", "encoder", "schedule",
                      "conformal", "jmmd", "training"});
  ExperimentConfig c;
  for (const auto& t : detail::require(j, "tasks")) {
    TaskSource src;
    if (t.contains("synthetic")) src.synthetic = synth_spec_from_json(t.at("synthetic"));
    else if (t.contains("file")) src.file = t.at("file").get<std::string>();
    else throw ConfigError("missing config key: tasks[].synthetic or tasks[].file");
    c.tasks.push_back(std::move(src));
  }
  try {
    c.arms = detail::require(j, "arms").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: arms must be a list of names");
  }
  read(j, "seed", c.seed);
  read(j, "seeds", c.seeds);
  read(j, "reverse_order", c.reverse_order);
  read(j, "output_dir", c.output_dir);
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    detail::check_keys(e, "encoder", {"hidden_dims", "embedding_dim", "temperature"});
    read(e, "hidden_dims", c.encoder.hidden_dims);
    read(e, "embedding_dim", c.encoder.embedding_dim);
    read(e, "temperature", c.encoder.temperature);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    detail::check_keys(s, "schedule",
                       {"epochs_first_task", "epochs_later_tasks", "warmup_epochs", "base_lr", "warmup_start_lr",
                        "decay_epochs", "decay_factor", "beta1", "beta2", "epsilon"});
    read(s, "epochs_first_task", c.schedule.epochs_first_task);
    read(s, "epochs_later_tasks", c.schedule.epochs_later_tasks);
    read(s, "warmup_epochs", c.schedule.warmup_epochs);
    read(s, "base_lr", c.schedule.base_lr);
    read(s, "warmup_start_lr", c.schedule.warmup_start_lr);
    read(s, "decay_epochs", c.schedule.decay_epochs);
    read(s, "decay_factor", c.schedule.decay_factor);
    read(s, "beta1", c.schedule.adam.beta1);
    read(s, "beta2", c.schedule.adam.beta2);
    read(s, "epsilon", c.schedule.adam.epsilon);
  }
  if (j.contains("conformal")) {
    const auto& s = j.at("conformal");
    detail::check_keys(s, "conformal", {"lambda", "k_reg", "tau", "calibrate", "coverage"});
    read(s, "lambda", c.cp.lambda);
    read(s, "k_reg", c.cp.k_reg);
    read(s, "tau", c.cp.tau);
    read(s, "calibrate", c.cp.calibrate);
    read(s, "coverage", c.cp.coverage);
  }
  if (j.contains("jmmd")) {
    const auto& s = j.at("jmmd");
    detail::check_keys(s, "jmmd", {"alpha", "layers", "bandwidths"});
    read(s, "alpha", c.train.jmmd.alpha);
    read(s, "layers", c.train.jmmd.layers);
    if (s.contains("bandwidths")) {
      for (const auto& b : s.at("bandwidths")) {
        if (b.is_null() || (b.is_string() && b.get<std::string>() == "median"))
          c.train.jmmd.bandwidths.emplace_back(std::nullopt);
        else if (b.is_number())
          c.train.jmmd.bandwidths.emplace_back(b.get<double>());
        else
          throw ConfigError("config: jmmd.bandwidths entries must be numbers, null or \"median\"");
      }
    } else {
      c.train.jmmd.bandwidths.assign(c.train.jmmd.layers.size(), std::nullopt);
    }
  }
  if (j.contains("training")) {
    const auto& s = j.at("training");
    detail::check_keys(s, "training",
                       {"P", "K", "margin", "label_smoothing", "i2tce_temperature", "freeze_shared_on_replay",
                        "distance", "swap_query_gallery"});
    read(s, "P", c.train.p);
    read(s, "K", c.train.k);
    read(s, "margin", c.train.margin);
    read(s, "label_smoothing", c.train.label_smoothing);
    read(s, "i2tce_temperature", c.train.i2tce_temperature);
    read(s, "freeze_shared_on_replay", c.train.freeze_shared_on_replay);
    read(s, "swap_query_gallery", c.train.retrieval.swap_query_gallery);
    std::string distance = "euclidean";
    read(s, "distance", distance);
    if (distance == "euclidean") c.train.retrieval.distance = Distance::euclidean;
    else if (distance == "cosine") c.train.retrieval.distance = Distance::cosine;
    else throw ConfigError("config: training.distance must be euclidean or cosine");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

// Seed of replicate r.
inline std::uint64_t replicate_seed(const ExperimentConfig& c, std::size_t replicate) {
  return mix_seed(c.seed, replicate);
}

// Materializes the tasks of one replicate, in config order. Synthetic tasks
// get task_id = position, identity offsets laid end to end and seeds mixed
// with the replicate seed. File tasks are loaded as-is.
inline std::vector<TaskDataset> build_tasks(const ExperimentConfig& c, std::uint64_t rep_seed) {
  std::vector<TaskDataset> out;
  int offset = 0;
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    const auto& src = c.tasks[i];
    if (src.synthetic) {
      SynthSpec s = *src.synthetic;
      s.task_id = static_cast<int>(i);
      s.id_offset = offset;
      s.seed = mix_seed(s.seed, rep_seed);
      s.base_seed = mix_seed(s.base_seed, rep_seed);
      offset += static_cast<int>(s.total_ids());
      out.push_back(generate_synthetic_task(s));
    } else {
      out.push_back(load_task(*src.file));
      for (int id : out.back().train_identities()) offset = std::max(offset, id + 1);
      for (int id : out.back().test_identities()) offset = std::max(offset, id + 1);
    }
  }
  std::set<int> seen_tasks, seen_ids;
  for (const auto& t : out) {
    if (!seen_tasks.insert(t.task_id).second)
      throw ValidationError("task-id-unique", "task id " + std::to_string(t.task_id) + " used twice");
    std::set<int> mine;
    for (int id : t.train_identities()) mine.insert(id);
    for (int id : t.test_identities()) mine.insert(id);
    for (int id : mine)
      if (!seen_ids.insert(id).second)
        throw ValidationError("cross-task-disjoint", "identity " + std::to_string(id) + " appears in two tasks");
  }
  return out;
}

// Sequence config and task list of one arm for one replicate.
struct ArmRun {
  SequenceConfig sequence;
  std::vector<TaskDataset> tasks;  // training order
};

inline ArmRun prepare_arm(const ExperimentConfig& c, const std::string& arm, std::size_t replicate) {
  const std::uint64_t rs = replicate_seed(c, replicate);
  ArmRun run;
  run.tasks = build_tasks(c, rs);
  if (c.reverse_order) std::reverse(run.tasks.begin(), run.tasks.end());
  run.sequence.encoder = c.encoder;
  run.sequence.encoder.input_dim = run.tasks.front().feature_dim();
  run.sequence.schedule = c.schedule;
  run.sequence.cp = c.cp;
  run.sequence.train = c.train;
  run.sequence.seed = rs;
  if (run.sequence.train.jmmd.layers.empty()) {
    const double alpha = run.sequence.train.jmmd.alpha;
    run.sequence.train.jmmd = JmmdSpec::defaults(c.encoder.hidden_dims.size() + 1);
    run.sequence.train.jmmd.alpha = alpha;
  }
  if (arm == "no_mpm") run.sequence.use_replay = false;
  if (arm == "alpha_zero") run.sequence.train.jmmd.alpha = 0.0;
  if (arm == "no_aux")
    for (auto& t : run.tasks) t = t.without_auxiliary();
  return run;
}

}  // namespace sketchcl

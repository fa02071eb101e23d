#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "conformal.hpp"
#include "datasets.hpp"
#include "encoder.hpp"
#include "eval.hpp"
#include "losses.hpp"
#include "optim.hpp"
#include "replay.hpp"

namespace sketchcl {

struct Schedule {
  std::size_t epochs_first_task = 60;
  std::size_t epochs_later_tasks = 30;
  std::size_t warmup_epochs = 10;
  double base_lr = 5e-6;
  double warmup_start_lr = 5e-7;
  std::vector<std::size_t> decay_epochs{30, 50};
  double decay_factor = 0.1;
  AdamConfig adam;

  std::size_t epochs_for(std::size_t position) const {
    return position == 0 ? epochs_first_task : epochs_later_tasks;
  }

  void validate() const {
    if (warmup_epochs > std::max(epochs_first_task, epochs_later_tasks) &&
        std::max(epochs_first_task, epochs_later_tasks) > 0)
      throw ConfigError("schedule: warmup longer than training");
    if (!(base_lr > 0.0) || !(warmup_start_lr > 0.0))
      throw ConfigError("schedule: learning rates must be > 0");
    if (!(decay_factor > 0.0 && decay_factor < 1.0))
      throw ConfigError("schedule: decay factor must be in (0,1)");
  }
};

// Linear warmup from warmup_start_lr to base_lr, then x decay_factor at each
// decay epoch reached. Epochs are 0-based and counted per task.
inline double lr_at(std::size_t epoch, const Schedule& s) {
  if (epoch < s.warmup_epochs) {
    const double t = static_cast<double>(epoch) / static_cast<double>(s.warmup_epochs);
    return s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * t;
  }
  double lr = s.base_lr;
  for (auto d : s.decay_epochs)
    if (epoch >= d) lr *= s.decay_factor;
  return lr;
}

struct TrainOptions {
  std::size_t p = 16;
  std::size_t k = 4;
  double margin = 0.3;
  double label_smoothing = 0.1;
  double i2tce_temperature = 0.07;
  // Empty layer list means JmmdSpec::defaults for the encoder depth.
  JmmdSpec jmmd{};
  // Keep the shared layers fixed during replay epochs (only old heads move).
  bool freeze_shared_on_replay = false;
  RetrievalOptions retrieval;
};

struct EpochLog {
  int task_id = -1;
  std::size_t epoch = 0;
  bool replay = false;
  std::size_t batches = 0;
  LossBreakdown mean;
};

struct ExperimentState {
  EncoderState encoder;
  ReplayBanks banks;
  // task -> (identity -> head row)
  std::map<int, std::map<int, int>> head_rows;
  std::vector<MetricsRecord> history;
  std::vector<EpochLog> losses;
  std::vector<std::string> warnings;

  void warn(const std::string& msg) {
    if (std::find(warnings.begin(), warnings.end(), msg) == warnings.end()) warnings.push_back(msg);
  }
};

struct BatchInput {
  Matrix features;
  std::vector<int> identities;  // global labels (triplet)
  std::vector<int> head_rows;   // rows of the task head (id / i2tce)
  std::vector<bool> is_sketch;
  int task_id = -1;
};

// One optimizer step on L_SIM for a batch drawn from a single task.
inline LossBreakdown train_batch(ExperimentState& st, AdamOptimizer& opt, const BatchInput& in,
                                 const TrainOptions& opts, double lr, bool update_shared) {
  const ActivationStack stack = forward(st.encoder, in.features, in.task_id);
  ActivationGrads up = ActivationGrads::zeros_like(stack);
  const std::size_t depth = stack.depth();

  const LossGradient id = id_loss(stack.probabilities, in.head_rows, opts.label_smoothing);
  up[depth + 1] += id.grad;

  const Matrix& protos = st.encoder.head(in.task_id).prototypes;
  const I2tceGradient i2t = i2tce_loss(stack.embedding(), protos, in.head_rows, opts.i2tce_temperature);
  up[depth - 1] += i2t.embeddings;

  double tri = 0.0;
  {
    std::set<int> distinct(in.identities.begin(), in.identities.end());
    bool has_pair = distinct.size() < in.identities.size();
    if (distinct.size() >= 2 && has_pair) {
      const LossGradient t = triplet_loss(stack.embedding(), in.identities, opts.margin);
      tri = t.value;
      up[depth - 1] += t.grad;
    } else {
      st.warn("batch without positive pairs or negatives: triplet term skipped");
    }
  }

  double jm = 0.0;
  const JmmdSpec spec = opts.jmmd.layers.empty() ? JmmdSpec::defaults(depth) : opts.jmmd;
  const bool both = std::find(in.is_sketch.begin(), in.is_sketch.end(), true) != in.is_sketch.end() &&
                    std::find(in.is_sketch.begin(), in.is_sketch.end(), false) != in.is_sketch.end();
  if (both) {
    jm = jmmd_on_stack(stack, in.is_sketch, spec, spec.alpha, up).value;
  } else {
    st.warn("batch lacks one modality: JMMD term skipped");
  }

  ParameterGradients g = backward(st.encoder, stack, up);
  g.prototypes += i2t.prototypes;
  opt.step(st.encoder, g, lr, update_shared);
  return sim_loss(id.value, tri, i2t.value, jm, spec.alpha);
}

inline BatchInput make_batch(const TaskDataset& task, const std::map<int, int>& rows,
                             const std::vector<std::size_t>& indices) {
  BatchInput b;
  b.task_id = task.task_id;
  b.features = to_matrix(task.train, indices);
  for (auto i : indices) {
    const Sample& s = task.train[i];
    b.identities.push_back(s.identity);
    b.head_rows.push_back(rows.at(s.identity));
    b.is_sketch.push_back(s.modality == Modality::sketch);
  }
  return b;
}

inline BatchInput make_batch(const ReplayBatch& rb, int task_id, const std::map<int, int>& rows) {
  BatchInput b;
  b.task_id = task_id;
  const std::size_t dim = rb.entries.empty() ? 0 : rb.entries.front().sample.features.size();
  b.features.resize(static_cast<Eigen::Index>(rb.entries.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < rb.entries.size(); ++r) {
    const Sample& s = rb.entries[r].sample;
    for (std::size_t c = 0; c < dim; ++c)
      b.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = s.features[c];
    b.identities.push_back(s.identity);
    b.head_rows.push_back(rows.at(s.identity));
    b.is_sketch.push_back(s.modality == Modality::sketch);
  }
  return b;
}

namespace detail {
inline void accumulate(LossBreakdown& acc, const LossBreakdown& b) {
  acc.l_id += b.l_id;
  acc.l_tri += b.l_tri;
  acc.l_i2tce += b.l_i2tce;
  acc.l_reid += b.l_reid;
  acc.l_jmmd += b.l_jmmd;
  acc.l_sim += b.l_sim;
}
inline void scale(LossBreakdown& acc, double f) {
  acc.l_id *= f;
  acc.l_tri *= f;
  acc.l_i2tce *= f;
  acc.l_reid *= f;
  acc.l_jmmd *= f;
  acc.l_sim *= f;
}
}  // namespace detail

// Trains one task for `epochs` epochs. With replay, 1-based even epochs
// replay the banked exemplars of every earlier task (each through its own
// head) instead of visiting new-task data. Afterwards the task's train split
// is scored and offered to the banks. `on_epoch` runs after every epoch with
// the number of completed epochs.
inline void train_task(ExperimentState& st, const TaskDataset& task, const Schedule& schedule,
                       std::size_t epochs, const CpConfig& cp, const TrainOptions& opts,
                       bool replay, std::uint64_t seed,
                       const std::function<void(std::size_t)>& on_epoch = {}) {
  if (!st.encoder.find_head(task.task_id))
    throw UsageError("train_task: task " + std::to_string(task.task_id) + " has no head");
  std::vector<int> old_tasks;
  if (replay) {
    for (int t : st.banks.tasks())
      if (t != task.task_id) old_tasks.push_back(t);
    if (old_tasks.empty()) throw UsageError("train_task: replay requested but banks are empty");
  }
  st.head_rows[task.task_id] = task.head_index();
  const auto& rows = st.head_rows.at(task.task_id);
  st.encoder.active_task = task.task_id;

  AdamOptimizer opt(schedule.adam);
  PkSampler sampler(task.train, std::min(opts.p, task.train_identities().size()), opts.k,
                    mix_seed(seed, 1));
  Rng replay_rng(mix_seed(seed, 2));

  for (std::size_t e = 0; e < epochs; ++e) {
    const double lr = lr_at(e, schedule);
    EpochLog log;
    log.task_id = task.task_id;
    log.epoch = e;
    log.replay = replay && e % 2 == 1;
    if (log.replay) {
      const bool shared = !opts.freeze_shared_on_replay;
      for (int old : old_tasks) {
        for (const auto& rb : replay_epoch(st.banks, opts.p, opts.k, replay_rng.next(), old)) {
          detail::accumulate(log.mean, train_batch(st, opt, make_batch(rb, old, st.head_rows.at(old)),
                                                   opts, lr, shared));
          ++log.batches;
        }
      }
    } else {
      for (const auto& idx : sampler.epoch()) {
        detail::accumulate(log.mean, train_batch(st, opt, make_batch(task, rows, idx), opts, lr, true));
        ++log.batches;
      }
    }
    if (log.batches) detail::scale(log.mean, 1.0 / static_cast<double>(log.batches));
    st.losses.push_back(log);
    if (on_epoch) on_epoch(e + 1);
  }
  admit_task(st.banks, task, score_task(st.encoder, task, cp));
}

struct SequenceConfig {
  EncoderConfig encoder;
  Schedule schedule;
  CpConfig cp;
  TrainOptions train;
  bool use_replay = true;
  std::uint64_t seed = 0;
};

struct ExperimentReport {
  std::vector<int> task_order;
  std::size_t num_steps = 0;
  std::vector<MetricsRecord> records;   // per step, per task in training order
  std::vector<MetricsRecord> averages;  // per step
  std::vector<EpochLog> losses;
  std::vector<std::string> warnings;
  ReplayBanks banks;
  EncoderState encoder;
};

// Trains the tasks in the given order and evaluates every task at step 1
// (before training) and after the first half and the end of each task's
// epochs: 2K + 1 steps for K tasks. With no epochs at all only step 1 is
// produced.
// `on_record` sees every record as soon as it is evaluated.
inline ExperimentReport run_sequence(
    const std::vector<TaskDataset>& tasks, const SequenceConfig& cfg,
    const std::function<void(const MetricsRecord&)>& on_record = {}) {
  if (tasks.empty()) throw ConfigError("run: at least one task required");
  cfg.schedule.validate();
  cfg.cp.validate();
  std::set<int> ids;
  for (const auto& t : tasks) {
    if (!ids.insert(t.task_id).second)
      throw ConfigError("run: duplicate task id " + std::to_string(t.task_id));
    if (t.feature_dim() != cfg.encoder.input_dim)
      throw ConfigError("run: task " + std::to_string(t.task_id) + " feature dim " +
                        std::to_string(t.feature_dim()) + " != encoder input_dim " +
                        std::to_string(cfg.encoder.input_dim));
  }

  ExperimentState st;
  EncoderConfig ec = cfg.encoder;
  ec.seed = mix_seed(cfg.seed, 1);
  st.encoder = init_encoder(ec);
  if (tasks.size() == 1) st.warn("single-task sequence: no continual-learning comparison possible");

  int step = 0;
  auto evaluate_all = [&] {
    ++step;
    std::vector<MetricsRecord> at_step;
    for (const auto& t : tasks) {
      MetricsRecord r = evaluate(st.encoder, t, cfg.train.retrieval);
      r.step = step;
      st.history.push_back(r);
      at_step.push_back(r);
      if (on_record) on_record(r);
    }
    MetricsRecord avg = aggregate(at_step);
    avg.step = step;
    return avg;
  };

  ExperimentReport report;
  report.averages.push_back(evaluate_all());
  std::size_t total_epochs = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) total_epochs += cfg.schedule.epochs_for(i);

  if (total_epochs > 0) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const TaskDataset& task = tasks[i];
      const std::size_t epochs = cfg.schedule.epochs_for(i);
      const std::size_t half = epochs / 2;
      register_task_head(st.encoder, task.task_id, task.train_identities().size(),
                         mix_seed(cfg.seed, 2000 + static_cast<std::uint64_t>(task.task_id)));
      if (half == 0) report.averages.push_back(evaluate_all());
      const bool replay = cfg.use_replay && i > 0 && !st.banks.empty();
      train_task(st, task, cfg.schedule, epochs, cfg.cp, cfg.train, replay,
                 mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(task.task_id)),
                 [&](std::size_t done) {
                   if (done == half) report.averages.push_back(evaluate_all());
                 });
      report.averages.push_back(evaluate_all());
    }
  }

  for (const auto& t : tasks) report.task_order.push_back(t.task_id);
  report.num_steps = static_cast<std::size_t>(step);
  report.records = std::move(st.history);
  report.losses = std::move(st.losses);
  report.warnings = std::move(st.warnings);
  report.banks = std::move(st.banks);
  report.encoder = std::move(st.encoder);
  return report;
}

}  // namespace sketchcl

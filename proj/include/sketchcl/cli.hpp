#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "config.hpp"
#include "conformal.hpp"
#include "datasets.hpp"
#include "error.hpp"
#include "replay.hpp"
#include "report.hpp"
#include "serialize.hpp"
#include "trainer.hpp"

// Command-line front end.
//
//   sketchcl gen-data SPEC --out FILE [--seed N]
//   sketchcl run --config FILE [--seed N] [--seeds K] [--out DIR] [--reverse-order] [--arm NAME]...
//   sketchcl score FILE [--lambda L] [--k-reg K] [--tau T] [--out FILE]
//   sketchcl report DIR [DIR2] [--out FILE]
//
// Environment: SKETCHCL_SEED, SKETCHCL_SEEDS and SKETCHCL_OUT override the
// config file; command-line flags override both.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
namespace sketchcl {

inline constexpr const char* kEnvPrefix = "SKETCHCL_";

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e) ||
      dynamic_cast<const ParseError*>(&e) || dynamic_cast<const ValidationError*>(&e))
    return 2;
  return 1;
}

namespace detail {
namespace fs = std::filesystem;

inline std::optional<std::string> env(const char* name) {
  const char* v = std::getenv((std::string(kEnvPrefix) + name).c_str());
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

inline std::uint64_t parse_u64(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string(what) + ": not an unsigned integer: '" + s + "'");
  }
}

inline void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string losses_csv(const std::vector<EpochLog>& logs) {
  std::string out = "task_id,epoch,replay,batches,l_id,l_tri,l_i2tce,l_reid,l_jmmd,l_sim\n";
  for (const auto& l : logs)
    out += std::to_string(l.task_id) + "," + std::to_string(l.epoch) + "," + (l.replay ? "1" : "0") + "," +
           std::to_string(l.batches) + "," + format_metric(l.mean.l_id) + "," + format_metric(l.mean.l_tri) +
           "," + format_metric(l.mean.l_i2tce) + "," + format_metric(l.mean.l_reid) + "," +
           format_metric(l.mean.l_jmmd) + "," + format_metric(l.mean.l_sim) + "\n";
  return out;
}
}  // namespace detail

struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> seeds;
  std::optional<std::string> out;
  bool reverse_order = false;
  std::vector<std::string> arms;
};

// Applies env then flag overrides on top of the config file.
inline void apply_overrides(ExperimentConfig& c, const RunOverrides& o) {
  if (auto v = detail::env("SEED")) c.seed = detail::parse_u64(*v, "SKETCHCL_SEED");
  if (auto v = detail::env("SEEDS")) c.seeds = detail::parse_u64(*v, "SKETCHCL_SEEDS");
  if (auto v = detail::env("OUT")) c.output_dir = *v;
  if (o.seed) c.seed = *o.seed;
  if (o.seeds) c.seeds = *o.seeds;
  if (o.out) c.output_dir = *o.out;
  if (o.reverse_order) c.reverse_order = true;
  if (!o.arms.empty()) c.arms = o.arms;
  c.validate();
}

// Runs every arm x replicate of `c`. Layout:
//   <out>/<arm>/seed_<r>/{run.json, metrics.csv, losses.csv, banks.jsonl, report.json}
//   <out>/<arm>/summary.json
// metrics.csv is appended as records arrive, so an interrupted run leaves a
// readable prefix; report.json is written last.
inline void run_experiment(const ExperimentConfig& c, std::ostream& log) {
  namespace fs = std::filesystem;
  const fs::path root(c.output_dir);
  for (const auto& arm : c.arms) {
    nlohmann::ordered_json summary;
    summary["arm"] = arm;
    summary["master_seed"] = c.seed;
    summary["reverse_order"] = c.reverse_order;
    auto& reps = summary["replicates"] = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < c.seeds; ++r) {
      const ArmRun run = prepare_arm(c, arm, r);
      const fs::path dir = root / arm / ("seed_" + std::to_string(r));
      fs::create_directories(dir);
      std::vector<int> order;
      for (const auto& t : run.tasks) order.push_back(t.task_id);
      std::size_t total_epochs = 0;
      for (std::size_t i = 0; i < run.tasks.size(); ++i) total_epochs += c.schedule.epochs_for(i);
      const std::size_t expected = total_epochs == 0 ? 1 : 2 * run.tasks.size() + 1;
      nlohmann::ordered_json manifest;
      manifest["arm"] = arm;
      manifest["seed"] = run.sequence.seed;
      manifest["task_order"] = order;
      manifest["steps_expected"] = expected;
      detail::write_file(dir / "run.json", manifest.dump(2) + "\n");
      std::error_code ec;
      fs::remove(dir / "report.json", ec);

      std::ofstream metrics(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
      if (!metrics) throw Error("cannot open " + (dir / "metrics.csv").string());
      metrics << kMetricsHeader << '\n' << std::flush;
      const ExperimentReport rep = run_sequence(run.tasks, run.sequence, [&](const MetricsRecord& m) {
        metrics << metrics_csv_row(m) << '\n' << std::flush;
      });
      metrics.close();

      detail::write_file(dir / "losses.csv", detail::losses_csv(rep.losses));
      std::ostringstream banks;
      write_banks(banks, rep.banks);
      detail::write_file(dir / "banks.jsonl", banks.str());
      detail::write_file(dir / "report.json", report_to_json(rep, arm, run.sequence.seed).dump(2) + "\n");

      nlohmann::ordered_json entry;
      entry["replicate"] = r;
      entry["seed"] = run.sequence.seed;
      entry["final"] = record_to_json(rep.averages.back());
      reps.push_back(entry);
      log << arm << " seed_" << r << ": final average mAP " << format_metric(rep.averages.back().map) << '\n';
    }
    detail::write_file(root / arm / "summary.json", summary.dump(2) + "\n");
  }
}

// ---- score -----------------------------------------------------------------

inline std::vector<std::vector<double>> read_probability_rows(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto& arr = j.is_object() ? j.at("probs") : j;
      rows.push_back(arr.get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("expected a probability array: ") + e.what());
    }
  }
  return rows;
}

inline std::string score_row(std::span<const double> probs, const CpConfig& cp) {
  const PredictionSet set = prediction_set(probs, cp);
  nlohmann::ordered_json j;
  j["set_size"] = set.size;
  j["conf"] = set.conf;
  j["unc"] = set.unc;
  j["members"] = set.members;
  return j.dump();
}

// ---- report ----------------------------------------------------------------

struct RunSummary {
  std::string name;  // path of the seed directory relative to the run root
  std::vector<MetricsRecord> records;
  std::vector<MetricsRecord> averages;
  std::size_t steps_expected = 0;
  bool complete = false;
};

inline std::vector<RunSummary> collect_runs(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw UsageError("not a directory: " + root.string());
  std::vector<fs::path> files;
  if (fs::exists(root / "metrics.csv")) files.push_back(root / "metrics.csv");
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "metrics.csv" && e.path().parent_path() != root)
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no metrics.csv under " + root.string());

  std::vector<RunSummary> out;
  for (const auto& f : files) {
    RunSummary s;
    const fs::path dir = f.parent_path();
    s.name = dir == root ? "." : fs::relative(dir, root).generic_string();
    std::ifstream in(f);
    s.records = parse_metrics_csv(in);
    if (fs::exists(dir / "run.json")) {
      const auto j = nlohmann::json::parse(detail::read_file(dir / "run.json"));
      s.steps_expected = j.value("steps_expected", std::size_t{0});
    }
    std::map<int, std::vector<MetricsRecord>> by_step;
    for (const auto& r : s.records) by_step[r.step].push_back(r);
    std::size_t tasks_per_step = 0;
    for (const auto& [step, recs] : by_step) tasks_per_step = std::max(tasks_per_step, recs.size());
    for (const auto& [step, recs] : by_step) {
      if (recs.size() < tasks_per_step) continue;  // step cut off mid-evaluation
      s.averages.push_back(aggregate(recs));
    }
    s.complete = fs::exists(dir / "report.json") &&
                 (s.steps_expected == 0 || s.averages.size() == s.steps_expected);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string summary_csv(const std::vector<RunSummary>& runs) {
  std::string out = "run,step,task_id,mAP,r1\n";
  for (const auto& s : runs) {
    for (const auto& a : s.averages) {
      for (const auto& r : s.records)
        if (r.step == a.step)
          out += s.name + "," + std::to_string(r.step) + "," + std::to_string(r.task_id) + "," +
                 format_metric(r.map) + "," + format_metric(r.r1) + "\n";
      out += s.name + "," + std::to_string(a.step) + ",avg," + format_metric(a.map) + "," +
             format_metric(a.r1) + "\n";
    }
  }
  return out;
}

inline void print_run_table(std::ostream& os, const RunSummary& s) {
  std::vector<int> tasks;
  for (const auto& r : s.records)
    if (std::find(tasks.begin(), tasks.end(), r.task_id) == tasks.end()) tasks.push_back(r.task_id);
  os << "== " << s.name << " ==\n";
  char buf[64];
  os << "step";
  for (int t : tasks) {
    std::snprintf(buf, sizeof buf, " | t%-3d mAP   r@1  ", t);
    os << buf;
  }
  os << " |  avg mAP   r@1\n";
  for (const auto& a : s.averages) {
    std::snprintf(buf, sizeof buf, "%4d", a.step);
    os << buf;
    for (int t : tasks) {
      for (const auto& r : s.records)
        if (r.step == a.step && r.task_id == t) {
          std::snprintf(buf, sizeof buf, " | %7.2f %6.2f ", r.map, r.r1);
          os << buf;
        }
    }
    std::snprintf(buf, sizeof buf, " | %7.2f %6.2f\n", a.map, a.r1);
    os << buf;
  }
}

inline std::string diff_csv(const std::vector<RunSummary>& a, const std::vector<RunSummary>& b,
                            std::ostream& table) {
  std::string out = "run,step,task_id,mAP_a,mAP_b,delta_mAP,r1_a,r1_b,delta_r1\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-24s %4s %5s %9s %9s %9s\n", "run", "step", "task", "mAP a", "mAP b",
                "delta");
  table << buf;
  auto emit = [&](const std::string& name, int step, const std::string& task, const MetricsRecord& x,
                  const MetricsRecord& y) {
    out += name + "," + std::to_string(step) + "," + task + "," + format_metric(x.map) + "," +
           format_metric(y.map) + "," + format_metric(y.map - x.map) + "," + format_metric(x.r1) + "," +
           format_metric(y.r1) + "," + format_metric(y.r1 - x.r1) + "\n";
    std::snprintf(buf, sizeof buf, "%-24s %4d %5s %9.2f %9.2f %+9.2f\n", name.c_str(), step, task.c_str(), x.map,
                  y.map, y.map - x.map);
    table << buf;
  };
  for (const auto& ra : a) {
    const auto rb = std::find_if(b.begin(), b.end(), [&](const RunSummary& s) { return s.name == ra.name; });
    if (rb == b.end()) continue;
    for (const auto& x : ra.records)
      for (const auto& y : rb->records)
        if (x.step == y.step && x.task_id == y.task_id) emit(ra.name, x.step, std::to_string(x.task_id), x, y);
    for (const auto& x : ra.averages)
      for (const auto& y : rb->averages)
        if (x.step == y.step) emit(ra.name, x.step, "avg", x, y);
  }
  return out;
}

// ---- entry point -----------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Continual sketch-photo re-identification experiments"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic task as JSONL");
  std::string gen_spec, gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("spec", gen_spec, "Synthetic task spec (JSON)")->required();
  gen->add_option("--out", gen_out, "Output JSONL path")->required();
  gen->add_option("--seed", gen_seed, "Override the spec's seed");

  // run
  auto* run = app.add_subcommand("run", "Run every arm x seed of an experiment config");
  std::string config_path;
  RunOverrides ov;
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", ov.seed, "Master seed");
  run->add_option("--seeds", ov.seeds, "Number of replicates");
  run->add_option("--out", ov.out, "Output directory");
  run->add_flag("--reverse-order", ov.reverse_order, "Train tasks in reverse config order");
  run->add_option("--arm", ov.arms, "Arm to run (repeatable): full, no_mpm, alpha_zero, no_aux");

  // score
  auto* score = app.add_subcommand("score", "Conformal prediction sets for probability vectors");
  std::string score_in, score_out;
  CpConfig cp;
  score->add_option("input", score_in, "JSONL of probability vectors ('-' for stdin)")->required();
  score->add_option("--lambda", cp.lambda, "Rank penalty weight");
  score->add_option("--k-reg", cp.k_reg, "Rank penalty offset");
  score->add_option("--tau", cp.tau, "Score threshold");
  score->add_option("--out", score_out, "Output JSONL (default stdout)");

  // report
  auto* report = app.add_subcommand("report", "Summarize a run directory, or diff two");
  std::vector<std::string> report_dirs;
  std::string report_out;
  report->add_option("dirs", report_dirs, "Run directory, optionally a second to diff against")
      ->required()
      ->expected(1, 2);
  report->add_option("--out", report_out, "Summary CSV path (default <dir>/summary.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*gen) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(detail::read_file(gen_spec));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("spec is not valid JSON: ") + e.what());
      }
      SynthSpec spec = synth_spec_from_json(j);
      if (gen_seed) spec.seed = *gen_seed;
      const TaskDataset task = generate_synthetic_task(spec);
      save_task(gen_out, task);
      out << "wrote " << task.train.size() + task.query.size() + task.gallery.size() << " samples to " << gen_out
          << '\n';
    } else if (*run) {
      ExperimentConfig c = load_config(config_path);
      apply_overrides(c, ov);
      run_experiment(c, out);
    } else if (*score) {
      cp.validate();
      std::vector<std::vector<double>> rows;
      if (score_in == "-") {
        rows = read_probability_rows(std::cin);
      } else {
        std::ifstream in(score_in);
        if (!in) throw UsageError("cannot open " + score_in);
        rows = read_probability_rows(in);
      }
      std::ofstream file;
      if (!score_out.empty()) {
        file.open(score_out, std::ios::binary);
        if (!file) throw Error("cannot open " + score_out + " for writing");
      }
      std::ostream& dst = score_out.empty() ? out : file;
      for (const auto& r : rows) dst << score_row(r, cp) << '\n';
    } else if (*report) {
      const auto a = collect_runs(report_dirs[0]);
      std::string csv;
      if (report_dirs.size() == 1) {
        for (const auto& s : a) {
          print_run_table(out, s);
          if (!s.complete)
            err << "warning: " << s.name << " is partial (" << s.averages.size() << " of "
                << (s.steps_expected ? std::to_string(s.steps_expected) : std::string("?"))
                << " steps completed)\n";
        }
        csv = summary_csv(a);
      } else {
        const auto b = collect_runs(report_dirs[1]);
        csv = diff_csv(a, b, out);
      }
      const std::string path =
          report_out.empty() ? (std::filesystem::path(report_dirs[0]) / "summary.csv").string() : report_out;
      detail::write_file(path, csv);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace sketchcl

// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <sketchcl/cli.hpp>
#include <sketchcl/config.hpp>
#include <sketchcl/conformal.hpp>
#include <sketchcl/eval.hpp>
#include <sketchcl/losses.hpp>
#include <sketchcl/replay.hpp>
#include <sketchcl/report.hpp>
#include <sketchcl/trainer.hpp>

#include "../oracles.hpp"
#include "../support.hpp"

namespace {

using namespace sketchcl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------

Outcome jmmd_oracle() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const auto ns = static_cast<Eigen::Index>(1 + rng.below(10));
    const auto np = static_cast<Eigen::Index>(1 + rng.below(10));
    LayerSet s, p;
    std::vector<double> bw;
    for (int l = 0; l < 3; ++l) {
      const auto d = static_cast<Eigen::Index>(1 + rng.below(6));
      s.push_back(oracle::random_matrix(rng, ns, d));
      p.push_back(oracle::random_matrix(rng, np, d) + Matrix::Constant(np, d, rng.uniform(0.0, 1.0)));
      bw.push_back(rng.uniform(0.5, 4.0));
    }
    worst = std::max(worst, std::abs(jmmd(s, p, bw) - oracle::jmmd(s, p, bw)));
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-10 && t < 1.0, "max |diff| " + fmt("%.2e", worst) + ", " + fmt("%.3f s", t)};
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  support::GradReport worst;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = support::gradient_errors(seed);
    worst.jmmd = std::max(worst.jmmd, r.jmmd);
    worst.triplet = std::max(worst.triplet, r.triplet);
    worst.id = std::max(worst.id, r.id);
    worst.i2tce = std::max(worst.i2tce, r.i2tce);
    worst.encoder = std::max(worst.encoder, r.encoder);
  }
  const double t = seconds_since(t0);
  const double all = std::max({worst.jmmd, worst.triplet, worst.id, worst.i2tce, worst.encoder});
  return {all < 1e-4 && t < 30.0,
          "worst rel err jmmd " + fmt("%.1e", worst.jmmd) + " triplet " + fmt("%.1e", worst.triplet) + " id " +
              fmt("%.1e", worst.id) + " i2tce " + fmt("%.1e", worst.i2tce) + " encoder " +
              fmt("%.1e", worst.encoder) + ", " + fmt("%.2f s", t)};
}

Outcome conformal_exactness() {
  bool ok = true;
  std::string why;
  CpConfig cfg;
  const std::vector<double> uniform(100, 0.01);
  const PredictionSet u = prediction_set(uniform, cfg);
  if (u.size != 25) ok = false, why += " uniform size " + std::to_string(u.size);
  for (std::size_t i = 0; i < u.members.size(); ++i)
    if (u.members[i] != i) ok = false, why += " uniform member order";
  const std::vector<double> hand{0.6, 0.3, 0.1};
  const PredictionSet h = prediction_set(hand, cfg);
  if (h.size != 3 || std::abs(h.conf - 0.5) > 1e-12 || std::abs(h.unc - 3.5) > 1e-12)
    ok = false, why += " hand case";

  Rng rng(303);
  std::size_t draws = 0, partition_bad = 0, monotone_bad = 0;
  for (std::size_t c = 1; c <= 50; ++c) {
    for (int d = 0; d < 200; ++d, ++draws) {
      const auto pi = oracle::random_simplex(rng, c);
      CpConfig k;
      k.tau = rng.uniform(0.0, 6.0);
      k.lambda = d % 4 == 0 ? 0.0 : rng.uniform(0.0, 0.5);
      k.k_reg = static_cast<int>(1 + rng.below(12));
      const PredictionSet set = prediction_set(pi, k);
      const auto ref = oracle::conformal(pi, k.lambda, k.k_reg, k.tau);
      std::vector<bool> in(c, false);
      for (auto m : set.members) in[m] = true;
      for (std::size_t y = 0; y < c; ++y) {
        const double s = cp_score(pi, y, k);
        if (in[y] != (s <= k.tau) || in[y] != ref.member[y] || std::abs(s - ref.score[y]) > 1e-12) {
          ++partition_bad;
          break;
        }
      }
      if (set.size != ref.size || std::abs(set.unc - ref.unc) > 1e-12) ++partition_bad;
      CpConfig k2 = k;
      k2.tau = k.tau + rng.uniform(0.0, 2.0);
      const PredictionSet wider = prediction_set(pi, k2);
      std::vector<bool> in2(c, false);
      for (auto m : wider.members) in2[m] = true;
      for (std::size_t y = 0; y < c; ++y)
        if (in[y] && !in2[y]) {
          ++monotone_bad;
          break;
        }
    }
  }
  if (partition_bad) ok = false;
  if (monotone_bad) ok = false;
  return {ok, "|C| uniform " + std::to_string(u.size) + ", hand conf " + fmt("%.3f", h.conf) + " unc " +
                  fmt("%.3f", h.unc) + ", " + std::to_string(draws) + " draws, partition violations " +
                  std::to_string(partition_bad) + ", monotonicity violations " + std::to_string(monotone_bad) +
                  why};
}

Outcome bank_min_retention() {
  Rng rng(404);
  std::size_t violations = 0, capacity = 0;
  const int streams = 100;
  for (int s = 0; s < streams; ++s) {
    ReplayBanks banks;
    oracle::ShadowBank shadow;
    for (std::size_t i = 0; i < 1000; ++i) {
      Sample smp;
      smp.identity = static_cast<int>(rng.below(50));
      smp.modality = rng.below(2) ? Modality::sketch : Modality::photo;
      smp.features = {static_cast<double>(i)};
      // Coarse grid half the time so ties are common.
      const double unc = rng.below(2) ? static_cast<double>(1 + rng.below(8)) * 0.5 : rng.uniform(1.0, 26.0);
      update_bank(banks, smp, unc, 0);
      shadow.offer(smp.identity, smp.modality, unc, i);
      if (banks.sketch_bank().size() != shadow.slots(Modality::sketch) ||
          banks.photo_bank().size() != shadow.slots(Modality::photo))
        ++capacity;
    }
    for (const auto& [key, cands] : shadow.all()) {
      const auto& bank = key.second == Modality::sketch ? banks.sketch_bank() : banks.photo_bank();
      const auto it = bank.find(key.first);
      const auto best = shadow.best(key.first, key.second);
      if (it == bank.end() || it->second.uncertainty != best.first ||
          it->second.sample.features[0] != static_cast<double>(best.second))
        ++violations;
    }
  }
  return {violations == 0 && capacity == 0, std::to_string(streams) + " streams x 1000 offers, min violations " +
                                                 std::to_string(violations) + ", capacity violations " +
                                                 std::to_string(capacity)};
}

Outcome retrieval_oracle() {
  Rng rng(505);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const auto nq = static_cast<Eigen::Index>(1 + rng.below(30));
    const auto ng = static_cast<Eigen::Index>(1 + rng.below(100));
    const auto ids = static_cast<int>(1 + rng.below(20));
    const auto dim = static_cast<Eigen::Index>(1 + rng.below(8));
    Matrix q = oracle::random_matrix(rng, nq, dim), g = oracle::random_matrix(rng, ng, dim);
    if (inst % 3 == 0) {  // integer grid: many exact distance ties
      q = q.array().round();
      g = g.array().round();
    }
    std::vector<int> qid, gid;
    for (Eigen::Index i = 0; i < nq; ++i) qid.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(ids))));
    for (Eigen::Index i = 0; i < ng; ++i) gid.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(ids))));
    const MetricsRecord r = evaluate_embeddings(q, qid, g, gid);
    const auto o = oracle::retrieval(q, qid, g, gid);
    worst = std::max({worst, std::abs(r.map - o.map), std::abs(r.r1 - o.r1), std::abs(r.r5 - o.r5),
                      std::abs(r.r10 - o.r10), std::abs(double(r.num_queries) - double(o.queries))});
  }
  const bool hand = average_precision({false, true}) == 0.5 && average_precision({true, false, true}) == 5.0 / 6.0;
  return {worst <= 1e-12 && hand, "max |diff| " + fmt("%.1e", worst) + ", hand cases " + (hand ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------------------
// Training-based criteria share one set of runs per config.

struct ArmRuns {
  std::vector<ExperimentReport> reports;  // one per replicate
  double seconds = 0.0;
};

ArmRuns run_arm(const ExperimentConfig& base, const std::string& arm, bool reverse) {
  ExperimentConfig c = base;
  c.reverse_order = reverse;
  ArmRuns out;
  const auto t0 = Clock::now();
  for (std::size_t r = 0; r < c.seeds; ++r) {
    const ArmRun run = prepare_arm(c, arm, r);
    out.reports.push_back(run_sequence(run.tasks, run.sequence));
  }
  out.seconds = seconds_since(t0);
  return out;
}

const MetricsRecord& record_at(const ExperimentReport& rep, int step, int task) {
  for (const auto& r : rep.records)
    if (r.step == step && r.task_id == task) return r;
  throw std::runtime_error("missing record");
}

std::vector<double> first_task_map(const ArmRuns& runs, int step) {
  std::vector<double> v;
  for (const auto& rep : runs.reports) v.push_back(record_at(rep, step, rep.task_order.front()).map);
  return v;
}

std::vector<double> final_average_map(const ArmRuns& runs) {
  std::vector<double> v;
  for (const auto& rep : runs.reports) v.push_back(rep.averages.back().map);
  return v;
}

struct StandardRuns {
  ArmRuns full_fwd, none_fwd, full_rev, none_rev;
};

Outcome anti_forgetting(const StandardRuns& s) {
  const double with = median(first_task_map(s.full_fwd, 5));
  const double without = median(first_task_map(s.none_fwd, 5));
  const double worst_t = std::max(s.full_fwd.seconds, s.none_fwd.seconds);
  return {with - without >= 5.0 && s.full_fwd.seconds + s.none_fwd.seconds < 600.0,
          "median task-1 mAP after task 2: MPM " + fmt("%.2f", with) + " vs none " + fmt("%.2f", without) +
              " (gain " + fmt("%+.2f", with - without) + "), slowest arm " + fmt("%.1f s", worst_t)};
}

Outcome order_robustness(const StandardRuns& s) {
  const double fwd = median(final_average_map(s.full_fwd));
  const double rev = median(final_average_map(s.full_rev));
  auto collapse = [](const ArmRuns& r) {
    const double before = median(first_task_map(r, 3));
    const double after = median(first_task_map(r, 5));
    return 1.0 - after / before;
  };
  const double cf = collapse(s.none_fwd), cr = collapse(s.none_rev);
  return {std::abs(fwd - rev) < 10.0 && cf > 0.5 && cr > 0.5,
          "MPM average mAP fwd " + fmt("%.2f", fwd) + " rev " + fmt("%.2f", rev) + " (|diff| " +
              fmt("%.2f", std::abs(fwd - rev)) + "), no-MPM first-task drop fwd " + fmt("%.1f%%", 100 * cf) +
              " rev " + fmt("%.1f%%", 100 * cr)};
}

Outcome jmmd_benefit() {
  const ExperimentConfig c = load_config(support::source_path("configs/high_gap.json"));
  const ArmRuns with = run_arm(c, "full", false);
  const ArmRuns without = run_arm(c, "alpha_zero", false);
  const double a5 = median(final_average_map(with));
  const double a0 = median(final_average_map(without));
  const double t = with.seconds + without.seconds;
  return {a5 > a0 && t < 600.0,
          "median mAP alpha=5 " + fmt("%.2f", a5) + " vs alpha=0 " + fmt("%.2f", a0) + ", " + fmt("%.1f s", t)};
}

Outcome trajectory_logging(const StandardRuns& s, const ExperimentConfig& standard) {
  std::size_t bad_runs = 0, runs = 0;
  for (const ArmRuns* arm : {&s.full_fwd, &s.none_fwd, &s.full_rev, &s.none_rev})
    for (const auto& rep : arm->reports) {
      ++runs;
      std::istringstream csv(metrics_csv(rep.records));
      std::string header;
      std::getline(csv, header);
      csv.seekg(0);
      const auto parsed = parse_metrics_csv(csv);
      std::map<int, std::set<int>> steps;
      for (const auto& r : parsed) steps[r.task_id].insert(r.step);
      bool ok = header == "step,task_id,mAP,r1,r5,r10" && rep.num_steps == 5 && parsed.size() == 10 &&
                steps.size() == 2;
      for (const auto& [task, st] : steps) ok = ok && st == std::set<int>{1, 2, 3, 4, 5};
      bad_runs += !ok;
    }

  // Single-task run of the first task with otherwise identical settings.
  ExperimentConfig single = standard;
  single.tasks.resize(1);
  std::size_t mismatches = 0;
  for (std::size_t r = 0; r < standard.seeds; ++r) {
    const ArmRun run = prepare_arm(single, "full", r);
    const ExperimentReport rep = run_sequence(run.tasks, run.sequence);
    const auto& two = s.full_fwd.reports[r];
    if (!(record_at(rep, 3, 0) == record_at(two, 3, two.task_order.front()))) ++mismatches;
  }
  return {bad_runs == 0 && mismatches == 0,
          std::to_string(runs) + " runs with 5 steps x 2 tasks, schema violations " + std::to_string(bad_runs) +
              ", step-3 mismatches vs single-task run " + std::to_string(mismatches) + "/" +
              std::to_string(standard.seeds)};
}

Outcome reproducibility() {
  const fs::path root = fs::current_path() / "acceptance_repro";
  fs::remove_all(root);
  auto invoke = [&](const std::string& out) {
    const std::string cfg = support::source_path("configs/standard.json");
    const std::vector<std::string> args{"sketchcl", "run",   "--config", cfg,    "--out", out,
                                        "--seeds",  "2",     "--arm",    "full", "--arm", "no_mpm"};
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    return run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  };
  const int rc_a = invoke((root / "a").string());
  const int rc_b = invoke((root / "b").string());
  std::size_t files = 0, differ = 0;
  for (const auto& arm : {"full", "no_mpm"})
    for (const auto& seed : {"seed_0", "seed_1"})
      for (const auto& name : {"report.json", "metrics.csv"}) {
        ++files;
        const auto read = [](const fs::path& p) {
          std::ifstream in(p, std::ios::binary);
          return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        };
        const std::string a = read(root / "a" / arm / seed / name);
        const std::string b = read(root / "b" / arm / seed / name);
        if (a.empty() || a != b) ++differ;
      }
  fs::remove_all(root);
  return {rc_a == 0 && rc_b == 0 && differ == 0,
          "exit codes " + std::to_string(rc_a) + "/" + std::to_string(rc_b) + ", " + std::to_string(files) +
              " files compared, " + std::to_string(differ) + " differ"};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s [%2d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "jmmd oracle equivalence", jmmd_oracle);
  report(2, "gradient suite", gradient_suite);
  report(3, "conformal exactness", conformal_exactness);
  report(4, "bank min-retention", bank_min_retention);
  report(5, "retrieval metric oracle", retrieval_oracle);

  ExperimentConfig standard;
  StandardRuns runs;
  bool have_runs = false;
  std::string run_error;
  try {
    standard = load_config(support::source_path("configs/standard.json"));
    runs.full_fwd = run_arm(standard, "full", false);
    runs.none_fwd = run_arm(standard, "no_mpm", false);
    runs.full_rev = run_arm(standard, "full", true);
    runs.none_rev = run_arm(standard, "no_mpm", true);
    have_runs = true;
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  auto needs_runs = [&](const std::function<Outcome()>& fn) {
    return [&, fn] { return have_runs ? fn() : Outcome{false, "standard runs failed: " + run_error}; };
  };

  report(6, "anti-forgetting direction", needs_runs([&] { return anti_forgetting(runs); }));
  report(7, "jmmd benefit direction", jmmd_benefit);
  report(8, "order robustness", needs_runs([&] { return order_robustness(runs); }));
  report(9, "trajectory logging", needs_runs([&] { return trajectory_logging(runs, standard); }));
  report(10, "reproducibility", reproducibility);

  std::printf("%d of 10 criteria failed\n", failures);
  return failures ? 1 : 0;
}

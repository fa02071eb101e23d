#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "eval.hpp"
#include "trainer.hpp"

namespace sketchcl {

inline constexpr const char* kMetricsHeader = "step,task_id,mAP,r1,r5,r10";

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string metrics_csv_row(const MetricsRecord& r) {
  return std::to_string(r.step) + "," + std::to_string(r.task_id) + "," + format_metric(r.map) + "," +
         format_metric(r.r1) + "," + format_metric(r.r5) + "," + format_metric(r.r10);
}

inline std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : records) out += metrics_csv_row(r) + "\n";
  return out;
}

inline std::vector<MetricsRecord> parse_metrics_csv(std::istream& in) {
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kMetricsHeader) throw ParseError(lineno, "unexpected metrics header '" + line + "'");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 6) throw ParseError(lineno, "expected 6 columns");
    try {
      MetricsRecord r;
      r.step = std::stoi(cells[0]);
      r.task_id = std::stoi(cells[1]);
      r.map = std::stod(cells[2]);
      r.r1 = std::stod(cells[3]);
      r.r5 = std::stod(cells[4]);
      r.r10 = std::stod(cells[5]);
      out.push_back(r);
    } catch (const std::exception&) {
      throw ParseError(lineno, "non-numeric metrics cell");
    }
  }
  return out;
}

inline nlohmann::ordered_json record_to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  if (r.task_id >= 0) j["task_id"] = r.task_id;
  j["mAP"] = r.map;
  j["r1"] = r.r1;
  j["r5"] = r.r5;
  j["r10"] = r.r10;
  j["num_queries"] = r.num_queries;
  j["excluded_queries"] = r.excluded_queries;
  return j;
}

inline nlohmann::ordered_json report_to_json(const ExperimentReport& rep, const std::string& arm,
                                             std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["arm"] = arm;
  j["seed"] = seed;
  j["task_order"] = rep.task_order;
  j["num_steps"] = rep.num_steps;
  j["steps_expected"] = rep.num_steps;
  auto& recs = j["records"] = nlohmann::ordered_json::array();
  for (const auto& r : rep.records) recs.push_back(record_to_json(r));
  auto& avgs = j["averages"] = nlohmann::ordered_json::array();
  for (const auto& r : rep.averages) avgs.push_back(record_to_json(r));
  auto& losses = j["losses"] = nlohmann::ordered_json::array();
  for (const auto& l : rep.losses)
    losses.push_back({{"task_id", l.task_id},
                      {"epoch", l.epoch},
                      {"replay", l.replay},
                      {"batches", l.batches},
                      {"l_id", l.mean.l_id},
                      {"l_tri", l.mean.l_tri},
                      {"l_i2tce", l.mean.l_i2tce},
                      {"l_reid", l.mean.l_reid},
                      {"l_jmmd", l.mean.l_jmmd},
                      {"l_sim", l.mean.l_sim}});
  j["bank_sizes"] = {{"sketch", rep.banks.sketch_bank().size()}, {"photo", rep.banks.photo_bank().size()}};
  j["warnings"] = rep.warnings;
  return j;
}

}  // namespace sketchcl

#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "encoder.hpp"
#include "error.hpp"

namespace sketchcl {

// Encoder state as one JSON document. Matrices are stored row-major as flat
// arrays of doubles; nlohmann/json prints the shortest round-trip decimal
// form, so save -> load is bit-exact.
namespace detail {
inline nlohmann::ordered_json matrix_to_json(const Matrix& m) {
  nlohmann::ordered_json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> data(m.data(), m.data() + m.size());
  j["data"] = std::move(data);
  return j;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw ShapeError("encoder file: matrix data size does not match its shape");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}
}  // namespace detail

inline std::string encoder_to_json(const EncoderState& s) {
  nlohmann::ordered_json j;
  j["format"] = "sketchcl-encoder";
  j["version"] = 1;
  j["config"] = {{"input_dim", s.config.input_dim},
                 {"hidden_dims", s.config.hidden_dims},
                 {"embedding_dim", s.config.embedding_dim},
                 {"seed", s.config.seed},
                 {"temperature", s.config.temperature}};
  j["active_task"] = s.active_task;
  auto& layers = j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : s.layers) {
    Matrix bias = l.bias;
    layers.push_back({{"weight", detail::matrix_to_json(l.weight)}, {"bias", detail::matrix_to_json(bias)}});
  }
  auto& heads = j["heads"] = nlohmann::ordered_json::array();
  for (const auto& h : s.heads)
    heads.push_back({{"task_id", h.task_id}, {"prototypes", detail::matrix_to_json(h.prototypes)}});
  return j.dump();
}

inline EncoderState encoder_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("encoder file: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "sketchcl-encoder")
      throw ValidationError("format", "not an encoder file");
    EncoderState s;
    const auto& c = j.at("config");
    s.config.input_dim = c.at("input_dim").get<std::size_t>();
    s.config.hidden_dims = c.at("hidden_dims").get<std::vector<std::size_t>>();
    s.config.embedding_dim = c.at("embedding_dim").get<std::size_t>();
    s.config.seed = c.at("seed").get<std::uint64_t>();
    s.config.temperature = c.at("temperature").get<double>();
    s.config.validate();
    s.active_task = j.at("active_task").get<int>();
    std::size_t fan_in = s.config.input_dim;
    for (const auto& l : j.at("layers")) {
      DenseLayer layer;
      layer.weight = detail::matrix_from_json(l.at("weight"));
      layer.bias = detail::matrix_from_json(l.at("bias")).row(0);
      if (static_cast<std::size_t>(layer.weight.rows()) != fan_in || layer.weight.cols() != layer.bias.size())
        throw ValidationError("layer-shape", "layer shapes inconsistent with config");
      fan_in = static_cast<std::size_t>(layer.weight.cols());
      s.layers.push_back(std::move(layer));
    }
    if (s.layers.size() != s.config.hidden_dims.size() + 1 || fan_in != s.config.embedding_dim)
      throw ValidationError("layer-shape", "layer count or embedding dim inconsistent with config");
    for (const auto& h : j.at("heads")) {
      TaskHead head;
      head.task_id = h.at("task_id").get<int>();
      head.prototypes = detail::matrix_from_json(h.at("prototypes"));
      if (static_cast<std::size_t>(head.prototypes.cols()) != s.config.embedding_dim)
        throw ValidationError("head-shape", "prototype width differs from embedding dim");
      if (s.find_head(head.task_id)) throw ValidationError("head-unique", "duplicate task head");
      s.heads.push_back(std::move(head));
    }
    s.touch();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("encoder file: ") + e.what());
  }
}

inline void save_encoder(const std::string& path, const EncoderState& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << encoder_to_json(s) << '\n';
}

inline EncoderState load_encoder(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open encoder file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return encoder_from_json(text);
}

}  // namespace sketchcl

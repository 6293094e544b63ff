#pragma once

// Checkpoint file: a JSON document
//   {"format": "protoformer-checkpoint", "version": 1,
//    "model_config": {...},
//    "tensors": [{"name": ..., "shape": [rows, cols], "data": [row-major values]}]}
// Values are written with round-trip precision.

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "protoformer/model.hpp"
#include "protoformer/unified_landmarks.hpp"

namespace protoformer {

inline constexpr const char* kCheckpointFormat = "protoformer-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline json checkpoint_to_json(const ProtoFormer& model, const json& metadata = json::object()) {
  json tensors = json::array();
  for (const auto& p : model.parameters()) {
    const Mat& v = p.var.value();
    std::vector<double> data(v.data(), v.data() + v.size());
    tensors.push_back({{"name", p.name}, {"shape", {v.rows(), v.cols()}}, {"data", data}});
  }
  json cfg = model.config();
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"model_config", cfg},
          {"metadata", metadata},
          {"tensors", tensors}};
}

inline void save_checkpoint(const ProtoFormer& model, const std::filesystem::path& path, const json& metadata = json::object()) {
  write_text_file(path, checkpoint_to_json(model, metadata).dump() + "\n");
}

/// Copies tensors into an existing model; names and shapes must match exactly.
inline void load_parameters(const json& j, ProtoFormer& model) {
  std::map<std::string, const json*> by_name;
  for (const auto& t : j.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
  auto params = model.parameters();
  if (by_name.size() != params.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor '" + p.name + "'");
    const auto& t = *it->second;
    const auto shape = t.at("shape").get<std::vector<long>>();
    if (shape.size() != 2 || shape[0] != p.var.rows() || shape[1] != p.var.cols()) {
      throw ConfigError("checkpoint tensor '" + p.name + "' has the wrong shape");
    }
    const auto data = t.at("data").get<std::vector<double>>();
    if (static_cast<long>(data.size()) != shape[0] * shape[1]) throw ConfigError("checkpoint tensor '" + p.name + "' is truncated");
    Mat& dst = p.var.mutable_value();
    std::copy(data.begin(), data.end(), dst.data());
  }
}

inline ProtoFormer model_from_checkpoint_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw ConfigError("not a protoformer checkpoint");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    ProtoFormer model(model_config_from_json(j.at("model_config")));
    load_parameters(j, model);
    return model;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline ProtoFormer load_checkpoint(const std::filesystem::path& path) { return model_from_checkpoint_json(read_json_file(path)); }

}  // namespace protoformer

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynplan/backbone.hpp"
#include "dynplan/data.hpp"
#include "dynplan/planning.hpp"

namespace dynplan {

// Backbone plus the optional gate and exit-head sets trained on top of it.
struct Model {
  Backbone backbone;
  std::vector<PlanningGate> gates;
  std::vector<Classifier> exit_heads;

  const ModelConfig& config() const { return backbone.config; }
  std::size_t num_layers() const { return backbone.layers.size(); }
};

Model make_model(const ModelConfig& config, std::uint64_t seed);

struct ParamRef {
  std::string path;
  Tensor* value;
};

// Stable order: backbone, gates, exit heads.
std::vector<ParamRef> param_refs(Model& model);
void for_each_param(const Model& model, const ConstParamVisitor& visit);

bool is_backbone_param(const std::string& path);
bool is_gate_param(const std::string& path);
bool is_exit_head_param(const std::string& path);

struct CheckpointMeta {
  Vocab vocab;
  std::vector<std::string> label_names;
  TaskKind task_kind = TaskKind::classification;
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

// Binary layout: 8-byte magic, u64 header length, JSON header (config, vocab,
// tensor index), then every tensor as raw little-endian f64. Bit-exact.
void save_model(const std::string& path, const Model& model, const CheckpointMeta& meta);
Model load_model(const std::string& path, CheckpointMeta* meta = nullptr);

}  // namespace dynplan

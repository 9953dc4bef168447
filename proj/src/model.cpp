#include "dynplan/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace dynplan {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian doubles");

namespace {

constexpr char kMagic[8] = {'D', 'Y', 'N', 'P', 'L', 'A', 'N', '1'};

template <class M, class Visit>
void visit_model(M& model, Visit&& visit) {
  for_each_param(model.backbone, visit);
  for_each_param(model.gates, visit);
  for (std::size_t i = 0; i < model.exit_heads.size(); ++i)
    for_each_param(model.exit_heads[i], "exit_heads." + std::to_string(i) + ".", visit);
}

}  // namespace

Model make_model(const ModelConfig& config, std::uint64_t seed) {
  Model m;
  m.backbone = init_backbone(config, seed);
  m.gates = init_gates(config, seed ^ 0x9e3779b97f4a7c15ULL);
  return m;
}

std::vector<ParamRef> param_refs(Model& model) {
  std::vector<ParamRef> refs;
  visit_model(model, ParamVisitor([&](const std::string& path, Tensor& t) { refs.push_back({path, &t}); }));
  return refs;
}

void for_each_param(const Model& model, const ConstParamVisitor& visit) { visit_model(model, visit); }

bool is_gate_param(const std::string& path) { return path.rfind("gates.", 0) == 0; }
bool is_exit_head_param(const std::string& path) { return path.rfind("exit_heads.", 0) == 0; }
bool is_backbone_param(const std::string& path) { return !is_gate_param(path) && !is_exit_head_param(path); }

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"num_layers", c.num_layers},
              {"d_model", c.d_model},       {"num_heads", c.num_heads},     {"d_ff", c.d_ff},
              {"num_classes", c.num_classes}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.validate();
  return c;
}

void save_model(const std::string& path, const Model& model, const CheckpointMeta& meta) {
  json header;
  header["format"] = 1;
  header["config"] = config_to_json(model.config());
  header["num_gates"] = model.gates.size();
  header["num_exit_heads"] = model.exit_heads.size();
  header["vocab"] = meta.vocab.tokens();
  header["labels"] = meta.label_names;
  header["task_kind"] = to_string(meta.task_kind);
  header["extra"] = meta.extra;

  json index = json::array();
  std::vector<const Tensor*> order;
  std::size_t offset = 0;
  for_each_param(model, [&](const std::string& p, const Tensor& t) {
    index.push_back({{"path", p}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
    order.push_back(&t);
  });
  header["tensors"] = index;

  const std::string text = header.dump();
  const std::uint64_t length = text.size();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Tensor* t : order)
    out.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for checkpoint '" + path + "'");
}

Model load_model(const std::string& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint '" + path + "': bad magic");
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("checkpoint '" + path + "': truncated header");
  const json header = json::parse(text);

  std::vector<double> payload;
  {
    const auto begin = in.tellg();
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg() - begin);
    in.seekg(begin);
    if (bytes % sizeof(double) != 0) throw std::runtime_error("checkpoint '" + path + "': ragged payload");
    payload.resize(bytes / sizeof(double));
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes));
  }

  Model model;
  model.backbone.config = config_from_json(header.at("config"));
  model.backbone.layers.resize(model.backbone.config.num_layers);
  model.gates.resize(header.at("num_gates").get<std::size_t>());
  model.exit_heads.resize(header.at("num_exit_heads").get<std::size_t>());

  std::map<std::string, Tensor> stored;
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (offset + n > payload.size()) throw std::runtime_error("checkpoint '" + path + "': tensor past end of payload");
    std::vector<double> values(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
    stored.emplace(entry.at("path").get<std::string>(), Tensor(shape, std::move(values)));
  }
  for (auto& ref : param_refs(model)) {
    auto it = stored.find(ref.path);
    if (it == stored.end()) throw std::runtime_error("checkpoint '" + path + "': missing tensor " + ref.path);
    *ref.value = it->second;
    stored.erase(it);
  }
  if (!stored.empty())
    throw std::runtime_error("checkpoint '" + path + "': unexpected tensor " + stored.begin()->first);

  if (meta != nullptr) {
    meta->vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    meta->label_names = header.at("labels").get<std::vector<std::string>>();
    meta->task_kind = parse_task_kind(header.at("task_kind").get<std::string>());
    meta->extra = header.value("extra", json::object());
  }
  return model;
}

}  // namespace dynplan

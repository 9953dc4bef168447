#include "dynplan/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dynplan {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument("setting " + key + ": '" + v + "' is not a number");
  return out;
}

}  // namespace

Settings Settings::parse(const std::string& text, const std::string& source) {
  Settings s;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.find('=') == std::string::npos)
      throw std::invalid_argument(source + ":" + std::to_string(number) + ": expected key=value");
    s.set(line);
  }
  return s;
}

Settings Settings::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

void Settings::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Settings::set(const std::string& key, const std::string& value) {
  if (key.empty()) throw std::invalid_argument("empty setting key");
  values_[key] = value;
}

std::string Settings::get(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Settings::get(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : to_double(key, it->second);
}

std::size_t Settings::get(const std::string& key, std::size_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const double v = to_double(key, it->second);
  if (v < 0.0 || v != static_cast<double>(static_cast<std::size_t>(v)))
    throw std::invalid_argument("setting " + key + ": '" + it->second + "' is not a non-negative integer");
  return static_cast<std::size_t>(v);
}

std::vector<double> Settings::get_list(const std::string& key, std::vector<double> fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : parse_double_list(it->second);
}

void Settings::check_known(const std::vector<std::string>& known) const {
  for (const auto& [key, value] : values_)
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("unknown setting '" + key + "'");
}

const std::vector<std::string>& known_setting_keys() {
  static const std::vector<std::string> keys = {
      "data.max_seq_len", "model.layers",      "model.d_model",      "model.heads",
      "model.d_ff",       "model.seed",        "optim.lr",           "optim.weight_decay",
      "optim.batch_size", "optim.epochs",      "optim.seed",         "gate.lr",
      "gate.weight_decay", "gate.batch_size",  "gate.epochs",        "gate.seed",
      "exit_train.lr",    "exit_train.weight_decay", "exit_train.batch_size", "exit_train.epochs",
      "exit_train.seed",  "rl.beta",           "rl.lambda1",         "rl.lambda2",
      "rl.target_rate",   "rl.layer_cost",     "rl.lr",              "rl.weight_decay",
      "rl.batch_size",    "rl.epochs",         "rl.seed",            "rl.baseline_decay",
      "rl.samples_per_example", "rl.rate_semantics", "exit.threshold", "exit.exit_on",
      "bench.warmup",     "bench.repeats"};
  return keys;
}

ModelConfig model_config_from(const Settings& s, ModelConfig c) {
  c.max_seq_len = s.get("data.max_seq_len", c.max_seq_len);
  c.num_layers = s.get("model.layers", c.num_layers);
  c.d_model = s.get("model.d_model", c.d_model);
  c.num_heads = s.get("model.heads", c.num_heads);
  c.d_ff = s.get("model.d_ff", c.d_ff);
  return c;
}

OptimConfig optim_config_from(const Settings& s, const std::string& prefix, OptimConfig c) {
  c.learning_rate = s.get(prefix + ".lr", c.learning_rate);
  c.weight_decay = s.get(prefix + ".weight_decay", c.weight_decay);
  c.batch_size = s.get(prefix + ".batch_size", c.batch_size);
  c.epochs = s.get(prefix + ".epochs", c.epochs);
  c.seed = s.get(prefix + ".seed", static_cast<std::size_t>(c.seed));
  return c;
}

RLConfig rl_config_from(const Settings& s, RLConfig c) {
  c.beta = s.get("rl.beta", c.beta);
  c.lambda1 = s.get("rl.lambda1", c.lambda1);
  c.lambda2 = s.get("rl.lambda2", c.lambda2);
  c.target_rate = s.get("rl.target_rate", c.target_rate);
  c.layer_cost = s.get_list("rl.layer_cost", c.layer_cost);
  c.learning_rate = s.get("rl.lr", c.learning_rate);
  c.weight_decay = s.get("rl.weight_decay", c.weight_decay);
  c.batch_size = s.get("rl.batch_size", c.batch_size);
  c.epochs = s.get("rl.epochs", c.epochs);
  c.seed = s.get("rl.seed", static_cast<std::size_t>(c.seed));
  c.baseline_decay = s.get("rl.baseline_decay", c.baseline_decay);
  c.samples_per_example = s.get("rl.samples_per_example", c.samples_per_example);
  const std::string semantics = s.get("rl.rate_semantics", std::string("execute"));
  if (semantics != "execute" && semantics != "skip")
    throw std::invalid_argument("setting rl.rate_semantics: expected execute or skip");
  c.rate_semantics = semantics == "skip" ? RateSemantics::skip : RateSemantics::execute;
  return c;
}

ExitConfig exit_config_from(const Settings& s) {
  ExitConfig c;
  c.entropy_threshold = s.get("exit.threshold", c.entropy_threshold);
  c.exit_on = parse_exit_on(s.get("exit.exit_on", std::string("below")));
  c.validate();
  return c;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_double("list", item));
  }
  return out;
}

}  // namespace dynplan

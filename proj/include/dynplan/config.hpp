#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "dynplan/backbone.hpp"
#include "dynplan/bench.hpp"
#include "dynplan/early_exit.hpp"
#include "dynplan/training.hpp"

namespace dynplan {

// Plain key=value settings; '#' starts a comment, blank lines are skipped.
class Settings {
 public:
  static Settings parse(const std::string& text, const std::string& source = "<string>");
  static Settings load(const std::string& path);

  // "key=value"; a later assignment wins.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const;
  double get(const std::string& key, double fallback) const;
  std::size_t get(const std::string& key, std::size_t fallback) const;
  std::vector<double> get_list(const std::string& key, std::vector<double> fallback) const;

  // Rejects keys outside `known`, naming the first one.
  void check_known(const std::vector<std::string>& known) const;

 private:
  std::map<std::string, std::string> values_;
};

const std::vector<std::string>& known_setting_keys();

ModelConfig model_config_from(const Settings& s, ModelConfig base = {});
OptimConfig optim_config_from(const Settings& s, const std::string& prefix, OptimConfig base = {});
RLConfig rl_config_from(const Settings& s, RLConfig base = {});
ExitConfig exit_config_from(const Settings& s);

std::vector<double> parse_double_list(const std::string& text);

}  // namespace dynplan

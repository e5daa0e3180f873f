#include "mprompt/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace mprompt {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      // suite generation
      "suite_seed", "n_tasks", "n_heldout", "n_skills", "instances_per_task",
      "aux_marker_labels", "with_extractive", "aux_instances",
      // model shape
      "n_layers", "hidden", "heads", "max_seq", "prompt_len", "shallow", "bank_size",
      "intrinsic_dim", "tau",
      // pre-training
      "steps", "batch", "router_lr", "prompt_lr", "encoder_lr", "fast_slow", "log_every",
      // fine-tuning
      "paradigm", "task", "gd_stage1_epochs", "gd_stage2_epochs", "gd_stage1_lr",
      "gd_stage2_lr", "bbt_budget", "bbt_stage1", "bo_box", "cma_sigma_shallow",
      "cma_sigma_embed", "cma_sigma_mid", "split_seed",
      // analysis
      "n_groups", "use_logits",
      // artifact paths
      "suite_dir", "model_in", "model_out", "adapter_in", "adapter_out", "metrics_out",
      // run
      "seed",
  };
  return keys;
}

}  // namespace

void RunConfig::put(const std::string& key, const std::string& value) {
  if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
  if (kv_.count(key)) throw ConfigError("config key '" + key + "' set twice");
  kv_[key] = value;
}

RunConfig RunConfig::parse_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    cfg.put(key, value);
  }
  return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return parse_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(e.what()).substr(std::string("config error: ").size()) +
                      " (in " + path + ")");
  }
}

std::string RunConfig::get_str(const std::string& key, const std::string& dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : it->second;
}

int RunConfig::get_int(const std::string& key, int dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    size_t pos = 0;
    int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' wants an integer, got '" + it->second + "'");
  }
}

int64_t RunConfig::get_i64(const std::string& key, int64_t dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    size_t pos = 0;
    int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' wants an integer, got '" + it->second + "'");
  }
}

double RunConfig::get_double(const std::string& key, double dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' wants a number, got '" + it->second + "'");
  }
}

bool RunConfig::get_bool(const std::string& key, bool dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("key '" + key + "' wants a boolean, got '" + it->second + "'");
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  auto it = kv_.find(key);
  std::vector<int> out;
  if (it == kv_.end()) return out;
  std::stringstream ss(it->second);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' wants comma-separated integers");
    }
  }
  return out;
}

}  // namespace mprompt

#pragma once

#include <map>
#include <string>
#include <vector>

#include "mprompt/tensor.hpp"

namespace mprompt {

// Line-oriented `key = value` configuration. `#` starts a comment; unknown
// keys are rejected with a ConfigError. All keys and defaults are documented
// in the README.
class RunConfig {
 public:
  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_text(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  std::string get_str(const std::string& key, const std::string& dflt) const;
  int get_int(const std::string& key, int dflt) const;
  int64_t get_i64(const std::string& key, int64_t dflt) const;
  double get_double(const std::string& key, double dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;
  std::vector<int> get_int_list(const std::string& key) const;  // comma-separated

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  void put(const std::string& key, const std::string& value);
  std::map<std::string, std::string> kv_;
};

}  // namespace mprompt

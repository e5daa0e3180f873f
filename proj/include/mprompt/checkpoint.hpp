#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mprompt/tensor.hpp"

namespace mprompt {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "mprompt-checkpoint";

// Ordered name -> tensor container; manifest order is insertion order.
struct TensorStore {
  std::vector<std::pair<std::string, Tensor>> items;
  std::unordered_map<std::string, size_t> index;

  void put(const std::string& name, Tensor t);
  bool has(const std::string& name) const { return index.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  size_t size() const { return items.size(); }
};

// Directory layout: manifest.json (one JSON record per tensor: name, dtype,
// shape, offset, length), weights.bin (raw little-endian f32 payload in
// manifest order), config.json (format, version, config snapshot).
void save_checkpoint(const TensorStore& store, const std::map<std::string, std::string>& config,
                     const std::string& dir);

struct LoadedCheckpoint {
  TensorStore store;
  std::map<std::string, std::string> config;
  int version = 0;
};

// Validation-first: manifest and blob are fully checked (version, dtype,
// shape/length agreement, offset monotonicity, bounds) before any tensor is
// constructed.
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace mprompt

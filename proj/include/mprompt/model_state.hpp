#pragma once

#include <string>
#include <vector>

#include "mprompt/checkpoint.hpp"
#include "mprompt/encoder.hpp"
#include "mprompt/gates.hpp"
#include "mprompt/prompt_bank.hpp"
#include "mprompt/rng.hpp"

namespace mprompt {

// Everything the pre-training run learns: the toy encoder + span heads, one
// prompt bank per injection layer, and one router per (pre-training task,
// injection layer).
struct ModelState {
  EncoderConfig enc_cfg;
  int K = 8;
  int intrinsic_dim = 8;
  float tau = 0.5f;

  EncoderParams enc;
  std::vector<PromptBank> banks;                    // size n_inject
  std::vector<std::vector<RouterLogits>> routers;   // [task][inject layer]
  std::vector<std::string> task_names;              // aligned with routers

  int n_inject() const { return enc_cfg.n_inject(); }

  static ModelState make(const EncoderConfig& cfg, int K, int intrinsic_dim, float tau,
                         const std::vector<std::string>& task_names, uint64_t seed);

  // Visits encoder + head + bank tensors (the parameters shared across tasks).
  template <class F>
  void visit_shared(F&& f) {
    enc.visit(f);
    for (size_t j = 0; j < banks.size(); ++j) {
      f("bank.l" + std::to_string(j) + ".z", banks[j].z);
      f("bank.l" + std::to_string(j) + ".A", banks[j].A);
    }
  }

  static std::string router_name(int task, int inject_layer) {
    return "router.t" + std::to_string(task) + ".l" + std::to_string(inject_layer);
  }

  TensorStore to_store() const;
  std::map<std::string, std::string> config_map() const;
  static ModelState from_checkpoint(const LoadedCheckpoint& ck);
};

void save_model(const ModelState& state, const std::string& dir);
ModelState load_model(const std::string& dir);

}  // namespace mprompt

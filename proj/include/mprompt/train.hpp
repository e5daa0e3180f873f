#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mprompt/model_state.hpp"
#include "mprompt/tasks.hpp"

namespace mprompt {

struct PretrainConfig {
  int steps = 20000;
  int batch = 32;
  float router_lr = 5e-4f;   // fast group
  float prompt_lr = 1e-4f;   // slow group (banks + span heads)
  float encoder_lr = 1e-3f;  // toy encoder trunk (trained here; frozen downstream)
  bool fast_slow = true;     // off -> routers use prompt_lr too
  bool shallow = false;
  float tau = 0.5f;
  uint64_t seed = 0;
  int log_every = 500;

  // Spec defaults: deep = (5e-4, 1e-4, fast/slow on); shallow = single 1e-3
  // with fast/slow off.
  static PretrainConfig defaults_for(bool shallow_variant);
};

enum class Paradigm { gd, bbt };
enum class Metric { accuracy, span_f1 };

struct FinetuneConfig {
  Paradigm paradigm = Paradigm::bbt;
  // gradient paradigm
  int gd_stage1_epochs = 500;
  int gd_stage2_epochs = 500;
  float gd_stage1_lr = 0;  // 0 -> variant default: shallow 1e-2, deep 3e-3
  float gd_stage2_lr = 0;  // 0 -> variant default: shallow 3e-4, deep 2e-5
  // black-box paradigm
  int bbt_budget = 8000;     // total model forwards across both stages
  int bbt_stage1 = 0;        // 0 -> variant default: shallow 200, deep 100
  double bo_box = 3.0;       // routers searched in [-box, box]^K
  double cma_sigma_shallow = 0.1;
  double cma_sigma_embed = 5e-2;  // deep variant, input layer
  double cma_sigma_mid = 1e-2;    // deep variant, intermediate layers
  float tau = 0.5f;
  uint64_t seed = 0;

  int resolved_stage1_budget(bool shallow) const {
    return bbt_stage1 > 0 ? bbt_stage1 : (shallow ? 200 : 100);
  }
  float resolved_gd1_lr(bool shallow) const {
    return gd_stage1_lr > 0 ? gd_stage1_lr : (shallow ? 1e-2f : 3e-3f);
  }
  float resolved_gd2_lr(bool shallow) const {
    return gd_stage2_lr > 0 ? gd_stage2_lr : (shallow ? 3e-4f : 2e-5f);
  }
};

class MetricsLog {
 public:
  void log(int64_t step, const std::string& stage, const std::string& task, double loss,
           double dev_acc);
  const std::vector<std::string>& lines() const { return lines_; }
  void write(const std::string& path) const;

 private:
  std::vector<std::string> lines_;
};

struct ForwardCounter {
  int64_t count = 0;
};

// Task-specific downstream parameters. `routers` always holds per-injection-
// layer logits; stage II adds either materialized active prompts (gradient) or
// per-layer intrinsic offsets from the fused prompt (black-box).
struct TaskAdapter {
  enum class PromptSource { bank, materialized, fused };
  PromptSource source = PromptSource::bank;
  std::vector<RouterLogits> routers;              // per injection layer
  std::vector<std::vector<int>> active;           // per layer, active prompt ids (stage II)
  std::vector<std::vector<Tensor>> mat_prompts;   // [layer][active k] (L,D)
  std::vector<Tensor> fused_offset;               // per layer (d)
};

// Composed per-layer (L x D) prompts for an adapter against a model state.
std::vector<Tensor> adapter_prompts(const ModelState& state, const TaskAdapter& adapter);

// Binarize the adapter's routers into per-layer active sets; a layer whose
// gates are all zero falls back to its single largest logit.
std::vector<std::vector<int>> active_sets_with_fallback(const TaskAdapter& adapter);

ModelState make_initial_state(const Suite& suite, const EncoderConfig& enc_cfg, int K,
                              int intrinsic_dim, float tau, uint64_t seed);

// Multi-task pre-training; mutates `state` in place. 0 steps leaves it equal
// to initialization.
void pretrain(ModelState& state, const Suite& suite, const PretrainConfig& cfg,
              MetricsLog* metrics);

struct EvalResult {
  double score = 0;
  int n = 0;
};

// Deterministic evaluation with binarized gates.
EvalResult evaluate(const ModelState& state, const TaskAdapter& adapter,
                    const std::vector<MrcInstance>& data, const TaskSpec& spec, Metric metric,
                    ForwardCounter* fc = nullptr);

// Mean MRC loss over `data` without building a tape.
double eval_loss(const ModelState& state, const TaskAdapter& adapter,
                 const std::vector<MrcInstance>& data, ForwardCounter* fc = nullptr);

TaskAdapter pretrain_task_adapter(const ModelState& state, int task_index);

struct StageResult {
  TaskAdapter adapter;
  double best_dev = -1.0;
  double best_train_loss = 1e30;
  int64_t forwards = 0;  // budgeted model forwards consumed in this stage
};

StageResult finetune_router_stage(const ModelState& state, const TaskSpec& spec,
                                  const FewShotSplit& split, const FinetuneConfig& cfg,
                                  MetricsLog* metrics);

StageResult finetune_prompt_stage(const ModelState& state, const StageResult& stage1,
                                  const TaskSpec& spec, const FewShotSplit& split,
                                  const FinetuneConfig& cfg, MetricsLog* metrics);

// Adapter persistence (checkpoint directory with artifact=adapter), carrying
// the stage bookkeeping needed to resume at stage II.
struct LoadedAdapter {
  TaskAdapter adapter;
  std::string task;
  double best_dev = -1.0;
  double best_train_loss = 1e30;
  int64_t forwards = 0;
};

void save_adapter(const TaskAdapter& adapter, const std::string& task_name, double best_dev,
                  double best_train_loss, int64_t forwards, const std::string& dir);
LoadedAdapter load_adapter(const std::string& dir);

}  // namespace mprompt

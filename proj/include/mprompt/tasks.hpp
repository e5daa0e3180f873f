#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mprompt/rng.hpp"
#include "mprompt/tokenizer.hpp"

namespace mprompt {

// Primitive token-level labeling rules. A classification task's label is the
// mixed-radix code of its rule outcomes over the context.
enum Rule : int {
  kRuleHasMk0 = 0,      // marker token mk0 present
  kRuleHasMk1 = 1,      // marker token mk1 present
  kRuleEvenLength = 2,  // even number of content tokens
  kRuleMajorityA = 3,   // strictly more class-a than class-b words (margin >= 2)
  kRuleFirstA = 4,      // first content token is class-a
  kRuleLastA = 5,       // last content token is class-a
  kNumRules = 6,
  // auxiliary families (outside the planted rule skills)
  kSkillMarkerIdentity = 6,
  kSkillSpanExtract = 7,
};

enum class TaskKind { classification, marker_identity, extractive };

struct TaskSpec {
  int task_id = 0;
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::vector<std::string> labels;  // ordered label words; empty for extractive
  std::vector<int> skill_set;       // sorted rule/skill indices
  std::string template_text;
  uint64_t generator_seed = 0;

  int n_labels() const { return static_cast<int>(labels.size()); }
};

struct MrcInstance {
  std::vector<int> context;  // token ids, ends with <sep>
  std::vector<int> query;    // token ids
  int gold_start = 0, gold_end = 0;  // absolute text-region coords (0 = first context token)
  std::vector<std::pair<int, int>> candidates;
  int task_id = 0;

  int text_len() const { return static_cast<int>(context.size() + query.size()); }
};

struct FewShotSplit {
  std::vector<MrcInstance> train, dev, test;
};

struct SuiteConfig {
  uint64_t seed = 1;
  int n_tasks = 12;     // pre-training tasks (pairs of identical skill subsets)
  int n_heldout = 4;    // held-out tasks over novel subsets of seen skills
  int n_skills = 6;     // primitive rule count F
  int instances_per_task = 2000;
  std::vector<int> aux_marker_labels;  // label counts for marker-identity tasks
  bool with_extractive = false;
  int aux_instances = 256;
};

struct Suite {
  SuiteConfig cfg;
  std::vector<TaskSpec> tasks;    // pre-training
  std::vector<TaskSpec> heldout;
  std::vector<TaskSpec> aux;      // marker-identity / extractive families
  std::vector<std::vector<MrcInstance>> data, heldout_data, aux_data;
  std::vector<int> group_of;      // planted group id per pre-training task

  const TaskSpec* find_task(const std::string& name) const;
  const std::vector<MrcInstance>* find_data(const std::string& name) const;
  int n_groups() const;
};

// Rule evaluation over context token ids (trailing <sep> excluded).
int eval_rule(int rule, const std::vector<int>& content_ids);
int label_index_of(const TaskSpec& spec, const std::vector<int>& content_ids);

// Template rendering: content words + gold label -> a full MRC instance with
// the query enumerating every label once and gold_span on the gold label.
MrcInstance to_mrc(const std::vector<std::string>& content, int gold_label,
                   const TaskSpec& spec);

// Deterministic per (generator_seed, index).
MrcInstance make_instance(const TaskSpec& spec, int index);

bool is_degenerate(const TaskSpec& spec, int probe = 64);

Suite generate_synthetic_suite(const SuiteConfig& cfg);
Suite generate_synthetic_suite(uint64_t seed, int n_tasks, int n_skills);

FewShotSplit build_fewshot_split(const TaskSpec& spec, const std::vector<MrcInstance>& pool,
                                 uint64_t seed);

// Which label a classification instance's gold span names (index into
// spec.labels); -1 for extractive instances.
int label_of(const TaskSpec& spec, const MrcInstance& inst);

std::pair<int, std::vector<const MrcInstance*>> next_pretrain_batch(const Suite& suite,
                                                                    int batch, Rng& rng);

void save_suite(const Suite& suite, const std::string& dir);
Suite load_suite(const std::string& dir);

std::vector<std::pair<int, int>> recompute_candidates(const TaskSpec& spec,
                                                      const MrcInstance& inst);

}  // namespace mprompt

#include "mprompt/tasks.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mprompt {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr uint64_t kSaltInstance = 0x11;
constexpr uint64_t kSaltDegeneracy = 0x22;
constexpr uint64_t kSaltSplit = 0x33;
constexpr int kMaxDraws = 20000;

const Vocab& vocab() { return Vocab::standard(); }

int id_of(const std::string& w) {
  int id = vocab().lookup(w);
  if (id < 0) throw Error("internal vocabulary miss: " + w);
  return id;
}

bool is_class_a(int tok) { return vocab().word(tok).rfind("ca", 0) == 0; }
bool is_class_b(int tok) { return vocab().word(tok).rfind("cb", 0) == 0; }

std::string kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::classification: return "classification";
    case TaskKind::marker_identity: return "marker";
    case TaskKind::extractive: return "extractive";
  }
  throw Error("unreachable task kind");
}

TaskKind kind_from(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "marker") return TaskKind::marker_identity;
  if (s == "extractive") return TaskKind::extractive;
  throw FormatError("unknown task kind '" + s + "'");
}

// Raw draw of content words for a classification instance; every
// classification task shares this text distribution (no task cue in the text),
// modulo each task's own validity filter.
struct RawDraw {
  std::vector<std::string> content;
  int label = 0;
};

std::vector<std::string> draw_content(Rng& rng) {
  int n_total = 6 + rng.uniform_int(6);  // 6..11 tokens including markers
  bool has0 = rng.uniform() < 0.5;
  bool has1 = rng.uniform() < 0.5;
  int n_class = n_total - (has0 ? 1 : 0) - (has1 ? 1 : 0);
  std::vector<std::string> words;
  words.reserve(static_cast<size_t>(n_total));
  for (int i = 0; i < n_class; ++i) {
    bool a = rng.uniform() < 0.5;
    words.push_back((a ? "ca" : "cb") + std::to_string(rng.uniform_int(10)));
  }
  // markers go to interior positions so the first/last tokens stay class words
  if (has0) words.insert(words.begin() + 1 + rng.uniform_int(static_cast<int>(words.size()) - 1),
                         "mk0");
  if (has1) words.insert(words.begin() + 1 + rng.uniform_int(static_cast<int>(words.size()) - 1),
                         "mk1");
  return words;
}

bool majority_margin_ok(const std::vector<int>& ids) {
  int a = 0, b = 0;
  for (int t : ids) {
    a += is_class_a(t);
    b += is_class_b(t);
  }
  return std::abs(a - b) >= 2;
}

bool draw_classification(const TaskSpec& spec, Rng& rng, RawDraw& out) {
  out.content = draw_content(rng);
  std::vector<int> ids = vocab().encode(out.content);
  bool uses_majority =
      std::find(spec.skill_set.begin(), spec.skill_set.end(), kRuleMajorityA) !=
      spec.skill_set.end();
  if (uses_majority && !majority_margin_ok(ids)) return false;
  out.label = label_index_of(spec, ids);
  return true;
}

std::vector<std::string> marker_pool() {
  std::vector<std::string> m;
  for (int i = 0; i < 30; ++i) m.push_back("mk" + std::to_string(i));
  return m;
}

}  // namespace

int eval_rule(int rule, const std::vector<int>& content_ids) {
  if (content_ids.empty()) throw Error("rule over empty content");
  switch (rule) {
    case kRuleHasMk0:
    case kRuleHasMk1: {
      int mid = id_of(rule == kRuleHasMk0 ? "mk0" : "mk1");
      return std::find(content_ids.begin(), content_ids.end(), mid) != content_ids.end() ? 1 : 0;
    }
    case kRuleEvenLength:
      return content_ids.size() % 2 == 0 ? 1 : 0;
    case kRuleMajorityA: {
      int a = 0, b = 0;
      for (int t : content_ids) {
        a += is_class_a(t);
        b += is_class_b(t);
      }
      return a > b ? 1 : 0;
    }
    case kRuleFirstA:
      return is_class_a(content_ids.front()) ? 1 : 0;
    case kRuleLastA:
      return is_class_a(content_ids.back()) ? 1 : 0;
    default:
      throw Error("unknown rule index " + std::to_string(rule));
  }
}

int label_index_of(const TaskSpec& spec, const std::vector<int>& content_ids) {
  int idx = 0;
  for (size_t i = 0; i < spec.skill_set.size(); ++i)
    idx |= eval_rule(spec.skill_set[i], content_ids) << i;
  return idx;
}

MrcInstance to_mrc(const std::vector<std::string>& content, int gold_label,
                   const TaskSpec& spec) {
  if (gold_label < 0 || gold_label >= spec.n_labels())
    throw Error("gold label " + std::to_string(gold_label) + " outside label set of task " +
                spec.name);
  MrcInstance inst;
  inst.task_id = spec.task_id;
  std::vector<std::string> ctx = content;
  ctx.push_back("<sep>");
  inst.context = vocab().encode(ctx);
  int ctx_len = static_cast<int>(inst.context.size());

  std::vector<std::string> q;
  if (spec.kind == TaskKind::classification)
    q = {"classify", ":", "options", ":"};
  else
    q = {"which", "marker", "?", "options", ":"};
  std::vector<int> qids = vocab().encode(q);
  for (int i = 0; i < spec.n_labels(); ++i) {
    std::vector<int> lab = vocab().encode_text(spec.labels[static_cast<size_t>(i)]);
    int s = static_cast<int>(qids.size());
    qids.insert(qids.end(), lab.begin(), lab.end());
    inst.candidates.emplace_back(ctx_len + s, ctx_len + s + static_cast<int>(lab.size()) - 1);
    qids.push_back(id_of(i + 1 < spec.n_labels() ? "," : "."));
  }
  inst.query = std::move(qids);
  auto [gs, ge] = inst.candidates[static_cast<size_t>(gold_label)];
  inst.gold_start = gs;
  inst.gold_end = ge;
  return inst;
}

MrcInstance make_instance(const TaskSpec& spec, int index) {
  Rng rng(mix_seed(spec.generator_seed, {kSaltInstance, static_cast<uint64_t>(index)}));
  switch (spec.kind) {
    case TaskKind::classification: {
      int target = index % spec.n_labels();
      RawDraw d;
      for (int tries = 0; tries < kMaxDraws; ++tries) {
        if (!draw_classification(spec, rng, d)) continue;
        if (d.label != target) continue;
        return to_mrc(d.content, d.label, spec);
      }
      throw Error("degenerate generator: task " + spec.name + " cannot reach label " +
                  std::to_string(target));
    }
    case TaskKind::marker_identity: {
      int target = index % spec.n_labels();
      int n = 5 + rng.uniform_int(5);
      std::vector<std::string> words;
      for (int i = 0; i < n; ++i) {
        bool a = rng.uniform() < 0.5;
        words.push_back((a ? "ca" : "cb") + std::to_string(rng.uniform_int(10)));
      }
      words.insert(words.begin() + 1 + rng.uniform_int(n - 1),
                   spec.labels[static_cast<size_t>(target)]);
      return to_mrc(words, target, spec);
    }
    case TaskKind::extractive: {
      int n = 6 + rng.uniform_int(5);
      std::vector<std::string> words;
      for (int i = 0; i < n; ++i) {
        bool a = rng.uniform() < 0.5;
        words.push_back((a ? "ca" : "cb") + std::to_string(rng.uniform_int(10)));
      }
      int span_len = 1 + rng.uniform_int(4);
      int s = rng.uniform_int(n - span_len + 1);
      words.insert(words.begin() + s, "[");
      words.insert(words.begin() + s + 1 + span_len, "]");
      MrcInstance inst;
      inst.task_id = spec.task_id;
      std::vector<std::string> ctx = words;
      ctx.push_back("<sep>");
      inst.context = vocab().encode(ctx);
      inst.query = vocab().encode({"extract", ":", "the", "marked", "words", "."});
      inst.gold_start = s + 1;
      inst.gold_end = s + span_len;
      inst.candidates = recompute_candidates(spec, inst);
      return inst;
    }
  }
  throw Error("unreachable task kind");
}

bool is_degenerate(const TaskSpec& spec, int probe) {
  if (spec.kind == TaskKind::extractive) return false;
  if (spec.n_labels() < 2) return true;
  Rng rng(mix_seed(spec.generator_seed, {kSaltDegeneracy}));
  std::set<int> seen;
  for (int i = 0; i < probe; ++i) {
    if (spec.kind == TaskKind::classification) {
      RawDraw d;
      int tries = 0;
      while (!draw_classification(spec, rng, d) && ++tries < kMaxDraws) {
      }
      if (tries >= kMaxDraws) return true;
      seen.insert(d.label);
    } else {
      seen.insert(i % spec.n_labels());
    }
    if (seen.size() > 1) return false;
  }
  return seen.size() <= 1;
}

std::vector<std::pair<int, int>> recompute_candidates(const TaskSpec& spec,
                                                      const MrcInstance& inst) {
  std::vector<std::pair<int, int>> cands;
  int ctx_len = static_cast<int>(inst.context.size());
  if (spec.kind == TaskKind::extractive) {
    // all context spans up to length 4, excluding the trailing separator
    for (int s = 0; s + 1 < ctx_len; ++s)
      for (int e = s; e < std::min(s + 4, ctx_len - 1); ++e) cands.emplace_back(s, e);
    return cands;
  }
  // each label occurs exactly once in the query; locate it
  for (const auto& label : spec.labels) {
    std::vector<int> lab = vocab().encode_text(label);
    int found = -1;
    for (int s = 0; s + static_cast<int>(lab.size()) <= static_cast<int>(inst.query.size());
         ++s) {
      if (std::equal(lab.begin(), lab.end(), inst.query.begin() + s)) {
        if (found >= 0)
          throw FormatError("label '" + label + "' occurs twice in a query of task " + spec.name);
        found = s;
      }
    }
    if (found < 0)
      throw FormatError("label '" + label + "' missing from a query of task " + spec.name);
    cands.emplace_back(ctx_len + found, ctx_len + found + static_cast<int>(lab.size()) - 1);
  }
  return cands;
}

int label_of(const TaskSpec& spec, const MrcInstance& inst) {
  if (spec.kind == TaskKind::extractive) return -1;
  for (size_t i = 0; i < inst.candidates.size(); ++i)
    if (inst.candidates[i] == std::make_pair(inst.gold_start, inst.gold_end))
      return static_cast<int>(i);
  throw FormatError("gold span of task " + spec.name + " is not a candidate");
}

namespace {

std::string subset_name(const std::vector<int>& subset) {
  std::string s;
  for (int r : subset) s += "r" + std::to_string(r);
  return s;
}

TaskSpec make_rule_spec(int task_id, const std::string& name, const std::vector<int>& subset,
                        uint64_t gen_seed) {
  TaskSpec spec;
  spec.task_id = task_id;
  spec.name = name;
  spec.kind = TaskKind::classification;
  spec.skill_set = subset;
  int n_labels = 1 << subset.size();
  if (n_labels == 2)
    spec.labels = {"la", "lb"};
  else if (n_labels == 4)
    spec.labels = {"pa", "pb", "pc", "pd"};
  else
    throw ConfigError("rule subsets larger than 2 are not supported");
  spec.template_text = "classify : options : {labels} .";
  spec.generator_seed = gen_seed;
  return spec;
}

}  // namespace

Suite generate_synthetic_suite(uint64_t seed, int n_tasks, int n_skills) {
  SuiteConfig cfg;
  cfg.seed = seed;
  cfg.n_tasks = n_tasks;
  cfg.n_skills = n_skills;
  return generate_synthetic_suite(cfg);
}

Suite generate_synthetic_suite(const SuiteConfig& cfg) {
  if (cfg.n_tasks < 2) throw ConfigError("suite needs at least 2 tasks");
  if (cfg.n_skills < 2) throw ConfigError("suite needs at least 2 skills");
  if (cfg.instances_per_task < 4) throw ConfigError("suite needs at least 4 instances per task");
  int F = cfg.n_skills;

  // Planted subsets: singles over the first rules, then two-rule combinations;
  // two tasks per subset. Ground-truth groups are classes of equal subsets.
  int n_groups = (cfg.n_tasks + 1) / 2;
  int n_singles = std::min(n_groups, std::min(F, 4));
  std::vector<std::vector<int>> subsets;
  for (int i = 0; i < n_singles; ++i) subsets.push_back({i});
  for (int j = 0; static_cast<int>(subsets.size()) < n_groups; ++j) {
    int a = j % F, b = (j + 4) % F;
    if (a == b) b = (b + 1) % F;
    std::vector<int> pair = {std::min(a, b), std::max(a, b)};
    subsets.push_back(pair);
  }

  Suite suite;
  suite.cfg = cfg;
  int task_id = 0;
  for (int t = 0; t < cfg.n_tasks; ++t) {
    const auto& subset = subsets[static_cast<size_t>(t / 2)];
    std::string name =
        "cls-" + subset_name(subset) + "-" + std::string(1, static_cast<char>('a' + t % 2));
    uint64_t gen = mix_seed(cfg.seed, {7, static_cast<uint64_t>(t)});
    TaskSpec spec = make_rule_spec(task_id, name, subset, gen);
    for (int redraw = 0; is_degenerate(spec); ++redraw) {
      if (redraw >= 16) throw Error("task " + name + " stayed degenerate after redraws");
      spec.generator_seed = splitmix64(spec.generator_seed);
    }
    suite.tasks.push_back(spec);
    ++task_id;
  }
  // groups from subset identity
  suite.group_of.assign(suite.tasks.size(), -1);
  {
    std::vector<std::vector<int>> seen;
    for (size_t t = 0; t < suite.tasks.size(); ++t) {
      const auto& s = suite.tasks[t].skill_set;
      auto it = std::find(seen.begin(), seen.end(), s);
      if (it == seen.end()) {
        seen.push_back(s);
        it = std::prev(seen.end());
      }
      suite.group_of[t] = static_cast<int>(it - seen.begin());
    }
  }

  // Held-out tasks: novel two-rule subsets over rules already seen alone.
  std::vector<std::vector<int>> held_subsets;
  for (int i = 0; i < n_singles && static_cast<int>(held_subsets.size()) < cfg.n_heldout; ++i)
    for (int j = i + 1; j < n_singles && static_cast<int>(held_subsets.size()) < cfg.n_heldout;
         ++j) {
      std::vector<int> pair = {i, j};
      if (std::find(subsets.begin(), subsets.end(), pair) == subsets.end())
        held_subsets.push_back(pair);
    }
  if (static_cast<int>(held_subsets.size()) < cfg.n_heldout)
    throw ConfigError("not enough novel subsets for " + std::to_string(cfg.n_heldout) +
                      " held-out tasks");
  for (int h = 0; h < cfg.n_heldout; ++h) {
    const auto& subset = held_subsets[static_cast<size_t>(h)];
    std::string name = "held-" + subset_name(subset);
    uint64_t gen = mix_seed(cfg.seed, {11, static_cast<uint64_t>(h)});
    TaskSpec spec = make_rule_spec(task_id, name, subset, gen);
    for (int redraw = 0; is_degenerate(spec); ++redraw) {
      if (redraw >= 16) throw Error("task " + name + " stayed degenerate after redraws");
      spec.generator_seed = splitmix64(spec.generator_seed);
    }
    suite.heldout.push_back(spec);
    ++task_id;
  }

  // Auxiliary families.
  auto pool = marker_pool();
  for (size_t a = 0; a < cfg.aux_marker_labels.size(); ++a) {
    int n_labels = cfg.aux_marker_labels[a];
    if (n_labels < 2 || n_labels > 30)
      throw ConfigError("marker task label count must be in [2, 30]");
    TaskSpec spec;
    spec.task_id = task_id++;
    spec.name = "mark-n" + std::to_string(n_labels);
    spec.kind = TaskKind::marker_identity;
    spec.skill_set = {kSkillMarkerIdentity};
    spec.template_text = "which marker ? options : {labels} .";
    spec.generator_seed = mix_seed(cfg.seed, {13, static_cast<uint64_t>(a)});
    Rng rng(mix_seed(cfg.seed, {17, static_cast<uint64_t>(a)}));
    std::vector<int> ids(pool.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    for (int i = static_cast<int>(ids.size()) - 1; i > 0; --i)
      std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(rng.uniform_int(i + 1))]);
    ids.resize(static_cast<size_t>(n_labels));
    std::sort(ids.begin(), ids.end());
    for (int id : ids) spec.labels.push_back(pool[static_cast<size_t>(id)]);
    suite.aux.push_back(spec);
  }
  if (cfg.with_extractive) {
    TaskSpec spec;
    spec.task_id = task_id++;
    spec.name = "extract-0";
    spec.kind = TaskKind::extractive;
    spec.skill_set = {kSkillSpanExtract};
    spec.template_text = "extract : the marked words .";
    spec.generator_seed = mix_seed(cfg.seed, {19});
    suite.aux.push_back(spec);
  }

  auto fill = [&](const std::vector<TaskSpec>& specs, int count,
                  std::vector<std::vector<MrcInstance>>& out) {
    for (const auto& spec : specs) {
      std::vector<MrcInstance> data;
      data.reserve(static_cast<size_t>(count));
      for (int i = 0; i < count; ++i) data.push_back(make_instance(spec, i));
      out.push_back(std::move(data));
    }
  };
  fill(suite.tasks, cfg.instances_per_task, suite.data);
  fill(suite.heldout, cfg.instances_per_task, suite.heldout_data);
  fill(suite.aux, cfg.aux_instances, suite.aux_data);
  return suite;
}

const TaskSpec* Suite::find_task(const std::string& name) const {
  for (const auto& t : tasks)
    if (t.name == name) return &t;
  for (const auto& t : heldout)
    if (t.name == name) return &t;
  for (const auto& t : aux)
    if (t.name == name) return &t;
  return nullptr;
}

const std::vector<MrcInstance>* Suite::find_data(const std::string& name) const {
  for (size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i].name == name) return &data[i];
  for (size_t i = 0; i < heldout.size(); ++i)
    if (heldout[i].name == name) return &heldout_data[i];
  for (size_t i = 0; i < aux.size(); ++i)
    if (aux[i].name == name) return &aux_data[i];
  return nullptr;
}

int Suite::n_groups() const {
  int g = 0;
  for (int v : group_of) g = std::max(g, v + 1);
  return g;
}

FewShotSplit build_fewshot_split(const TaskSpec& spec, const std::vector<MrcInstance>& pool,
                                 uint64_t seed) {
  Rng rng(mix_seed(seed, {kSaltSplit, static_cast<uint64_t>(spec.task_id)}));
  FewShotSplit split;
  auto shuffle = [&](std::vector<int>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(rng.uniform_int(i + 1))]);
  };
  std::vector<char> used(pool.size(), 0);
  if (spec.kind == TaskKind::extractive) {
    std::vector<int> idx(pool.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    shuffle(idx);
    if (idx.size() < 64) throw Error("insufficient pool for task " + spec.name);
    for (int i = 0; i < 32; ++i) {
      split.train.push_back(pool[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
      used[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
    }
    for (int i = 32; i < 64; ++i) {
      split.dev.push_back(pool[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
      used[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
    }
  } else {
    int n = spec.n_labels();
    std::vector<std::vector<int>> buckets(static_cast<size_t>(n));
    for (size_t i = 0; i < pool.size(); ++i)
      buckets[static_cast<size_t>(label_of(spec, pool[i]))].push_back(static_cast<int>(i));
    for (auto& b : buckets) shuffle(b);
    // <=5 labels: 32 split as evenly as possible; >5 labels: 8 per label.
    std::vector<int> counts(static_cast<size_t>(n), 8);
    if (n <= 5)
      for (int i = 0; i < n; ++i) counts[static_cast<size_t>(i)] = 32 / n + (i < 32 % n ? 1 : 0);
    for (int l = 0; l < n; ++l) {
      int c = counts[static_cast<size_t>(l)];
      if (static_cast<int>(buckets[static_cast<size_t>(l)].size()) < 2 * c)
        throw Error("insufficient pool for task " + spec.name + " label " +
                    std::to_string(l));
      for (int i = 0; i < c; ++i) {
        int idx = buckets[static_cast<size_t>(l)][static_cast<size_t>(i)];
        split.train.push_back(pool[static_cast<size_t>(idx)]);
        used[static_cast<size_t>(idx)] = 1;
      }
      for (int i = c; i < 2 * c; ++i) {
        int idx = buckets[static_cast<size_t>(l)][static_cast<size_t>(i)];
        split.dev.push_back(pool[static_cast<size_t>(idx)]);
        used[static_cast<size_t>(idx)] = 1;
      }
    }
  }
  for (size_t i = 0; i < pool.size(); ++i)
    if (!used[i]) split.test.push_back(pool[i]);
  return split;
}

std::pair<int, std::vector<const MrcInstance*>> next_pretrain_batch(const Suite& suite,
                                                                    int batch, Rng& rng) {
  if (suite.tasks.empty()) throw Error("empty suite");
  int task = rng.uniform_int(static_cast<int>(suite.tasks.size()));
  const auto& pool = suite.data[static_cast<size_t>(task)];
  std::vector<const MrcInstance*> out;
  out.reserve(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i)
    out.push_back(&pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
  return {task, std::move(out)};
}

namespace {

ordered_json spec_to_json(const TaskSpec& spec, int group) {
  ordered_json j;
  j["task_id"] = spec.task_id;
  j["name"] = spec.name;
  j["kind"] = kind_name(spec.kind);
  j["labels"] = spec.labels;
  j["skill_set"] = spec.skill_set;
  j["template"] = spec.template_text;
  j["generator_seed"] = spec.generator_seed;
  if (group >= 0) j["group"] = group;
  return j;
}

TaskSpec spec_from_json(const ordered_json& j) {
  TaskSpec spec;
  spec.task_id = j.at("task_id").get<int>();
  spec.name = j.at("name").get<std::string>();
  spec.kind = kind_from(j.at("kind").get<std::string>());
  spec.labels = j.at("labels").get<std::vector<std::string>>();
  spec.skill_set = j.at("skill_set").get<std::vector<int>>();
  spec.template_text = j.at("template").get<std::string>();
  spec.generator_seed = j.at("generator_seed").get<uint64_t>();
  return spec;
}

}  // namespace

void save_suite(const Suite& suite, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir);

  ordered_json j;
  j["format"] = "mprompt-suite";
  j["version"] = 1;
  ordered_json jc;
  jc["seed"] = suite.cfg.seed;
  jc["n_tasks"] = suite.cfg.n_tasks;
  jc["n_heldout"] = suite.cfg.n_heldout;
  jc["n_skills"] = suite.cfg.n_skills;
  jc["instances_per_task"] = suite.cfg.instances_per_task;
  jc["aux_marker_labels"] = suite.cfg.aux_marker_labels;
  jc["with_extractive"] = suite.cfg.with_extractive;
  jc["aux_instances"] = suite.cfg.aux_instances;
  j["config"] = jc;
  j["tasks"] = ordered_json::array();
  for (size_t t = 0; t < suite.tasks.size(); ++t)
    j["tasks"].push_back(spec_to_json(suite.tasks[t], suite.group_of[t]));
  j["heldout"] = ordered_json::array();
  for (const auto& t : suite.heldout) j["heldout"].push_back(spec_to_json(t, -1));
  j["aux"] = ordered_json::array();
  for (const auto& t : suite.aux) j["aux"].push_back(spec_to_json(t, -1));

  std::ofstream jf(fs::path(dir) / "suite.json", std::ios::binary);
  if (!jf) throw IoError("cannot write suite.json in " + dir);
  jf << j.dump(2) << "\n";
  jf.close();
  if (!jf) throw IoError("failed writing suite.json in " + dir);

  const Vocab& v = Vocab::standard();
  std::ofstream df(fs::path(dir) / "data.tsv", std::ios::binary);
  if (!df) throw IoError("cannot write data.tsv in " + dir);
  auto dump = [&](const std::vector<std::vector<MrcInstance>>& blocks) {
    for (const auto& block : blocks)
      for (const auto& inst : block)
        df << v.decode(inst.context) << '\t' << v.decode(inst.query) << '\t' << inst.gold_start
           << '\t' << inst.gold_end << '\t' << inst.task_id << '\n';
  };
  dump(suite.data);
  dump(suite.heldout_data);
  dump(suite.aux_data);
  df.close();
  if (!df) throw IoError("failed writing data.tsv in " + dir);
}

Suite load_suite(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream jf(fs::path(dir) / "suite.json", std::ios::binary);
  if (!jf) throw IoError("suite.json missing in " + dir);
  ordered_json j;
  try {
    jf >> j;
  } catch (const std::exception& e) {
    throw FormatError(std::string("suite.json unparsable: ") + e.what());
  }
  if (j.value("format", "") != std::string("mprompt-suite"))
    throw FormatError("not a task-suite directory: " + dir);
  if (j.value("version", 0) != 1)
    throw FormatError("unsupported suite version in " + dir);

  Suite suite;
  const auto& jc = j.at("config");
  suite.cfg.seed = jc.at("seed").get<uint64_t>();
  suite.cfg.n_tasks = jc.at("n_tasks").get<int>();
  suite.cfg.n_heldout = jc.at("n_heldout").get<int>();
  suite.cfg.n_skills = jc.at("n_skills").get<int>();
  suite.cfg.instances_per_task = jc.at("instances_per_task").get<int>();
  suite.cfg.aux_marker_labels = jc.at("aux_marker_labels").get<std::vector<int>>();
  suite.cfg.with_extractive = jc.at("with_extractive").get<bool>();
  suite.cfg.aux_instances = jc.at("aux_instances").get<int>();
  for (const auto& tj : j.at("tasks")) {
    suite.tasks.push_back(spec_from_json(tj));
    suite.group_of.push_back(tj.at("group").get<int>());
  }
  for (const auto& tj : j.at("heldout")) suite.heldout.push_back(spec_from_json(tj));
  for (const auto& tj : j.at("aux")) suite.aux.push_back(spec_from_json(tj));

  std::unordered_map<int, std::pair<const TaskSpec*, std::vector<MrcInstance>*>> by_id;
  suite.data.resize(suite.tasks.size());
  suite.heldout_data.resize(suite.heldout.size());
  suite.aux_data.resize(suite.aux.size());
  for (size_t i = 0; i < suite.tasks.size(); ++i)
    by_id[suite.tasks[i].task_id] = {&suite.tasks[i], &suite.data[i]};
  for (size_t i = 0; i < suite.heldout.size(); ++i)
    by_id[suite.heldout[i].task_id] = {&suite.heldout[i], &suite.heldout_data[i]};
  for (size_t i = 0; i < suite.aux.size(); ++i)
    by_id[suite.aux[i].task_id] = {&suite.aux[i], &suite.aux_data[i]};

  std::ifstream df(fs::path(dir) / "data.tsv", std::ios::binary);
  if (!df) throw IoError("data.tsv missing in " + dir);
  const Vocab& v = Vocab::standard();
  std::string line;
  int line_no = 0;
  while (std::getline(df, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
      size_t tab = line.find('\t', pos);
      fields.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (fields.size() != 5)
      throw FormatError("data.tsv line " + std::to_string(line_no) + ": expected 5 fields");
    MrcInstance inst;
    inst.context = v.encode_text(fields[0]);
    inst.query = v.encode_text(fields[1]);
    try {
      inst.gold_start = std::stoi(fields[2]);
      inst.gold_end = std::stoi(fields[3]);
      inst.task_id = std::stoi(fields[4]);
    } catch (const std::exception&) {
      throw FormatError("data.tsv line " + std::to_string(line_no) + ": bad integer field");
    }
    auto it = by_id.find(inst.task_id);
    if (it == by_id.end())
      throw FormatError("data.tsv line " + std::to_string(line_no) + ": unknown task id " +
                        std::to_string(inst.task_id));
    const TaskSpec& spec = *it->second.first;
    inst.candidates = recompute_candidates(spec, inst);
    int text_len = inst.text_len();
    if (inst.gold_start < 0 || inst.gold_end < inst.gold_start || inst.gold_end >= text_len)
      throw FormatError("data.tsv line " + std::to_string(line_no) + ": gold span out of range");
    if (std::find(inst.candidates.begin(), inst.candidates.end(),
                  std::make_pair(inst.gold_start, inst.gold_end)) == inst.candidates.end())
      throw FormatError("data.tsv line " + std::to_string(line_no) +
                        ": gold span is not a candidate");
    it->second.second->push_back(std::move(inst));
  }
  return suite;
}

}  // namespace mprompt

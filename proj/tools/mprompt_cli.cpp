#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mprompt/analysis.hpp"
#include "mprompt/run_config.hpp"
#include "mprompt/tasks.hpp"
#include "mprompt/train.hpp"

namespace {

using namespace mprompt;

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig::parse_text("") : RunConfig::parse_file(path);
}

std::string require_str(const RunConfig& cfg, const std::string& key) {
  if (!cfg.has(key)) throw ConfigError("config key '" + key + "' is required");
  return cfg.get_str(key, "");
}

SuiteConfig suite_config_from(const RunConfig& cfg, uint64_t seed_override, bool has_seed) {
  SuiteConfig sc;
  sc.seed = has_seed ? seed_override : static_cast<uint64_t>(cfg.get_i64("suite_seed", 1));
  sc.n_tasks = cfg.get_int("n_tasks", sc.n_tasks);
  sc.n_heldout = cfg.get_int("n_heldout", sc.n_heldout);
  sc.n_skills = cfg.get_int("n_skills", sc.n_skills);
  sc.instances_per_task = cfg.get_int("instances_per_task", sc.instances_per_task);
  sc.aux_marker_labels = cfg.get_int_list("aux_marker_labels");
  sc.with_extractive = cfg.get_bool("with_extractive", sc.with_extractive);
  sc.aux_instances = cfg.get_int("aux_instances", sc.aux_instances);
  return sc;
}

EncoderConfig encoder_config_from(const RunConfig& cfg) {
  EncoderConfig ec;
  ec.n_layers = cfg.get_int("n_layers", ec.n_layers);
  ec.hidden = cfg.get_int("hidden", ec.hidden);
  ec.heads = cfg.get_int("heads", ec.heads);
  ec.max_seq = cfg.get_int("max_seq", ec.max_seq);
  ec.prompt_len = cfg.get_int("prompt_len", ec.prompt_len);
  ec.shallow = cfg.get_bool("shallow", ec.shallow);
  ec.vocab = Vocab::standard().size();
  return ec;
}

FinetuneConfig finetune_config_from(const RunConfig& cfg, const std::string& paradigm,
                                    uint64_t seed) {
  FinetuneConfig fc;
  std::string p = paradigm.empty() ? cfg.get_str("paradigm", "bbt") : paradigm;
  if (p == "gd")
    fc.paradigm = Paradigm::gd;
  else if (p == "bbt")
    fc.paradigm = Paradigm::bbt;
  else
    throw ConfigError("paradigm must be 'gd' or 'bbt', got '" + p + "'");
  fc.gd_stage1_epochs = cfg.get_int("gd_stage1_epochs", fc.gd_stage1_epochs);
  fc.gd_stage2_epochs = cfg.get_int("gd_stage2_epochs", fc.gd_stage2_epochs);
  fc.gd_stage1_lr = static_cast<float>(cfg.get_double("gd_stage1_lr", fc.gd_stage1_lr));
  fc.gd_stage2_lr = static_cast<float>(cfg.get_double("gd_stage2_lr", fc.gd_stage2_lr));
  fc.bbt_budget = cfg.get_int("bbt_budget", fc.bbt_budget);
  fc.bbt_stage1 = cfg.get_int("bbt_stage1", fc.bbt_stage1);
  fc.bo_box = cfg.get_double("bo_box", fc.bo_box);
  fc.cma_sigma_shallow = cfg.get_double("cma_sigma_shallow", fc.cma_sigma_shallow);
  fc.cma_sigma_embed = cfg.get_double("cma_sigma_embed", fc.cma_sigma_embed);
  fc.cma_sigma_mid = cfg.get_double("cma_sigma_mid", fc.cma_sigma_mid);
  fc.tau = static_cast<float>(cfg.get_double("tau", fc.tau));
  fc.seed = seed;
  return fc;
}

struct TaskContext {
  const TaskSpec* spec = nullptr;
  const std::vector<MrcInstance>* data = nullptr;
};

TaskContext find_task(const Suite& suite, const std::string& name) {
  TaskContext tc;
  tc.spec = suite.find_task(name);
  if (!tc.spec) throw ConfigError("task '" + name + "' is not in the suite");
  tc.data = suite.find_data(name);
  return tc;
}

int run_gen_tasks(const std::string& config_path, const std::string& out, uint64_t seed,
                  bool has_seed) {
  RunConfig cfg = load_config(config_path);
  std::string dir = !out.empty() ? out : cfg.get_str("suite_dir", "");
  if (dir.empty()) throw ConfigError("gen-tasks needs --out or suite_dir");
  Suite suite = generate_synthetic_suite(suite_config_from(cfg, seed, has_seed));
  save_suite(suite, dir);
  size_t n_inst = 0;
  for (const auto& d : suite.data) n_inst += d.size();
  for (const auto& d : suite.heldout_data) n_inst += d.size();
  for (const auto& d : suite.aux_data) n_inst += d.size();
  std::printf("suite written to %s: %zu pre-training tasks in %d groups, %zu held-out, "
              "%zu auxiliary, %zu instances\n",
              dir.c_str(), suite.tasks.size(), suite.n_groups(), suite.heldout.size(),
              suite.aux.size(), n_inst);
  return 0;
}

int run_pretrain(const std::string& config_path, const std::string& out, uint64_t seed,
                 bool has_seed) {
  RunConfig cfg = load_config(config_path);
  std::string model_out = !out.empty() ? out : cfg.get_str("model_out", "");
  if (model_out.empty()) throw ConfigError("pretrain needs --out or model_out");
  Suite suite = load_suite(require_str(cfg, "suite_dir"));
  EncoderConfig ec = encoder_config_from(cfg);
  PretrainConfig pc = PretrainConfig::defaults_for(ec.shallow);
  pc.steps = cfg.get_int("steps", pc.steps);
  pc.batch = cfg.get_int("batch", pc.batch);
  pc.router_lr = static_cast<float>(cfg.get_double("router_lr", pc.router_lr));
  pc.prompt_lr = static_cast<float>(cfg.get_double("prompt_lr", pc.prompt_lr));
  pc.encoder_lr = static_cast<float>(cfg.get_double("encoder_lr", pc.encoder_lr));
  pc.fast_slow = cfg.get_bool("fast_slow", pc.fast_slow);
  pc.tau = static_cast<float>(cfg.get_double("tau", pc.tau));
  pc.log_every = cfg.get_int("log_every", pc.log_every);
  pc.seed = has_seed ? seed : static_cast<uint64_t>(cfg.get_i64("seed", 0));

  ModelState state = make_initial_state(suite, ec, cfg.get_int("bank_size", 8),
                                        cfg.get_int("intrinsic_dim", 8), pc.tau, pc.seed);
  MetricsLog metrics;
  pretrain(state, suite, pc, &metrics);
  save_model(state, model_out);
  if (cfg.has("metrics_out")) metrics.write(cfg.get_str("metrics_out", ""));
  std::printf("pre-trained %d steps on %zu tasks; checkpoint written to %s\n", pc.steps,
              suite.tasks.size(), model_out.c_str());
  return 0;
}

int run_finetune(const std::string& config_path, const std::string& out,
                 const std::string& paradigm, const std::string& stage_opt, bool router_only,
                 uint64_t seed, bool has_seed) {
  RunConfig cfg = load_config(config_path);
  ModelState state = load_model(require_str(cfg, "model_in"));
  Suite suite = load_suite(require_str(cfg, "suite_dir"));
  TaskContext tc = find_task(suite, require_str(cfg, "task"));
  uint64_t run_seed = has_seed ? seed : static_cast<uint64_t>(cfg.get_i64("seed", 0));
  FinetuneConfig fc = finetune_config_from(cfg, paradigm, run_seed);
  uint64_t split_seed = static_cast<uint64_t>(cfg.get_i64("split_seed", 17));
  FewShotSplit split = build_fewshot_split(*tc.spec, *tc.data, split_seed);

  std::string stage = router_only ? "1" : stage_opt;
  MetricsLog metrics;
  StageResult result;
  if (stage == "2") {
    LoadedAdapter la = load_adapter(require_str(cfg, "adapter_in"));
    if (la.task != tc.spec->name)
      throw ConfigError("adapter was fine-tuned for task '" + la.task + "', not '" +
                        tc.spec->name + "'");
    StageResult s1;
    s1.adapter = la.adapter;
    s1.best_dev = la.best_dev;
    s1.best_train_loss = la.best_train_loss;
    s1.forwards = la.forwards;
    result = finetune_prompt_stage(state, s1, *tc.spec, split, fc, &metrics);
    result.forwards += s1.forwards;
  } else {
    result = finetune_router_stage(state, *tc.spec, split, fc, &metrics);
    if (stage == "both") {
      StageResult s2 = finetune_prompt_stage(state, result, *tc.spec, split, fc, &metrics);
      s2.forwards += result.forwards;
      result = s2;
    } else if (stage != "1") {
      throw ConfigError("--stage must be 1, 2, or both");
    }
  }

  std::string adapter_out = !out.empty() ? out : cfg.get_str("adapter_out", "");
  if (!adapter_out.empty())
    save_adapter(result.adapter, tc.spec->name, result.best_dev, result.best_train_loss,
                 result.forwards, adapter_out);
  if (cfg.has("metrics_out")) metrics.write(cfg.get_str("metrics_out", ""));

  Metric metric = tc.spec->kind == TaskKind::extractive ? Metric::span_f1 : Metric::accuracy;
  EvalResult test = evaluate(state, result.adapter, split.test, *tc.spec, metric);
  std::printf("task %s: best dev %.4f, test %s %.4f over %d instances (forwards used: %lld)\n",
              tc.spec->name.c_str(), result.best_dev,
              metric == Metric::span_f1 ? "span-F1" : "accuracy", test.score, test.n,
              static_cast<long long>(result.forwards));
  if (!adapter_out.empty()) std::printf("adapter written to %s\n", adapter_out.c_str());
  return 0;
}

int run_eval(const std::string& config_path, uint64_t seed, bool has_seed) {
  RunConfig cfg = load_config(config_path);
  ModelState state = load_model(require_str(cfg, "model_in"));
  Suite suite = load_suite(require_str(cfg, "suite_dir"));
  TaskContext tc = find_task(suite, require_str(cfg, "task"));
  (void)seed;
  (void)has_seed;

  TaskAdapter adapter;
  if (cfg.has("adapter_in")) {
    LoadedAdapter la = load_adapter(cfg.get_str("adapter_in", ""));
    if (la.task != tc.spec->name)
      throw ConfigError("adapter was fine-tuned for task '" + la.task + "', not '" +
                        tc.spec->name + "'");
    adapter = la.adapter;
  } else {
    int idx = -1;
    for (size_t t = 0; t < state.task_names.size(); ++t)
      if (state.task_names[t] == tc.spec->name) idx = static_cast<int>(t);
    if (idx < 0)
      throw ConfigError("task '" + tc.spec->name +
                        "' was not pre-trained; pass adapter_in to evaluate it");
    adapter = pretrain_task_adapter(state, idx);
  }

  Metric metric = tc.spec->kind == TaskKind::extractive ? Metric::span_f1 : Metric::accuracy;
  uint64_t split_seed = static_cast<uint64_t>(cfg.get_i64("split_seed", 17));
  FewShotSplit split = build_fewshot_split(*tc.spec, *tc.data, split_seed);
  EvalResult res = evaluate(state, adapter, split.test, *tc.spec, metric);
  std::printf("task %s: test %s %.4f over %d instances\n", tc.spec->name.c_str(),
              metric == Metric::span_f1 ? "span-F1" : "accuracy", res.score, res.n);
  return 0;
}

int run_cluster(const std::string& config_path, const std::string& out) {
  RunConfig cfg = load_config(config_path);
  ModelState state = load_model(require_str(cfg, "model_in"));
  bool use_logits = cfg.get_bool("use_logits", false);
  RouterMatrix matrix = router_matrix_from_state(state, use_logits);

  std::vector<int> planted;
  if (cfg.has("suite_dir")) {
    Suite suite = load_suite(cfg.get_str("suite_dir", ""));
    if (suite.tasks.size() == state.task_names.size()) planted = suite.group_of;
  }
  int n_groups = 2;
  if (cfg.has("n_groups")) {
    n_groups = cfg.get_int("n_groups", 2);
  } else if (!planted.empty()) {
    n_groups = 0;
    for (int g : planted) n_groups = std::max(n_groups, g + 1);
  }

  ClusterResult res = cluster_routers(matrix, n_groups, use_logits);
  std::printf("dendrogram: %s\n", res.dendrogram.to_text(matrix.names).c_str());
  for (size_t t = 0; t < matrix.names.size(); ++t)
    std::printf("  %-16s group %d\n", matrix.names[t].c_str(), res.group_of[t]);
  if (!planted.empty()) {
    double ari = adjusted_rand_index(res.group_of, planted);
    std::printf("adjusted Rand index vs planted groups: %.4f\n", ari);
  }
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    if (!f) throw IoError("cannot write " + out);
    f << res.dendrogram.to_text(matrix.names) << "\n";
    for (size_t t = 0; t < matrix.names.size(); ++t)
      f << matrix.names[t] << "\t" << res.group_of[t] << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modular prompt pre-training and fine-tuning workbench"};
  app.require_subcommand(1);

  std::string config_path, out, paradigm, stage = "both";
  bool router_only = false;
  uint64_t seed = 0;
  bool has_seed = false;

  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", config_path, "run configuration file (key = value lines)");
    if (with_out) sub->add_option("--out", out, "output directory/file");
    sub->add_option("--seed", seed, "override the run seed")->each([&](const std::string&) {
      has_seed = true;
    });
  };

  CLI::App* gen = app.add_subcommand("gen-tasks", "generate a synthetic task suite");
  add_common(gen, true);
  CLI::App* pre = app.add_subcommand("pretrain", "multi-task pre-training of prompts + routers");
  add_common(pre, true);
  CLI::App* fin = app.add_subcommand("finetune", "two-stage fine-tuning on one task");
  add_common(fin, true);
  fin->add_option("--paradigm", paradigm, "gd or bbt")->check(CLI::IsMember({"gd", "bbt"}));
  fin->add_option("--stage", stage, "1, 2, or both")->check(CLI::IsMember({"1", "2", "both"}));
  fin->add_flag("--router-only", router_only, "run the router stage only (same as --stage 1)");
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint/adapter on a task");
  add_common(ev, false);
  CLI::App* cl = app.add_subcommand("cluster", "cluster per-task routers and report groups");
  add_common(cl, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_gen_tasks(config_path, out, seed, has_seed);
    if (pre->parsed()) return run_pretrain(config_path, out, seed, has_seed);
    if (fin->parsed())
      return run_finetune(config_path, out, paradigm, stage, router_only, seed, has_seed);
    if (ev->parsed()) return run_eval(config_path, seed, has_seed);
    if (cl->parsed()) return run_cluster(config_path, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 4;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

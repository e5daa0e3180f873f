#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mprompt/tape.hpp"
#include "mprompt/tasks.hpp"
#include "mprompt/train.hpp"

using namespace mprompt;
namespace fs = std::filesystem;

namespace {

Suite& tiny_suite() {
  static Suite suite = [] {
    SuiteConfig cfg;
    cfg.seed = 4;
    cfg.n_tasks = 4;   // two planted groups
    cfg.n_heldout = 1; // the one novel pair over two singles
    cfg.n_skills = 2;
    cfg.instances_per_task = 144;  // enough for 32+32 per label
    return generate_synthetic_suite(cfg);
  }();
  return suite;
}

EncoderConfig tiny_enc(bool shallow = false) {
  EncoderConfig cfg;
  cfg.n_layers = 3;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.max_seq = 64;
  cfg.prompt_len = 4;
  cfg.shallow = shallow;
  return cfg;
}

ModelState fresh_state(uint64_t seed = 33, bool shallow = false) {
  return make_initial_state(tiny_suite(), tiny_enc(shallow), 4, 3, 0.5f, seed);
}

// Flattened bitwise snapshot of every tensor in a model state.
std::map<std::string, std::vector<float>> snapshot(ModelState& st) {
  std::map<std::string, std::vector<float>> s;
  st.visit_shared([&](const std::string& n, Tensor& t) { s[n] = t.data; });
  for (size_t t = 0; t < st.routers.size(); ++t)
    for (size_t j = 0; j < st.routers[t].size(); ++j)
      s[ModelState::router_name(static_cast<int>(t), static_cast<int>(j))] =
          st.routers[t][j].w.data;
  return s;
}

ModelState& shared_pretrained() {
  static ModelState st = [] {
    ModelState s = fresh_state();
    PretrainConfig pc;
    pc.steps = 60;
    pc.batch = 8;
    pc.seed = 12;
    pc.log_every = 30;
    pretrain(s, tiny_suite(), pc, nullptr);
    return s;
  }();
  return st;
}

FinetuneConfig tiny_bbt(int budget = 60, int stage1 = 30) {
  FinetuneConfig cfg;
  cfg.paradigm = Paradigm::bbt;
  cfg.bbt_budget = budget;
  cfg.bbt_stage1 = stage1;
  cfg.seed = 3;
  return cfg;
}

FinetuneConfig tiny_gd(int e1 = 3, int e2 = 3) {
  FinetuneConfig cfg;
  cfg.paradigm = Paradigm::gd;
  cfg.gd_stage1_epochs = e1;
  cfg.gd_stage2_epochs = e2;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("initial model state has the right bank and router layout") {
  ModelState st = fresh_state();
  CHECK(st.n_inject() == 2);
  REQUIRE(st.banks.size() == 2);
  CHECK(st.banks[0].K == 4);
  CHECK(st.banks[0].d == 3);
  CHECK(st.banks[0].L == 4);
  CHECK(st.banks[0].D == 8);
  CHECK(st.banks[0].z.shape == std::vector<int>{4, 3});
  CHECK(st.banks[0].A.shape == std::vector<int>{4 * 8, 3});
  REQUIRE(st.routers.size() == 4);  // one router set per pre-training task
  REQUIRE(st.routers[0].size() == 2);
  // routers start at zero logits: inclusion probability one half
  for (const auto& task : st.routers)
    for (const auto& r : task)
      for (float w : r.w.data) CHECK(w == 0.0f);
  CHECK(st.enc_cfg.vocab > 0);  // fixed vocabulary wired in automatically
  CHECK(st.task_names.size() == 4);
  CHECK(st.task_names[0] == tiny_suite().tasks[0].name);
}

TEST_CASE("zero pre-training steps change nothing") {
  ModelState st = fresh_state();
  auto before = snapshot(st);
  PretrainConfig pc;
  pc.steps = 0;
  pretrain(st, tiny_suite(), pc, nullptr);
  CHECK(snapshot(st) == before);
}

TEST_CASE("pre-training is deterministic and seed-sensitive") {
  ModelState a = fresh_state();
  ModelState b = fresh_state();
  ModelState c = fresh_state();
  PretrainConfig pc;
  pc.steps = 10;
  pc.batch = 4;
  pc.seed = 5;
  pretrain(a, tiny_suite(), pc, nullptr);
  pretrain(b, tiny_suite(), pc, nullptr);
  CHECK(snapshot(a) == snapshot(b));
  pc.seed = 6;
  pretrain(c, tiny_suite(), pc, nullptr);
  CHECK(snapshot(a) != snapshot(c));
}

TEST_CASE("pre-training builds exactly one tape per step and lowers the loss") {
  ModelState st = fresh_state();
  TaskAdapter probe = pretrain_task_adapter(st, 0);
  double before = eval_loss(st, probe, {tiny_suite().data[0].begin(),
                                        tiny_suite().data[0].begin() + 32});
  PretrainConfig pc;
  pc.steps = 60;
  pc.batch = 8;
  pc.seed = 12;
  int64_t tapes0 = tapes_constructed();
  MetricsLog log;
  pretrain(st, tiny_suite(), pc, &log);
  CHECK(tapes_constructed() - tapes0 == 60);

  TaskAdapter after_adapter = pretrain_task_adapter(st, 0);
  double after = eval_loss(st, after_adapter, {tiny_suite().data[0].begin(),
                                               tiny_suite().data[0].begin() + 32});
  CHECK(after < before);
  CHECK(!log.lines().empty());
  // log lines carry the pretrain stage tag
  CHECK(log.lines().front().find("\tpretrain\t") != std::string::npos);
}

TEST_CASE("fast/slow grouping changes the router trajectory") {
  ModelState a = fresh_state();
  ModelState b = fresh_state();
  PretrainConfig pc;
  pc.steps = 10;
  pc.batch = 4;
  pc.seed = 9;
  pretrain(a, tiny_suite(), pc, nullptr);
  pc.fast_slow = false;
  pretrain(b, tiny_suite(), pc, nullptr);
  bool router_diff = false;
  for (size_t t = 0; t < a.routers.size() && !router_diff; ++t)
    for (size_t j = 0; j < a.routers[t].size() && !router_diff; ++j)
      router_diff = a.routers[t][j].w.data != b.routers[t][j].w.data;
  CHECK(router_diff);
}

TEST_CASE("evaluation is deterministic, bounded, and counts budgeted passes") {
  ModelState& st = shared_pretrained();
  TaskAdapter adapter = pretrain_task_adapter(st, 0);
  std::vector<MrcInstance> data(tiny_suite().data[0].begin(), tiny_suite().data[0].begin() + 40);
  ForwardCounter fc;
  EvalResult r1 = evaluate(st, adapter, data, tiny_suite().tasks[0], Metric::accuracy, &fc);
  CHECK(fc.count == 2);  // ceil(40 / 32) batches
  CHECK(r1.n == 40);
  CHECK(r1.score >= 0.0);
  CHECK(r1.score <= 1.0);
  EvalResult r2 = evaluate(st, adapter, data, tiny_suite().tasks[0], Metric::accuracy);
  CHECK(r1.score == r2.score);

  double loss = eval_loss(st, adapter, data, &fc);
  CHECK(fc.count == 4);
  CHECK(loss > 0.0);

  // evaluating against the wrong task's data is refused
  CHECK_THROWS_AS(evaluate(st, adapter, data, tiny_suite().tasks[1], Metric::accuracy),
                  ConfigError);
  CHECK_THROWS_AS(pretrain_task_adapter(st, 99), ConfigError);
}

TEST_CASE("adapter prompt composition is consistent across sources") {
  ModelState& st = shared_pretrained();
  TaskAdapter bank;
  bank.source = TaskAdapter::PromptSource::bank;
  bank.routers.resize(2);
  for (int j = 0; j < 2; ++j) {
    bank.routers[static_cast<size_t>(j)].layer_index = j;
    bank.routers[static_cast<size_t>(j)].w = Tensor({4}, {1.0f, -1.0f, 0.5f, -2.0f});
  }
  auto bank_prompts = adapter_prompts(st, bank);
  REQUIRE(bank_prompts.size() == 2);
  CHECK(bank_prompts[0].shape == std::vector<int>{4, 8});

  // same active set {0, 2} through the fused path with zero offset
  TaskAdapter fused = bank;
  fused.source = TaskAdapter::PromptSource::fused;
  fused.active = {{0, 2}, {0, 2}};
  fused.fused_offset = {Tensor({3}), Tensor({3})};
  auto fused_prompts = adapter_prompts(st, fused);
  for (int j = 0; j < 2; ++j)
    for (int64_t i = 0; i < bank_prompts[static_cast<size_t>(j)].size(); ++i)
      CHECK(fused_prompts[static_cast<size_t>(j)][i] ==
            doctest::Approx(bank_prompts[static_cast<size_t>(j)][i]).epsilon(1e-5));

  // and through materialized per-prompt tensors
  TaskAdapter mat = bank;
  mat.source = TaskAdapter::PromptSource::materialized;
  mat.active = {{0, 2}, {0, 2}};
  mat.mat_prompts.resize(2);
  for (int j = 0; j < 2; ++j)
    for (int k : {0, 2})
      mat.mat_prompts[static_cast<size_t>(j)].push_back(materialize_intrinsic(
          st.banks[static_cast<size_t>(j)].z_k(k), st.banks[static_cast<size_t>(j)].A,
          st.banks[static_cast<size_t>(j)].L, st.banks[static_cast<size_t>(j)].D));
  auto mat_prompts = adapter_prompts(st, mat);
  for (int j = 0; j < 2; ++j)
    for (int64_t i = 0; i < bank_prompts[static_cast<size_t>(j)].size(); ++i)
      CHECK(mat_prompts[static_cast<size_t>(j)][i] ==
            doctest::Approx(bank_prompts[static_cast<size_t>(j)][i]).epsilon(1e-5));

  // structural guards
  TaskAdapter wrong = bank;
  wrong.routers.pop_back();
  CHECK_THROWS_AS(adapter_prompts(st, wrong), ShapeError);
  TaskAdapter no_mats = bank;
  no_mats.source = TaskAdapter::PromptSource::materialized;
  CHECK_THROWS_AS(adapter_prompts(st, no_mats), ShapeError);
}

TEST_CASE("all-closed routers fall back to the single largest logit") {
  TaskAdapter adapter;
  adapter.routers.resize(2);
  adapter.routers[0].w = Tensor({4}, {-1.0f, -0.5f, -2.0f, -0.75f});
  adapter.routers[1].w = Tensor({4}, {0.5f, -0.5f, 1.5f, 0.1f});
  auto active = active_sets_with_fallback(adapter);
  REQUIRE(active.size() == 2);
  CHECK(active[0] == std::vector<int>{1});        // fallback: argmax logit
  CHECK(active[1] == std::vector<int>{0, 2, 3});  // ordinary binarization
}

TEST_CASE("black-box fine-tuning respects its budget and never builds a tape") {
  ModelState& st = shared_pretrained();
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  FinetuneConfig cfg = tiny_bbt(60, 30);

  int64_t tapes0 = tapes_constructed();
  MetricsLog log;
  StageResult s1 = finetune_router_stage(st, spec, split, cfg, &log);
  StageResult s2 = finetune_prompt_stage(st, s1, spec, split, cfg, &log);
  CHECK(tapes_constructed() == tapes0);  // the black-box path is gradient-free

  CHECK(s1.forwards > 0);
  CHECK(s1.forwards <= 30);
  CHECK(s1.forwards + s2.forwards <= 60);
  CHECK(s1.best_dev >= 0.0);
  CHECK(s1.best_dev <= 1.0);
  // stage II starts from the stage-I incumbent and never falls below it; the
  // fused adapter only replaces it on a strict dev improvement
  CHECK(s2.best_dev >= s1.best_dev);
  CHECK(s1.adapter.source == TaskAdapter::PromptSource::bank);
  if (s2.best_dev > s1.best_dev)
    CHECK(s2.adapter.source == TaskAdapter::PromptSource::fused);

  bool has_b1 = false, has_b2 = false;
  for (const auto& line : log.lines()) {
    has_b1 = has_b1 || line.find("\tbbt1\t") != std::string::npos;
    has_b2 = has_b2 || line.find("\tbbt2\t") != std::string::npos;
  }
  CHECK(has_b1);
}

TEST_CASE("black-box fine-tuning is deterministic in its seed") {
  ModelState& st = shared_pretrained();
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  FinetuneConfig cfg = tiny_bbt(40, 20);
  StageResult a = finetune_router_stage(st, spec, split, cfg, nullptr);
  StageResult b = finetune_router_stage(st, spec, split, cfg, nullptr);
  CHECK(a.best_dev == b.best_dev);
  CHECK(a.forwards == b.forwards);
  for (size_t j = 0; j < a.adapter.routers.size(); ++j)
    CHECK(a.adapter.routers[j].w.data == b.adapter.routers[j].w.data);
  cfg.seed = 77;
  StageResult c = finetune_router_stage(st, spec, split, cfg, nullptr);
  bool differs = a.best_dev != c.best_dev;
  for (size_t j = 0; j < a.adapter.routers.size() && !differs; ++j)
    differs = a.adapter.routers[j].w.data != c.adapter.routers[j].w.data;
  CHECK(differs);
}

TEST_CASE("an exhausted budget leaves stage II as a pass-through") {
  ModelState& st = shared_pretrained();
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  FinetuneConfig cfg = tiny_bbt(30, 30);  // stage I consumes everything
  StageResult s1 = finetune_router_stage(st, spec, split, cfg, nullptr);
  StageResult s2 = finetune_prompt_stage(st, s1, spec, split, cfg, nullptr);
  CHECK(s2.forwards == 0);
  CHECK(s2.best_dev == s1.best_dev);
}

TEST_CASE("gradient fine-tuning freezes the pre-trained model") {
  ModelState& st = shared_pretrained();
  auto before = snapshot(st);
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  FinetuneConfig cfg = tiny_gd();
  MetricsLog log;
  StageResult s1 = finetune_router_stage(st, spec, split, cfg, &log);
  StageResult s2 = finetune_prompt_stage(st, s1, spec, split, cfg, &log);
  CHECK(snapshot(st) == before);  // byte-identical after both stages

  CHECK(s1.best_dev >= 0.0);
  CHECK(s2.best_dev >= s1.best_dev);
  if (s2.best_dev > s1.best_dev)
    CHECK(s2.adapter.source == TaskAdapter::PromptSource::materialized);
  bool has_g1 = false, has_g2 = false;
  for (const auto& line : log.lines()) {
    has_g1 = has_g1 || line.find("\tgd1\t") != std::string::npos;
    has_g2 = has_g2 || line.find("\tgd2\t") != std::string::npos;
  }
  CHECK(has_g1);
  CHECK(has_g2);
}

TEST_CASE("zero-epoch gradient stage II returns the stage-I incumbent") {
  ModelState& st = shared_pretrained();
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  StageResult s1 = finetune_router_stage(st, spec, split, tiny_gd(2, 0), nullptr);
  StageResult s2 = finetune_prompt_stage(st, s1, spec, split, tiny_gd(2, 0), nullptr);
  CHECK(s2.best_dev == s1.best_dev);
}

TEST_CASE("gradient fine-tuning is deterministic in its seed") {
  ModelState& st = shared_pretrained();
  const TaskSpec& spec = tiny_suite().tasks[2];
  auto split = build_fewshot_split(spec, tiny_suite().data[2], 2);
  StageResult a = finetune_router_stage(st, spec, split, tiny_gd(2, 0), nullptr);
  StageResult b = finetune_router_stage(st, spec, split, tiny_gd(2, 0), nullptr);
  CHECK(a.best_dev == b.best_dev);
  for (size_t j = 0; j < a.adapter.routers.size(); ++j)
    CHECK(a.adapter.routers[j].w.data == b.adapter.routers[j].w.data);
}

TEST_CASE("fine-tune dispatchers validate their inputs") {
  ModelState& st = shared_pretrained();
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  FewShotSplit empty;
  CHECK_THROWS_AS(finetune_router_stage(st, spec, empty, tiny_bbt(), nullptr), ConfigError);
  FinetuneConfig bad_tau = tiny_bbt();
  bad_tau.tau = 0.0f;
  CHECK_THROWS_AS(finetune_router_stage(st, spec, split, bad_tau, nullptr), ConfigError);
  StageResult no_stage1;
  CHECK_THROWS_AS(finetune_prompt_stage(st, no_stage1, spec, split, tiny_bbt(), nullptr),
                  ConfigError);
}

TEST_CASE("adapters round-trip through their checkpoint directory") {
  ModelState& st = shared_pretrained();
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  fs::path base = fs::temp_directory_path() / "mprompt_test_adapter";
  fs::remove_all(base);

  SUBCASE("bank source") {
    TaskAdapter adapter = pretrain_task_adapter(st, 1);
    save_adapter(adapter, "some-task", 0.75, 1.25, 321, (base / "bank").string());
    LoadedAdapter back = load_adapter((base / "bank").string());
    CHECK(back.task == "some-task");
    CHECK(back.best_dev == 0.75);
    CHECK(back.best_train_loss == 1.25);
    CHECK(back.forwards == 321);
    CHECK(back.adapter.source == TaskAdapter::PromptSource::bank);
    REQUIRE(back.adapter.routers.size() == adapter.routers.size());
    for (size_t j = 0; j < adapter.routers.size(); ++j) {
      CHECK(back.adapter.routers[j].w.data == adapter.routers[j].w.data);
      CHECK(back.adapter.routers[j].layer_index == adapter.routers[j].layer_index);
    }
  }
  SUBCASE("fused source survives with offsets and active sets") {
    TaskAdapter fused = pretrain_task_adapter(st, 0);
    fused.source = TaskAdapter::PromptSource::fused;
    fused.active = active_sets_with_fallback(fused);
    Rng orng(91);
    for (int j = 0; j < 2; ++j) {
      Tensor off({3});
      for (auto& v : off.data) v = static_cast<float>(orng.normal()) * 0.1f;
      fused.fused_offset.push_back(std::move(off));
    }
    save_adapter(fused, spec.name, 0.5, 0.9, 77, (base / "fused").string());
    LoadedAdapter back = load_adapter((base / "fused").string());
    CHECK(back.adapter.source == TaskAdapter::PromptSource::fused);
    CHECK(back.best_dev == 0.5);
    CHECK(back.best_train_loss == 0.9);
    REQUIRE(back.adapter.fused_offset.size() == fused.fused_offset.size());
    for (size_t j = 0; j < fused.fused_offset.size(); ++j) {
      CHECK(back.adapter.fused_offset[j].data == fused.fused_offset[j].data);
      CHECK(back.adapter.active[j] == fused.active[j]);
    }
    // the loaded adapter composes identical prompts
    auto pa = adapter_prompts(st, fused);
    auto pb = adapter_prompts(st, back.adapter);
    for (size_t j = 0; j < pa.size(); ++j) CHECK(pa[j].data == pb[j].data);
  }
  SUBCASE("materialized source survives with per-prompt tensors") {
    TaskAdapter mat = pretrain_task_adapter(st, 1);
    mat.source = TaskAdapter::PromptSource::materialized;
    mat.active = active_sets_with_fallback(mat);
    mat.mat_prompts.resize(2);
    for (size_t j = 0; j < 2; ++j)
      for (int k : mat.active[j])
        mat.mat_prompts[j].push_back(materialize_intrinsic(st.banks[j].z_k(k), st.banks[j].A,
                                                           st.banks[j].L, st.banks[j].D));
    save_adapter(mat, spec.name, 0.25, 1.5, 99, (base / "mat").string());
    LoadedAdapter back = load_adapter((base / "mat").string());
    CHECK(back.adapter.source == TaskAdapter::PromptSource::materialized);
    REQUIRE(back.adapter.mat_prompts.size() == mat.mat_prompts.size());
    for (size_t j = 0; j < mat.mat_prompts.size(); ++j) {
      REQUIRE(back.adapter.mat_prompts[j].size() == mat.mat_prompts[j].size());
      for (size_t k = 0; k < mat.mat_prompts[j].size(); ++k)
        CHECK(back.adapter.mat_prompts[j][k].data == mat.mat_prompts[j][k].data);
    }
    auto pa = adapter_prompts(st, mat);
    auto pb = adapter_prompts(st, back.adapter);
    for (size_t j = 0; j < pa.size(); ++j) CHECK(pa[j].data == pb[j].data);
  }
  SUBCASE("a model checkpoint is not an adapter") {
    save_model(st, (base / "model").string());
    CHECK_THROWS_AS(load_adapter((base / "model").string()), FormatError);
  }
  fs::remove_all(base);
}

TEST_CASE("metrics logs are tab-separated with a fixed header") {
  MetricsLog log;
  log.log(5, "pretrain", "taskx", 0.125, 0.5);
  fs::path p = fs::temp_directory_path() / "mprompt_test_metrics.tsv";
  log.write(p.string());
  std::ifstream f(p);
  std::string header, line;
  std::getline(f, header);
  std::getline(f, line);
  CHECK(header == "step\tstage\ttask\tloss\tdev_score");
  CHECK(line == "5\tpretrain\ttaskx\t0.125\t0.5");
  fs::remove(p);
}

TEST_CASE("shallow variant trains with a single injection slot") {
  ModelState st = fresh_state(44, /*shallow=*/true);
  CHECK(st.n_inject() == 1);
  REQUIRE(st.banks.size() == 1);
  PretrainConfig pc = PretrainConfig::defaults_for(true);
  pc.steps = 5;
  pc.batch = 4;
  pc.seed = 2;
  pretrain(st, tiny_suite(), pc, nullptr);
  CHECK(pc.shallow);
  CHECK_FALSE(pc.fast_slow);          // shallow default: one lr for everything
  CHECK(pc.router_lr == 1e-3f);
  CHECK(pc.prompt_lr == 1e-3f);
  const TaskSpec& spec = tiny_suite().heldout[0];
  auto split = build_fewshot_split(spec, tiny_suite().heldout_data[0], 2);
  StageResult s1 = finetune_router_stage(st, spec, split, tiny_bbt(40, 20), nullptr);
  CHECK(s1.adapter.routers.size() == 1);
  StageResult g1 = finetune_router_stage(st, spec, split, tiny_gd(2, 0), nullptr);
  CHECK(g1.adapter.routers.size() == 1);
}

TEST_CASE("pre-training configs are validated against the model") {
  ModelState st = fresh_state();
  PretrainConfig pc;
  pc.steps = -1;
  CHECK_THROWS_AS(pretrain(st, tiny_suite(), pc, nullptr), ConfigError);
  pc = PretrainConfig{};
  pc.tau = 0.0f;
  CHECK_THROWS_AS(pretrain(st, tiny_suite(), pc, nullptr), ConfigError);
}

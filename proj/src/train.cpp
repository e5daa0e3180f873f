#include "mprompt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "mprompt/adam.hpp"
#include "mprompt/analysis.hpp"
#include "mprompt/cmaes.hpp"
#include "mprompt/gp_ucb.hpp"

namespace mprompt {

namespace {

constexpr int kEvalBatch = 32;

Metric metric_for(const TaskSpec& spec) {
  return spec.kind == TaskKind::extractive ? Metric::span_f1 : Metric::accuracy;
}

struct BuiltBatch {
  BatchInput in;
  Tensor start_target, end_target, loss_mask;  // (B, L+T)
};

// Pads a batch of instances and plants one-hot span targets at prompt-shifted
// coordinates. The loss mask covers real text positions only.
BuiltBatch make_batch(const std::vector<const MrcInstance*>& items, int L, int vocab,
                      int max_seq) {
  if (items.empty()) throw Error("empty batch");
  int B = static_cast<int>(items.size());
  int T = 0;
  for (const auto* m : items) T = std::max(T, m->text_len());
  if (L + T > max_seq)
    throw ShapeError("batch needs " + std::to_string(L + T) + " positions but max_seq is " +
                     std::to_string(max_seq));
  BuiltBatch bb;
  bb.in.B = B;
  bb.in.T = T;
  bb.in.ids.assign(static_cast<size_t>(B) * T, kPadId);
  bb.in.len.resize(static_cast<size_t>(B));
  int F = L + T;
  bb.start_target = Tensor::zeros({B, F});
  bb.end_target = Tensor::zeros({B, F});
  bb.loss_mask = Tensor::zeros({B, F});
  for (int b = 0; b < B; ++b) {
    const MrcInstance& m = *items[static_cast<size_t>(b)];
    int n = m.text_len();
    bb.in.len[static_cast<size_t>(b)] = n;
    for (size_t i = 0; i < m.context.size(); ++i) {
      int id = m.context[i];
      if (id < 0 || id >= vocab) throw ShapeError("token id outside vocabulary");
      bb.in.ids[static_cast<size_t>(b) * T + i] = id;
    }
    for (size_t i = 0; i < m.query.size(); ++i) {
      int id = m.query[i];
      if (id < 0 || id >= vocab) throw ShapeError("token id outside vocabulary");
      bb.in.ids[static_cast<size_t>(b) * T + m.context.size() + i] = id;
    }
    if (m.gold_start < 0 || m.gold_end < m.gold_start || m.gold_end >= n)
      throw ShapeError("gold span outside the text region");
    bb.start_target.at(b, L + m.gold_start) = 1.0f;
    bb.end_target.at(b, L + m.gold_end) = 1.0f;
    for (int i = 0; i < n; ++i) bb.loss_mask.at(b, L + i) = 1.0f;
  }
  return bb;
}

int text_token_at(const MrcInstance& m, int pos) {
  if (pos < static_cast<int>(m.context.size())) return m.context[static_cast<size_t>(pos)];
  return m.query[static_cast<size_t>(pos) - m.context.size()];
}

std::string format_metric_line(int64_t step, const std::string& stage, const std::string& task,
                               double loss, double dev) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld\t%s\t%s\t%.6g\t%.6g", static_cast<long long>(step),
                stage.c_str(), task.c_str(), loss, dev);
  return buf;
}

}  // namespace

PretrainConfig PretrainConfig::defaults_for(bool shallow_variant) {
  PretrainConfig c;
  c.shallow = shallow_variant;
  if (shallow_variant) {
    // single learning rate, no fast/slow split
    c.router_lr = 1e-3f;
    c.prompt_lr = 1e-3f;
    c.encoder_lr = 1e-3f;
    c.fast_slow = false;
  }
  return c;
}

void MetricsLog::log(int64_t step, const std::string& stage, const std::string& task, double loss,
                     double dev_acc) {
  lines_.push_back(format_metric_line(step, stage, task, loss, dev_acc));
}

void MetricsLog::write(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write metrics file " + path);
  f << "step\tstage\ttask\tloss\tdev_score\n";
  for (const auto& line : lines_) f << line << '\n';
  f.close();
  if (!f) throw IoError("failed writing metrics file " + path);
}

ModelState make_initial_state(const Suite& suite, const EncoderConfig& enc_cfg, int K,
                              int intrinsic_dim, float tau, uint64_t seed) {
  EncoderConfig cfg = enc_cfg;
  if (cfg.vocab == 0) cfg.vocab = Vocab::standard().size();
  std::vector<std::string> names;
  for (const auto& t : suite.tasks) names.push_back(t.name);
  return ModelState::make(cfg, K, intrinsic_dim, tau, names, seed);
}

std::vector<std::vector<int>> active_sets_with_fallback(const TaskAdapter& adapter) {
  std::vector<std::vector<int>> sets;
  for (const auto& router : adapter.routers) {
    std::vector<int> mask = binarize_router(router);
    std::vector<int> active;
    for (int k = 0; k < static_cast<int>(mask.size()); ++k)
      if (mask[static_cast<size_t>(k)]) active.push_back(k);
    if (active.empty()) {
      int arg = 0;
      for (int k = 1; k < router.K(); ++k)
        if (router.w[k] > router.w[arg]) arg = k;
      active.push_back(arg);
    }
    sets.push_back(std::move(active));
  }
  return sets;
}

std::vector<Tensor> adapter_prompts(const ModelState& state, const TaskAdapter& adapter) {
  int nj = state.n_inject();
  if (static_cast<int>(adapter.routers.size()) != nj)
    throw ShapeError("adapter holds " + std::to_string(adapter.routers.size()) +
                     " routers for " + std::to_string(nj) + " injection layers");
  std::vector<Tensor> prompts;
  switch (adapter.source) {
    case TaskAdapter::PromptSource::bank: {
      for (int j = 0; j < nj; ++j)
        prompts.push_back(compose_prompt(state.banks[static_cast<size_t>(j)],
                                         binarized_gates(adapter.routers[static_cast<size_t>(j)])));
      break;
    }
    case TaskAdapter::PromptSource::materialized: {
      if (static_cast<int>(adapter.mat_prompts.size()) != nj ||
          static_cast<int>(adapter.active.size()) != nj)
        throw ShapeError("materialized adapter is missing per-layer prompts");
      for (int j = 0; j < nj; ++j) {
        const PromptBank& bank = state.banks[static_cast<size_t>(j)];
        Tensor acc = Tensor::zeros({bank.L, bank.D});
        const auto& mats = adapter.mat_prompts[static_cast<size_t>(j)];
        for (const Tensor& p : mats) {
          if (p.shape != acc.shape)
            throw ShapeError("materialized prompt has shape " + shape_str(p.shape));
          for (int64_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
        }
        Tensor out = kernels::scale(acc, 1.0f / static_cast<float>(bank.K));
        require_finite(out, "adapter_prompts");
        prompts.push_back(std::move(out));
      }
      break;
    }
    case TaskAdapter::PromptSource::fused: {
      if (static_cast<int>(adapter.fused_offset.size()) != nj ||
          static_cast<int>(adapter.active.size()) != nj)
        throw ShapeError("fused adapter is missing per-layer offsets");
      for (int j = 0; j < nj; ++j) {
        const PromptBank& bank = state.banks[static_cast<size_t>(j)];
        Tensor zf = Tensor::zeros({bank.d});
        for (int k : adapter.active[static_cast<size_t>(j)]) {
          if (k < 0 || k >= bank.K) throw ShapeError("active prompt id out of range");
          for (int i = 0; i < bank.d; ++i) zf[i] += bank.z.at(k, i);
        }
        for (int i = 0; i < bank.d; ++i)
          zf[i] = zf[i] / static_cast<float>(bank.K) +
                  adapter.fused_offset[static_cast<size_t>(j)][i];
        Tensor out = materialize_intrinsic(zf, bank.A, bank.L, bank.D);
        require_finite(out, "adapter_prompts");
        prompts.push_back(std::move(out));
      }
      break;
    }
  }
  return prompts;
}

TaskAdapter pretrain_task_adapter(const ModelState& state, int task_index) {
  if (task_index < 0 || task_index >= static_cast<int>(state.routers.size()))
    throw ConfigError("task index " + std::to_string(task_index) + " outside pre-trained set");
  TaskAdapter a;
  a.source = TaskAdapter::PromptSource::bank;
  a.routers = state.routers[static_cast<size_t>(task_index)];
  return a;
}

void pretrain(ModelState& state, const Suite& suite, const PretrainConfig& cfg,
              MetricsLog* metrics) {
  if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("bad pre-training step/batch setting");
  if (!(cfg.tau > 0)) throw ConfigError("temperature must be positive");
  if (state.routers.size() != suite.tasks.size())
    throw ConfigError("model was built for " + std::to_string(state.routers.size()) +
                      " tasks but the suite has " + std::to_string(suite.tasks.size()));
  int nj = state.n_inject();
  int L = state.enc_cfg.prompt_len;
  int D = state.enc_cfg.hidden;

  Rng data_rng(mix_seed(cfg.seed, {0xA1}));
  Rng gate_rng(mix_seed(cfg.seed, {0xA2}));
  Adam opt;

  auto lr_of = [&](const std::string& name) -> double {
    if (name.rfind("router.", 0) == 0)
      return cfg.fast_slow ? cfg.router_lr : cfg.prompt_lr;
    if (name.rfind("bank.", 0) == 0 || name.rfind("head.", 0) == 0) return cfg.prompt_lr;
    return cfg.encoder_lr;
  };

  for (int step = 0; step < cfg.steps; ++step) {
    auto [task, items] = next_pretrain_batch(suite, cfg.batch, data_rng);
    BuiltBatch bb = make_batch(items, L, state.enc_cfg.vocab, state.enc_cfg.max_seq);

    Tape tape;
    TapedCtx<float> cx{tape};
    std::vector<Var> prompts;
    for (int j = 0; j < nj; ++j) {
      auto& bank = state.banks[static_cast<size_t>(j)];
      std::vector<float> u(static_cast<size_t>(state.K));
      for (auto& v : u) v = static_cast<float>(gate_rng.uniform_open());
      Var router = cx.param(ModelState::router_name(task, j),
                            state.routers[static_cast<size_t>(task)][static_cast<size_t>(j)].w);
      Var gates = relaxed_gates<float>(cx, router, u, cfg.tau);
      Var z = cx.param("bank.l" + std::to_string(j) + ".z", bank.z);
      Var A = cx.param("bank.l" + std::to_string(j) + ".A", bank.A);
      prompts.push_back(compose_prompt_ctx<float>(cx, z, A, gates, state.K, L, D));
    }
    auto out = encode_mrc(cx, state.enc, bb.in, prompts);
    Var loss = cx.add(cx.masked_bce(out.start, bb.start_target, bb.loss_mask),
                      cx.masked_bce(out.end, bb.end_target, bb.loss_mask));
    double loss_val = static_cast<double>(tape.value(loss)[0]);
    auto grads = tape.backward(loss);

    std::vector<ParamRef> params;
    state.visit_shared([&](const std::string& name, Tensor& t) { params.push_back({name, &t}); });
    for (int j = 0; j < nj; ++j)
      params.push_back({ModelState::router_name(task, j),
                        &state.routers[static_cast<size_t>(task)][static_cast<size_t>(j)].w});
    opt.step(params, grads, lr_of);

    if (metrics && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      metrics->log(step, "pretrain", suite.tasks[static_cast<size_t>(task)].name, loss_val, -1.0);
  }
}

EvalResult evaluate(const ModelState& state, const TaskAdapter& adapter,
                    const std::vector<MrcInstance>& data, const TaskSpec& spec, Metric metric,
                    ForwardCounter* fc) {
  if (data.empty()) throw Error("evaluate: empty data");
  if (data.front().task_id != spec.task_id)
    throw ConfigError("evaluating task " + spec.name + " against data of task " +
                      std::to_string(data.front().task_id));
  std::vector<Tensor> prompts = adapter_prompts(state, adapter);
  int L = state.enc_cfg.prompt_len;
  EvalCtx<float> cx;
  double score_sum = 0.0;
  for (size_t off = 0; off < data.size(); off += kEvalBatch) {
    size_t hi = std::min(data.size(), off + kEvalBatch);
    std::vector<const MrcInstance*> items;
    for (size_t i = off; i < hi; ++i) items.push_back(&data[i]);
    BuiltBatch bb = make_batch(items, L, state.enc_cfg.vocab, state.enc_cfg.max_seq);
    auto out = encode_mrc(cx, state.enc, bb.in, prompts);
    if (fc) ++fc->count;
    int F = L + bb.in.T;
    for (int b = 0; b < bb.in.B; ++b) {
      const MrcInstance& m = *items[static_cast<size_t>(b)];
      const float* srow = out.start.data.data() + static_cast<size_t>(b) * F;
      const float* erow = out.end.data.data() + static_cast<size_t>(b) * F;
      int pick = extract_span(srow, erow, F, m.candidates, L);
      auto [ps, pe] = m.candidates[static_cast<size_t>(pick)];
      if (metric == Metric::accuracy) {
        score_sum += (ps == m.gold_start && pe == m.gold_end) ? 1.0 : 0.0;
      } else {
        std::vector<int> pred, gold;
        for (int p = ps; p <= pe; ++p) pred.push_back(text_token_at(m, p));
        for (int p = m.gold_start; p <= m.gold_end; ++p) gold.push_back(text_token_at(m, p));
        score_sum += span_f1(pred, gold);
      }
    }
  }
  return {score_sum / static_cast<double>(data.size()), static_cast<int>(data.size())};
}

double eval_loss(const ModelState& state, const TaskAdapter& adapter,
                 const std::vector<MrcInstance>& data, ForwardCounter* fc) {
  if (data.empty()) throw Error("eval_loss: empty data");
  std::vector<Tensor> prompts = adapter_prompts(state, adapter);
  int L = state.enc_cfg.prompt_len;
  EvalCtx<float> cx;
  double weighted = 0.0;
  for (size_t off = 0; off < data.size(); off += kEvalBatch) {
    size_t hi = std::min(data.size(), off + kEvalBatch);
    std::vector<const MrcInstance*> items;
    for (size_t i = off; i < hi; ++i) items.push_back(&data[i]);
    BuiltBatch bb = make_batch(items, L, state.enc_cfg.vocab, state.enc_cfg.max_seq);
    auto out = encode_mrc(cx, state.enc, bb.in, prompts);
    if (fc) ++fc->count;
    Tensor l = cx.add(cx.masked_bce(out.start, bb.start_target, bb.loss_mask),
                      cx.masked_bce(out.end, bb.end_target, bb.loss_mask));
    weighted += static_cast<double>(l[0]) * static_cast<double>(bb.in.B);
  }
  return weighted / static_cast<double>(data.size());
}

namespace {

// Cost (in budgeted forwards) of one pass over `n` instances.
int64_t pass_cost(size_t n) {
  return static_cast<int64_t>((n + kEvalBatch - 1) / kEvalBatch);
}

TaskAdapter random_router_adapter(const ModelState& state, Rng& rng) {
  TaskAdapter a;
  a.source = TaskAdapter::PromptSource::bank;
  for (int j = 0; j < state.n_inject(); ++j) {
    RouterLogits r;
    r.layer_index = state.enc_cfg.inject_layer(j);
    r.w = Tensor::zeros({state.K});
    for (int k = 0; k < state.K; ++k)
      r.w[k] = static_cast<float>(rng.normal()) * 0.5f;  // N(0, 0.5^2)
    a.routers.push_back(std::move(r));
  }
  return a;
}

StageResult gd_router_stage(const ModelState& state, const TaskSpec& spec,
                            const FewShotSplit& split, const FinetuneConfig& cfg,
                            MetricsLog* metrics) {
  Rng init_rng(mix_seed(cfg.seed, {0xB1, static_cast<uint64_t>(spec.task_id)}));
  Rng gate_rng(mix_seed(cfg.seed, {0xB2, static_cast<uint64_t>(spec.task_id)}));
  TaskAdapter adapter = random_router_adapter(state, init_rng);
  int nj = state.n_inject();
  int L = state.enc_cfg.prompt_len;
  int D = state.enc_cfg.hidden;
  Metric metric = metric_for(spec);
  float lr = cfg.resolved_gd1_lr(state.enc_cfg.shallow);

  std::vector<const MrcInstance*> train_items;
  for (const auto& m : split.train) train_items.push_back(&m);
  BuiltBatch bb = make_batch(train_items, L, state.enc_cfg.vocab, state.enc_cfg.max_seq);

  StageResult res;
  res.adapter = adapter;
  res.best_dev = evaluate(state, adapter, split.dev, spec, metric).score;
  Adam opt;
  for (int epoch = 0; epoch < cfg.gd_stage1_epochs; ++epoch) {
    Tape tape;
    TapedCtx<float> cx{tape};
    cx.trainable = [](const std::string& n) { return n.rfind("adapter.", 0) == 0; };
    std::vector<Var> prompts;
    for (int j = 0; j < nj; ++j) {
      const auto& bank = state.banks[static_cast<size_t>(j)];
      std::vector<float> u(static_cast<size_t>(state.K));
      for (auto& v : u) v = static_cast<float>(gate_rng.uniform_open());
      Var router = cx.param("adapter.router.l" + std::to_string(j),
                            adapter.routers[static_cast<size_t>(j)].w);
      Var gates = relaxed_gates<float>(cx, router, u, cfg.tau);
      Var z = cx.param("bank.l" + std::to_string(j) + ".z", bank.z);
      Var A = cx.param("bank.l" + std::to_string(j) + ".A", bank.A);
      prompts.push_back(compose_prompt_ctx<float>(cx, z, A, gates, state.K, L, D));
    }
    auto out = encode_mrc(cx, state.enc, bb.in, prompts);
    Var loss = cx.add(cx.masked_bce(out.start, bb.start_target, bb.loss_mask),
                      cx.masked_bce(out.end, bb.end_target, bb.loss_mask));
    double loss_val = static_cast<double>(tape.value(loss)[0]);
    res.best_train_loss = std::min(res.best_train_loss, loss_val);
    auto grads = tape.backward(loss);
    std::vector<ParamRef> params;
    for (int j = 0; j < nj; ++j)
      params.push_back({"adapter.router.l" + std::to_string(j),
                        &adapter.routers[static_cast<size_t>(j)].w});
    opt.step(params, grads, [&](const std::string&) { return static_cast<double>(lr); });

    double dev = evaluate(state, adapter, split.dev, spec, metric).score;
    if (dev > res.best_dev) {
      res.best_dev = dev;
      res.adapter = adapter;
    }
    if (metrics) metrics->log(epoch, "gd1", spec.name, loss_val, dev);
  }
  return res;
}

StageResult gd_prompt_stage(const ModelState& state, const StageResult& stage1,
                            const TaskSpec& spec, const FewShotSplit& split,
                            const FinetuneConfig& cfg, MetricsLog* metrics) {
  int nj = state.n_inject();
  int L = state.enc_cfg.prompt_len;
  Metric metric = metric_for(spec);
  float lr = cfg.resolved_gd2_lr(state.enc_cfg.shallow);

  TaskAdapter adapter = stage1.adapter;
  adapter.source = TaskAdapter::PromptSource::materialized;
  adapter.active = active_sets_with_fallback(adapter);
  adapter.mat_prompts.assign(static_cast<size_t>(nj), {});
  for (int j = 0; j < nj; ++j) {
    const auto& bank = state.banks[static_cast<size_t>(j)];
    for (int k : adapter.active[static_cast<size_t>(j)])
      adapter.mat_prompts[static_cast<size_t>(j)].push_back(
          materialize_intrinsic(bank.z_k(k), bank.A, bank.L, bank.D));
  }

  std::vector<const MrcInstance*> train_items;
  for (const auto& m : split.train) train_items.push_back(&m);
  BuiltBatch bb = make_batch(train_items, L, state.enc_cfg.vocab, state.enc_cfg.max_seq);

  // Carried incumbent: stage II starts from the stage-I result and only
  // replaces it on a strict dev improvement, so best_dev never regresses.
  StageResult res;
  res.adapter = stage1.adapter;
  res.best_dev = stage1.best_dev;
  res.best_train_loss = stage1.best_train_loss;
  {
    double dev0 = evaluate(state, adapter, split.dev, spec, metric).score;
    if (dev0 > res.best_dev) {
      res.best_dev = dev0;
      res.adapter = adapter;
    }
  }

  Adam opt;
  for (int epoch = 0; epoch < cfg.gd_stage2_epochs; ++epoch) {
    Tape tape;
    TapedCtx<float> cx{tape};
    cx.trainable = [](const std::string& n) { return n.rfind("adapter.", 0) == 0; };
    std::vector<Var> prompts;
    for (int j = 0; j < nj; ++j) {
      const auto& bank = state.banks[static_cast<size_t>(j)];
      Var acc;
      const auto& mats = adapter.mat_prompts[static_cast<size_t>(j)];
      for (size_t c = 0; c < mats.size(); ++c) {
        Var p = cx.param("adapter.prompt.l" + std::to_string(j) + ".k" + std::to_string(c),
                         mats[c]);
        acc = c == 0 ? p : cx.add(acc, p);
      }
      prompts.push_back(cx.scale(acc, 1.0f / static_cast<float>(bank.K)));
    }
    auto out = encode_mrc(cx, state.enc, bb.in, prompts);
    Var loss = cx.add(cx.masked_bce(out.start, bb.start_target, bb.loss_mask),
                      cx.masked_bce(out.end, bb.end_target, bb.loss_mask));
    double loss_val = static_cast<double>(tape.value(loss)[0]);
    res.best_train_loss = std::min(res.best_train_loss, loss_val);
    auto grads = tape.backward(loss);
    std::vector<ParamRef> params;
    for (int j = 0; j < nj; ++j)
      for (size_t c = 0; c < adapter.mat_prompts[static_cast<size_t>(j)].size(); ++c)
        params.push_back({"adapter.prompt.l" + std::to_string(j) + ".k" + std::to_string(c),
                          &adapter.mat_prompts[static_cast<size_t>(j)][c]});
    opt.step(params, grads, [&](const std::string&) { return static_cast<double>(lr); });

    double dev = evaluate(state, adapter, split.dev, spec, metric).score;
    if (dev > res.best_dev) {
      res.best_dev = dev;
      res.adapter = adapter;
    }
    if (metrics) metrics->log(epoch, "gd2", spec.name, loss_val, dev);
  }
  return res;
}

StageResult bbt_router_stage(const ModelState& state, const TaskSpec& spec,
                             const FewShotSplit& split, const FinetuneConfig& cfg,
                             MetricsLog* metrics) {
  Rng rng(mix_seed(cfg.seed, {0xC1, static_cast<uint64_t>(spec.task_id)}));
  TaskAdapter incumbent = random_router_adapter(state, rng);
  int nj = state.n_inject();
  int K = state.K;
  Metric metric = metric_for(spec);
  int64_t budget = cfg.resolved_stage1_budget(state.enc_cfg.shallow);
  ForwardCounter fc;
  int64_t cost_dev = pass_cost(split.dev.size());
  int64_t cost_train = pass_cost(split.train.size());

  StageResult res;
  res.adapter = incumbent;
  res.best_dev = -1.0;

  std::vector<GpUcb> gps;
  for (int j = 0; j < nj; ++j) {
    GpConfig gc;
    gc.bounds.assign(static_cast<size_t>(K), {-cfg.bo_box, cfg.bo_box});
    gps.emplace_back(gc);
  }

  double best_dev = -1.0, best_loss = std::numeric_limits<double>::infinity();
  if (fc.count + cost_dev + cost_train <= budget) {
    best_dev = evaluate(state, incumbent, split.dev, spec, metric, &fc).score;
    best_loss = eval_loss(state, incumbent, split.train, &fc);
    for (int j = 0; j < nj; ++j) {
      std::vector<double> x(static_cast<size_t>(K));
      for (int k = 0; k < K; ++k)
        x[static_cast<size_t>(k)] = std::clamp(
            static_cast<double>(incumbent.routers[static_cast<size_t>(j)].w[k]), -cfg.bo_box,
            cfg.bo_box);
      gps[static_cast<size_t>(j)].add(x, best_dev);
    }
    res.best_dev = best_dev;
    res.best_train_loss = best_loss;
  }

  int64_t round = 0;
  while (fc.count + cost_dev + cost_train <= budget) {
    int j = static_cast<int>(round % nj);
    std::vector<double> x = gps[static_cast<size_t>(j)].suggest(rng);
    TaskAdapter trial = incumbent;
    for (int k = 0; k < K; ++k)
      trial.routers[static_cast<size_t>(j)].w[k] = static_cast<float>(x[static_cast<size_t>(k)]);
    double dev = evaluate(state, trial, split.dev, spec, metric, &fc).score;
    double loss = eval_loss(state, trial, split.train, &fc);
    gps[static_cast<size_t>(j)].add(x, dev);
    if (dev > best_dev || (dev == best_dev && loss < best_loss)) {
      best_dev = dev;
      best_loss = loss;
      incumbent = trial;
      res.adapter = incumbent;
      res.best_dev = best_dev;
      res.best_train_loss = best_loss;
    }
    if (metrics) metrics->log(round, "bbt1", spec.name, loss, dev);
    ++round;
  }
  res.forwards = fc.count;
  return res;
}

StageResult bbt_prompt_stage(const ModelState& state, const StageResult& stage1,
                             const TaskSpec& spec, const FewShotSplit& split,
                             const FinetuneConfig& cfg, MetricsLog* metrics) {
  int nj = state.n_inject();
  int d = state.intrinsic_dim;
  Metric metric = metric_for(spec);
  int64_t budget = cfg.bbt_budget - stage1.forwards;
  ForwardCounter fc;
  int64_t cost_dev = pass_cost(split.dev.size());
  int64_t cost_train = pass_cost(split.train.size());

  TaskAdapter base = stage1.adapter;
  base.source = TaskAdapter::PromptSource::fused;
  base.active = active_sets_with_fallback(base);
  base.fused_offset.assign(static_cast<size_t>(nj), Tensor::zeros({d}));

  // Carried incumbent: only a strict dev improvement over stage I replaces it.
  StageResult res;
  res.adapter = stage1.adapter;
  res.best_dev = stage1.best_dev;
  res.best_train_loss = stage1.best_train_loss;

  std::vector<Cmaes> cmas;
  for (int j = 0; j < nj; ++j) {
    CmaesConfig cc;
    cc.dim = d;
    if (state.enc_cfg.shallow)
      cc.sigma0 = cfg.cma_sigma_shallow;
    else
      cc.sigma0 = state.banks[static_cast<size_t>(j)].layer_index == 0 ? cfg.cma_sigma_embed
                                                                       : cfg.cma_sigma_mid;
    cc.seed = mix_seed(cfg.seed, {0xC3, static_cast<uint64_t>(spec.task_id),
                                  static_cast<uint64_t>(j)});
    cmas.emplace_back(cc);
  }

  auto offsets_at_means = [&]() {
    std::vector<Tensor> off;
    for (int j = 0; j < nj; ++j) {
      std::vector<double> m = cmas[static_cast<size_t>(j)].mean();
      Tensor t({d});
      for (int i = 0; i < d; ++i) t[i] = static_cast<float>(m[static_cast<size_t>(i)]);
      off.push_back(std::move(t));
    }
    return off;
  };

  double best_loss = std::numeric_limits<double>::infinity();
  int64_t gen = 0;
  while (true) {
    int j = static_cast<int>(gen % nj);
    int64_t gen_cost = static_cast<int64_t>(cmas[static_cast<size_t>(j)].lambda()) * cost_train;
    if (fc.count + gen_cost > budget) break;
    auto candidates = cmas[static_cast<size_t>(j)].ask();
    std::vector<double> fitness;
    std::vector<Tensor> mean_off = offsets_at_means();
    double gen_best = std::numeric_limits<double>::infinity();
    size_t gen_arg = 0;
    for (size_t c = 0; c < candidates.size(); ++c) {
      TaskAdapter trial = base;
      trial.fused_offset = mean_off;
      for (int i = 0; i < d; ++i)
        trial.fused_offset[static_cast<size_t>(j)][i] =
            static_cast<float>(candidates[c][static_cast<size_t>(i)]);
      double loss = eval_loss(state, trial, split.train, &fc);
      fitness.push_back(loss);
      if (loss < gen_best) {
        gen_best = loss;
        gen_arg = c;
      }
    }
    cmas[static_cast<size_t>(j)].tell(candidates, fitness);

    double dev_logged = -1.0;
    if (gen_best < best_loss) {
      best_loss = gen_best;
      res.best_train_loss = std::min(res.best_train_loss, gen_best);
      if (fc.count + cost_dev <= budget) {
        TaskAdapter trial = base;
        trial.fused_offset = mean_off;
        for (int i = 0; i < d; ++i)
          trial.fused_offset[static_cast<size_t>(j)][i] =
              static_cast<float>(candidates[gen_arg][static_cast<size_t>(i)]);
        double dev = evaluate(state, trial, split.dev, spec, metric, &fc).score;
        dev_logged = dev;
        if (dev > res.best_dev) {
          res.best_dev = dev;
          res.adapter = trial;
        }
      }
    }
    if (metrics) metrics->log(gen, "bbt2", spec.name, gen_best, dev_logged);
    ++gen;
  }
  res.forwards = fc.count;
  return res;
}

}  // namespace

StageResult finetune_router_stage(const ModelState& state, const TaskSpec& spec,
                                  const FewShotSplit& split, const FinetuneConfig& cfg,
                                  MetricsLog* metrics) {
  if (split.train.empty() || split.dev.empty())
    throw ConfigError("fine-tuning needs non-empty train and dev splits");
  if (!(cfg.tau > 0)) throw ConfigError("temperature must be positive");
  return cfg.paradigm == Paradigm::gd ? gd_router_stage(state, spec, split, cfg, metrics)
                                      : bbt_router_stage(state, spec, split, cfg, metrics);
}

StageResult finetune_prompt_stage(const ModelState& state, const StageResult& stage1,
                                  const TaskSpec& spec, const FewShotSplit& split,
                                  const FinetuneConfig& cfg, MetricsLog* metrics) {
  if (split.train.empty() || split.dev.empty())
    throw ConfigError("fine-tuning needs non-empty train and dev splits");
  if (stage1.adapter.routers.empty())
    throw ConfigError("stage II needs the stage-I adapter");
  return cfg.paradigm == Paradigm::gd
             ? gd_prompt_stage(state, stage1, spec, split, cfg, metrics)
             : bbt_prompt_stage(state, stage1, spec, split, cfg, metrics);
}

namespace {

std::string source_name(TaskAdapter::PromptSource s) {
  switch (s) {
    case TaskAdapter::PromptSource::bank: return "bank";
    case TaskAdapter::PromptSource::materialized: return "materialized";
    case TaskAdapter::PromptSource::fused: return "fused";
  }
  throw Error("unreachable prompt source");
}

TaskAdapter::PromptSource source_from(const std::string& s) {
  if (s == "bank") return TaskAdapter::PromptSource::bank;
  if (s == "materialized") return TaskAdapter::PromptSource::materialized;
  if (s == "fused") return TaskAdapter::PromptSource::fused;
  throw FormatError("unknown adapter prompt source '" + s + "'");
}

}  // namespace

void save_adapter(const TaskAdapter& adapter, const std::string& task_name, double best_dev,
                  double best_train_loss, int64_t forwards, const std::string& dir) {
  TensorStore store;
  std::map<std::string, std::string> cfg;
  cfg["artifact"] = "adapter";
  cfg["task"] = task_name;
  cfg["source"] = source_name(adapter.source);
  cfg["n_inject"] = std::to_string(adapter.routers.size());
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", best_dev);
  cfg["best_dev"] = buf;
  std::snprintf(buf, sizeof(buf), "%.17g", best_train_loss);
  cfg["best_train_loss"] = buf;
  cfg["forwards"] = std::to_string(forwards);
  for (size_t j = 0; j < adapter.routers.size(); ++j) {
    store.put("adapter.router.l" + std::to_string(j), adapter.routers[j].w);
    cfg["router_layer.l" + std::to_string(j)] = std::to_string(adapter.routers[j].layer_index);
  }
  if (!adapter.active.empty()) {
    for (size_t j = 0; j < adapter.active.size(); ++j) {
      std::string csv;
      for (size_t i = 0; i < adapter.active[j].size(); ++i)
        csv += (i ? "," : "") + std::to_string(adapter.active[j][i]);
      cfg["active.l" + std::to_string(j)] = csv;
    }
  }
  if (adapter.source == TaskAdapter::PromptSource::materialized)
    for (size_t j = 0; j < adapter.mat_prompts.size(); ++j)
      for (size_t c = 0; c < adapter.mat_prompts[j].size(); ++c)
        store.put("adapter.prompt.l" + std::to_string(j) + ".c" + std::to_string(c),
                  adapter.mat_prompts[j][c]);
  if (adapter.source == TaskAdapter::PromptSource::fused)
    for (size_t j = 0; j < adapter.fused_offset.size(); ++j)
      store.put("adapter.fused.l" + std::to_string(j), adapter.fused_offset[j]);
  save_checkpoint(store, cfg, dir);
}

LoadedAdapter load_adapter(const std::string& dir) {
  LoadedCheckpoint ck = load_checkpoint(dir);
  auto want = [&](const std::string& key) {
    auto it = ck.config.find(key);
    if (it == ck.config.end())
      throw FormatError("adapter checkpoint misses key '" + key + "'");
    return it->second;
  };
  if (want("artifact") != "adapter")
    throw FormatError("checkpoint in " + dir + " is not an adapter");
  LoadedAdapter out;
  out.task = want("task");
  out.adapter.source = source_from(want("source"));
  out.best_dev = std::stod(want("best_dev"));
  out.best_train_loss = std::stod(want("best_train_loss"));
  out.forwards = std::stoll(want("forwards"));
  int nj = std::stoi(want("n_inject"));
  if (nj < 1) throw FormatError("adapter with no injection layers");
  for (int j = 0; j < nj; ++j) {
    RouterLogits r;
    r.layer_index = std::stoi(want("router_layer.l" + std::to_string(j)));
    r.w = ck.store.get("adapter.router.l" + std::to_string(j));
    out.adapter.routers.push_back(std::move(r));
  }
  for (int j = 0; j < nj; ++j) {
    auto it = ck.config.find("active.l" + std::to_string(j));
    if (it == ck.config.end()) break;
    std::vector<int> active;
    std::stringstream ss(it->second);
    std::string part;
    while (std::getline(ss, part, ',')) active.push_back(std::stoi(part));
    out.adapter.active.push_back(std::move(active));
  }
  if (out.adapter.source == TaskAdapter::PromptSource::materialized) {
    out.adapter.mat_prompts.resize(static_cast<size_t>(nj));
    for (int j = 0; j < nj; ++j)
      for (int c = 0;; ++c) {
        std::string name = "adapter.prompt.l" + std::to_string(j) + ".c" + std::to_string(c);
        if (!ck.store.has(name)) break;
        out.adapter.mat_prompts[static_cast<size_t>(j)].push_back(ck.store.get(name));
      }
  }
  if (out.adapter.source == TaskAdapter::PromptSource::fused)
    for (int j = 0; j < nj; ++j)
      out.adapter.fused_offset.push_back(ck.store.get("adapter.fused.l" + std::to_string(j)));
  return out;
}

}  // namespace mprompt

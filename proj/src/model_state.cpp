#include "mprompt/model_state.hpp"

#include <sstream>

#include "mprompt/tokenizer.hpp"

namespace mprompt {

ModelState ModelState::make(const EncoderConfig& cfg, int K, int intrinsic_dim, float tau,
                            const std::vector<std::string>& task_names, uint64_t seed) {
  cfg.validate();
  if (K < 1) throw ConfigError("bank size K must be positive");
  if (intrinsic_dim < 1) throw ConfigError("intrinsic dimension must be positive");
  if (!(tau > 0.0f)) throw ConfigError("temperature must be positive");
  ModelState st;
  st.enc_cfg = cfg;
  st.K = K;
  st.intrinsic_dim = intrinsic_dim;
  st.tau = tau;
  st.task_names = task_names;
  Rng enc_rng(mix_seed(seed, {0x01}));
  st.enc.init(cfg, enc_rng);
  for (int j = 0; j < cfg.n_inject(); ++j) {
    PromptBank bank;
    bank.layer_index = cfg.inject_layer(j);
    bank.K = K;
    bank.L = cfg.prompt_len;
    bank.D = cfg.hidden;
    bank.d = intrinsic_dim;
    Rng brng(mix_seed(seed, {0x02, static_cast<uint64_t>(j)}));
    bank.init(brng);
    st.banks.push_back(std::move(bank));
  }
  // routers start at zero logits (alpha = 1, inclusion probability 1/2)
  st.routers.resize(task_names.size());
  for (size_t t = 0; t < task_names.size(); ++t)
    for (int j = 0; j < cfg.n_inject(); ++j) {
      RouterLogits r;
      r.layer_index = cfg.inject_layer(j);
      r.w = Tensor::zeros({K});
      st.routers[t].push_back(std::move(r));
    }
  return st;
}

TensorStore ModelState::to_store() const {
  TensorStore store;
  const_cast<ModelState*>(this)->visit_shared(
      [&](const std::string& name, Tensor& t) { store.put(name, t); });
  for (size_t t = 0; t < routers.size(); ++t)
    for (size_t j = 0; j < routers[t].size(); ++j)
      store.put(router_name(static_cast<int>(t), static_cast<int>(j)), routers[t][j].w);
  return store;
}

std::map<std::string, std::string> ModelState::config_map() const {
  std::map<std::string, std::string> m;
  m["n_layers"] = std::to_string(enc_cfg.n_layers);
  m["hidden"] = std::to_string(enc_cfg.hidden);
  m["heads"] = std::to_string(enc_cfg.heads);
  m["vocab"] = std::to_string(enc_cfg.vocab);
  m["max_seq"] = std::to_string(enc_cfg.max_seq);
  m["prompt_len"] = std::to_string(enc_cfg.prompt_len);
  m["shallow"] = enc_cfg.shallow ? "1" : "0";
  m["K"] = std::to_string(K);
  m["intrinsic_dim"] = std::to_string(intrinsic_dim);
  std::ostringstream tau_s;
  tau_s << tau;
  m["tau"] = tau_s.str();
  m["n_tasks"] = std::to_string(task_names.size());
  std::string names;
  for (size_t i = 0; i < task_names.size(); ++i) names += (i ? "," : "") + task_names[i];
  m["task_names"] = names;
  return m;
}

namespace {

int cfg_int(const std::map<std::string, std::string>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw FormatError("checkpoint config misses key '" + key + "'");
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw FormatError("checkpoint config key '" + key + "' is not an integer");
  }
}

float cfg_float(const std::map<std::string, std::string>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw FormatError("checkpoint config misses key '" + key + "'");
  try {
    return std::stof(it->second);
  } catch (const std::exception&) {
    throw FormatError("checkpoint config key '" + key + "' is not a number");
  }
}

}  // namespace

ModelState ModelState::from_checkpoint(const LoadedCheckpoint& ck) {
  ModelState st;
  st.enc_cfg.n_layers = cfg_int(ck.config, "n_layers");
  st.enc_cfg.hidden = cfg_int(ck.config, "hidden");
  st.enc_cfg.heads = cfg_int(ck.config, "heads");
  st.enc_cfg.vocab = cfg_int(ck.config, "vocab");
  st.enc_cfg.max_seq = cfg_int(ck.config, "max_seq");
  st.enc_cfg.prompt_len = cfg_int(ck.config, "prompt_len");
  st.enc_cfg.shallow = cfg_int(ck.config, "shallow") != 0;
  st.K = cfg_int(ck.config, "K");
  st.intrinsic_dim = cfg_int(ck.config, "intrinsic_dim");
  st.tau = cfg_float(ck.config, "tau");
  try {
    st.enc_cfg.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  if (st.enc_cfg.vocab != Vocab::standard().size())
    throw FormatError("checkpoint vocabulary size " + std::to_string(st.enc_cfg.vocab) +
                      " does not match the fixed vocabulary (" +
                      std::to_string(Vocab::standard().size()) + ")");
  int n_tasks = cfg_int(ck.config, "n_tasks");
  auto names_it = ck.config.find("task_names");
  if (names_it == ck.config.end()) throw FormatError("checkpoint config misses key 'task_names'");
  if (!names_it->second.empty()) {
    std::stringstream ss(names_it->second);
    std::string part;
    while (std::getline(ss, part, ',')) st.task_names.push_back(part);
  }
  if (static_cast<int>(st.task_names.size()) != n_tasks)
    throw FormatError("checkpoint lists " + std::to_string(st.task_names.size()) +
                      " task names for n_tasks=" + std::to_string(n_tasks));

  auto take = [&](const std::string& name, const std::vector<int>& shape) {
    const Tensor& t = ck.store.get(name);
    if (t.shape != shape)
      throw FormatError("tensor '" + name + "' has shape " + shape_str(t.shape) +
                        ", expected " + shape_str(shape));
    return t;
  };

  Rng dummy(0);
  st.enc.init(st.enc_cfg, dummy);  // allocate; immediately overwritten
  st.enc.visit([&](const std::string& name, Tensor& t) { t = take(name, t.shape); });

  for (int j = 0; j < st.enc_cfg.n_inject(); ++j) {
    PromptBank bank;
    bank.layer_index = st.enc_cfg.inject_layer(j);
    bank.K = st.K;
    bank.L = st.enc_cfg.prompt_len;
    bank.D = st.enc_cfg.hidden;
    bank.d = st.intrinsic_dim;
    bank.z = take("bank.l" + std::to_string(j) + ".z", {st.K, st.intrinsic_dim});
    bank.A = take("bank.l" + std::to_string(j) + ".A",
                  {bank.L * bank.D, st.intrinsic_dim});
    st.banks.push_back(std::move(bank));
  }
  st.routers.resize(st.task_names.size());
  for (size_t t = 0; t < st.task_names.size(); ++t)
    for (int j = 0; j < st.enc_cfg.n_inject(); ++j) {
      RouterLogits r;
      r.layer_index = st.enc_cfg.inject_layer(j);
      r.w = take(router_name(static_cast<int>(t), j), {st.K});
      st.routers[t].push_back(std::move(r));
    }
  return st;
}

void save_model(const ModelState& state, const std::string& dir) {
  save_checkpoint(state.to_store(), state.config_map(), dir);
}

ModelState load_model(const std::string& dir) {
  return ModelState::from_checkpoint(load_checkpoint(dir));
}

}  // namespace mprompt

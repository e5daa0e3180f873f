#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mprompt/rng.hpp"
#include "mprompt/tape.hpp"
#include "mprompt/tensor.hpp"

namespace mprompt {

struct EncoderConfig {
  int n_layers = 4;
  int hidden = 64;
  int heads = 4;
  int vocab = 0;
  int max_seq = 256;
  int prompt_len = 8;
  bool shallow = false;

  // Deep variant injects at layers 0..n_layers-2; shallow at layer 0 only.
  int n_inject() const { return shallow ? 1 : n_layers - 1; }
  bool inject_at(int layer) const {
    return shallow ? layer == 0 : layer <= n_layers - 2;
  }
  // Injection slot j sits at encoder layer j in both variants.
  int inject_layer(int slot) const {
    if (slot < 0 || slot >= n_inject()) throw ShapeError("injection slot out of range");
    return slot;
  }

  void validate() const {
    if (n_layers < 2) throw ConfigError("encoder needs at least 2 layers");
    if (hidden <= 0 || heads <= 0 || hidden % heads != 0)
      throw ConfigError("hidden width must be a positive multiple of heads");
    if (vocab <= 0) throw ConfigError("vocab size not set");
    if (prompt_len < 0 || max_seq <= prompt_len)
      throw ConfigError("prompt length must fit inside max_seq");
  }
};

template <typename S>
struct AttnParamsT {
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename S>
struct LayerParamsT {
  TensorT<S> ln1_g, ln1_b;
  AttnParamsT<S> attn;
  TensorT<S> ln2_g, ln2_b;
  TensorT<S> ff_w1, ff_b1, ff_w2, ff_b2;
};

template <typename S>
struct EncoderParamsT {
  EncoderConfig cfg;
  TensorT<S> tok_emb;  // (vocab, D)
  TensorT<S> pos_emb;  // (max_seq, D)
  std::vector<LayerParamsT<S>> layers;
  TensorT<S> lnf_g, lnf_b;
  TensorT<S> head_start_w, head_start_b;  // (D,1), (1)
  TensorT<S> head_end_w, head_end_b;

  void init(const EncoderConfig& c, Rng& rng, S stddev = S(0.02)) {
    cfg = c;
    cfg.validate();
    int D = cfg.hidden;
    auto randn = [&](std::vector<int> shp) {
      TensorT<S> t(std::move(shp));
      for (auto& v : t.data) v = static_cast<S>(rng.normal()) * stddev;
      return t;
    };
    tok_emb = randn({cfg.vocab, D});
    pos_emb = randn({cfg.max_seq, D});
    layers.clear();
    for (int l = 0; l < cfg.n_layers; ++l) {
      LayerParamsT<S> lp;
      lp.ln1_g = TensorT<S>::full({D}, S(1));
      lp.ln1_b = TensorT<S>({D});
      lp.attn.wq = randn({D, D});
      lp.attn.bq = TensorT<S>({D});
      lp.attn.wk = randn({D, D});
      lp.attn.bk = TensorT<S>({D});
      lp.attn.wv = randn({D, D});
      lp.attn.bv = TensorT<S>({D});
      lp.attn.wo = randn({D, D});
      lp.attn.bo = TensorT<S>({D});
      lp.ln2_g = TensorT<S>::full({D}, S(1));
      lp.ln2_b = TensorT<S>({D});
      lp.ff_w1 = randn({D, 4 * D});
      lp.ff_b1 = TensorT<S>({4 * D});
      lp.ff_w2 = randn({4 * D, D});
      lp.ff_b2 = TensorT<S>({D});
      layers.push_back(std::move(lp));
    }
    lnf_g = TensorT<S>::full({D}, S(1));
    lnf_b = TensorT<S>({D});
    head_start_w = randn({D, 1});
    head_start_b = TensorT<S>({1});
    head_end_w = randn({D, 1});
    head_end_b = TensorT<S>({1});
  }

  template <class F>
  void visit(F&& f) {
    f("enc.tok_emb", tok_emb);
    f("enc.pos_emb", pos_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string p = "enc.l" + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "ln1.g", L.ln1_g);
      f(p + "ln1.b", L.ln1_b);
      f(p + "attn.wq", L.attn.wq);
      f(p + "attn.bq", L.attn.bq);
      f(p + "attn.wk", L.attn.wk);
      f(p + "attn.bk", L.attn.bk);
      f(p + "attn.wv", L.attn.wv);
      f(p + "attn.bv", L.attn.bv);
      f(p + "attn.wo", L.attn.wo);
      f(p + "attn.bo", L.attn.bo);
      f(p + "ln2.g", L.ln2_g);
      f(p + "ln2.b", L.ln2_b);
      f(p + "ff.w1", L.ff_w1);
      f(p + "ff.b1", L.ff_b1);
      f(p + "ff.w2", L.ff_w2);
      f(p + "ff.b2", L.ff_b2);
    }
    f("enc.ln_f.g", lnf_g);
    f("enc.ln_f.b", lnf_b);
    f("head.start.w", head_start_w);
    f("head.start.b", head_start_b);
    f("head.end.w", head_end_w);
    f("head.end.b", head_end_b);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<EncoderParamsT*>(this)->visit(
        [&](const std::string& n, TensorT<S>& t) { f(n, static_cast<const TensorT<S>&>(t)); });
  }
};
using EncoderParams = EncoderParamsT<float>;

// One padded batch of text-region token ids (prompt positions are added by the
// encoder itself). len[b] = real token count of sample b; the rest is PAD.
struct BatchInput {
  int B = 0, T = 0;
  std::vector<int> ids;  // B*T, row-major
  std::vector<int> len;  // per sample
};

template <class Ctx>
struct SpanOutT {
  typename Ctx::V start, end;  // (B, L+T) each
};

// Full MRC forward: embed text, prepend/overwrite per-layer prompts, run the
// pre-LN transformer, and score every position with the two span heads.
// `prompts` holds one (L x D) value per injection layer; an empty list runs the
// encoder promptless.
template <typename S, class Ctx>
SpanOutT<Ctx> encode_mrc(Ctx& cx, const EncoderParamsT<S>& P, const BatchInput& in,
                         const std::vector<typename Ctx::V>& prompts) {
  const EncoderConfig& cfg = P.cfg;
  cfg.validate();
  int B = in.B, T = in.T, D = cfg.hidden, H = cfg.heads;
  if (B <= 0 || T <= 0 || static_cast<int64_t>(in.ids.size()) != static_cast<int64_t>(B) * T)
    throw ShapeError("encode_mrc: bad batch shape");
  int L = prompts.empty() ? 0 : cfg.prompt_len;
  if (!prompts.empty() && static_cast<int>(prompts.size()) != cfg.n_inject())
    throw ShapeError("encode_mrc: expected " + std::to_string(cfg.n_inject()) +
                     " prompts, got " + std::to_string(prompts.size()));
  int F = L + T;  // full sequence length
  if (F > cfg.max_seq) throw ShapeError("encode_mrc: sequence overflow past max_seq");

  // Key-padding mask over the full sequence: prompt positions always attended,
  // PAD text positions never.
  TensorT<S> mask({B, F});
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < L; ++i) mask.at(b, i) = S(1);
    for (int i = 0; i < T; ++i) mask.at(b, L + i) = i < in.len[b] ? S(1) : S(0);
  }

  auto tok_tbl = cx.param("enc.tok_emb", P.tok_emb);
  auto pos_tbl = cx.param("enc.pos_emb", P.pos_emb);
  auto tok = cx.embedding(tok_tbl, in.ids, B, T);
  // Text token i carries position embedding i (positions index the text
  // region; prompt rows carry none).
  auto pos_rows = cx.reshape(
      cx.slice_seq(cx.reshape(pos_tbl, {1, cfg.max_seq, D}), 0, T), {T, D});
  auto h = cx.add(tok, pos_rows);
  if (L > 0) h = cx.concat_seq(cx.broadcast_rows(prompts[0], B), h);

  S inv_sqrt_dh = S(1) / std::sqrt(S(D / H));
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (L > 0 && l > 0 && cfg.inject_at(l))
      h = cx.concat_seq(cx.broadcast_rows(prompts[static_cast<size_t>(l)], B),
                        cx.slice_seq(h, L, F));
    std::string p = "enc.l" + std::to_string(l) + ".";
    const auto& lp = P.layers[static_cast<size_t>(l)];
    // attention block (pre-LN)
    auto a = cx.layer_norm(h, cx.param(p + "ln1.g", lp.ln1_g), cx.param(p + "ln1.b", lp.ln1_b));
    auto a2 = cx.reshape(a, {B * F, D});
    auto q = cx.add(cx.matmul(a2, cx.param(p + "attn.wq", lp.attn.wq)),
                    cx.param(p + "attn.bq", lp.attn.bq));
    auto k = cx.add(cx.matmul(a2, cx.param(p + "attn.wk", lp.attn.wk)),
                    cx.param(p + "attn.bk", lp.attn.bk));
    auto v = cx.add(cx.matmul(a2, cx.param(p + "attn.wv", lp.attn.wv)),
                    cx.param(p + "attn.bv", lp.attn.bv));
    auto qh = cx.split_heads(cx.reshape(q, {B, F, D}), H);
    auto kh = cx.split_heads(cx.reshape(k, {B, F, D}), H);
    auto vh = cx.split_heads(cx.reshape(v, {B, F, D}), H);
    auto scores = cx.add_key_mask(cx.scale(cx.matmul(qh, kh, false, true), inv_sqrt_dh), mask);
    auto attn = cx.softmax_last(scores);
    auto av = cx.merge_heads(cx.matmul(attn, vh), H);
    auto o = cx.add(cx.matmul(cx.reshape(av, {B * F, D}), cx.param(p + "attn.wo", lp.attn.wo)),
                    cx.param(p + "attn.bo", lp.attn.bo));
    h = cx.add(h, cx.reshape(o, {B, F, D}));
    // feed-forward block (pre-LN, GELU, width 4D)
    auto f = cx.layer_norm(h, cx.param(p + "ln2.g", lp.ln2_g), cx.param(p + "ln2.b", lp.ln2_b));
    auto f1 = cx.gelu(cx.add(cx.matmul(cx.reshape(f, {B * F, D}), cx.param(p + "ff.w1", lp.ff_w1)),
                             cx.param(p + "ff.b1", lp.ff_b1)));
    auto f2 = cx.add(cx.matmul(f1, cx.param(p + "ff.w2", lp.ff_w2)),
                     cx.param(p + "ff.b2", lp.ff_b2));
    h = cx.add(h, cx.reshape(f2, {B, F, D}));
  }

  auto hf = cx.layer_norm(h, cx.param("enc.ln_f.g", P.lnf_g), cx.param("enc.ln_f.b", P.lnf_b));
  auto h2 = cx.reshape(hf, {B * F, D});
  SpanOutT<Ctx> out;
  out.start = cx.reshape(cx.add(cx.matmul(h2, cx.param("head.start.w", P.head_start_w)),
                                cx.param("head.start.b", P.head_start_b)),
                         {B, F});
  out.end = cx.reshape(cx.add(cx.matmul(h2, cx.param("head.end.w", P.head_end_w)),
                              cx.param("head.end.b", P.head_end_b)),
                       {B, F});
  return out;
}

// Candidate-constrained span decoding over absolute text-region coordinates.
// Scores start[L+s] + end[L+e]; ties break toward the smallest start, then end.
template <typename S>
int extract_span(const S* start_row, const S* end_row, int full_len,
                 const std::vector<std::pair<int, int>>& candidates, int L) {
  if (candidates.empty()) throw Error("extract_span: empty candidate list");
  int best = -1;
  S best_score = S(0);
  for (size_t c = 0; c < candidates.size(); ++c) {
    auto [s, e] = candidates[c];
    if (s < 0 || e < s || L + e >= full_len)
      throw ShapeError("extract_span: candidate span out of range");
    S score = start_row[L + s] + end_row[L + e];
    bool better = best < 0 || score > best_score ||
                  (score == best_score && candidates[static_cast<size_t>(c)] <
                                              candidates[static_cast<size_t>(best)]);
    if (better) {
      best = static_cast<int>(c);
      best_score = score;
    }
  }
  return best;
}

}  // namespace mprompt

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "mprompt/encoder.hpp"
#include "mprompt/finite_diff.hpp"
#include "mprompt/rng.hpp"

using namespace mprompt;

namespace {

using DT = TensorT<double>;

EncoderConfig tiny_config(bool shallow) {
  EncoderConfig cfg;
  cfg.n_layers = 3;
  cfg.hidden = 4;
  cfg.heads = 2;
  cfg.vocab = 7;
  cfg.max_seq = 16;
  cfg.prompt_len = 2;
  cfg.shallow = shallow;
  return cfg;
}

EncoderParamsT<double> tiny_params(const EncoderConfig& cfg, uint64_t seed) {
  EncoderParamsT<double> P;
  Rng rng(seed);
  P.init(cfg, rng, 0.3);  // wide init so signals are well above noise
  return P;
}

BatchInput tiny_batch() {
  BatchInput in;
  in.B = 2;
  in.T = 3;
  in.ids = {3, 5, 0, 6, 4, 0};
  in.len = {3, 2};
  return in;
}

std::vector<DT> random_prompts(const EncoderConfig& cfg, uint64_t seed) {
  std::vector<DT> ps;
  Rng rng(seed);
  for (int j = 0; j < cfg.n_inject(); ++j) {
    DT p({cfg.prompt_len, cfg.hidden});
    for (auto& v : p.data) v = rng.uniform_in(-0.5, 0.5);
    ps.push_back(std::move(p));
  }
  return ps;
}

struct RefOut {
  DT start, end;
};

// A from-scratch loop implementation of the full forward pass, written
// without any of the production tensor kernels, to pin the architecture:
// token+position embedding of the text region, per-layer prompt overwrite,
// pre-LN attention with key-padding mask, GELU feed-forward, final LN, and
// the two linear span heads.
RefOut reference_forward(const EncoderParamsT<double>& P, const BatchInput& in,
                         const std::vector<DT>& prompts) {
  const EncoderConfig& cfg = P.cfg;
  int B = in.B, T = in.T, D = cfg.hidden, H = cfg.heads;
  int L = prompts.empty() ? 0 : cfg.prompt_len;
  int F = L + T;
  int dh = D / H;

  std::vector<std::vector<double>> mask(static_cast<size_t>(B), std::vector<double>(F, 0.0));
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < L; ++i) mask[b][i] = 1.0;
    for (int i = 0; i < T; ++i) mask[b][L + i] = i < in.len[b] ? 1.0 : 0.0;
  }

  auto ln = [D](const std::vector<double>& x, const DT& g, const DT& bb) {
    double mu = 0;
    for (double v : x) mu += v;
    mu /= D;
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= D;
    double inv = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> out(static_cast<size_t>(D));
    for (int i = 0; i < D; ++i) out[static_cast<size_t>(i)] = (x[static_cast<size_t>(i)] - mu) * inv * g[i] + bb[i];
    return out;
  };
  auto affine = [](const std::vector<double>& x, const DT& W, const DT& bb) {
    int rows = W.shape[0], cols = W.shape[1];
    std::vector<double> out(static_cast<size_t>(cols));
    for (int c = 0; c < cols; ++c) {
      double s = bb[c];
      for (int r = 0; r < rows; ++r) s += x[static_cast<size_t>(r)] * W.at(r, c);
      out[static_cast<size_t>(c)] = s;
    }
    return out;
  };
  auto gelu1 = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };

  std::vector<std::vector<std::vector<double>>> h(
      static_cast<size_t>(B),
      std::vector<std::vector<double>>(static_cast<size_t>(F), std::vector<double>(D, 0.0)));
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      int id = in.ids[static_cast<size_t>(b * T + t)];
      for (int dd = 0; dd < D; ++dd)
        h[b][static_cast<size_t>(L + t)][static_cast<size_t>(dd)] =
            P.tok_emb.at(id, dd) + P.pos_emb.at(t, dd);
    }
  if (L > 0)
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < L; ++i)
        for (int dd = 0; dd < D; ++dd) h[b][static_cast<size_t>(i)][static_cast<size_t>(dd)] = prompts[0].at(i, dd);

  for (int l = 0; l < cfg.n_layers; ++l) {
    if (L > 0 && l > 0 && cfg.inject_at(l))
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < L; ++i)
          for (int dd = 0; dd < D; ++dd)
            h[b][static_cast<size_t>(i)][static_cast<size_t>(dd)] =
                prompts[static_cast<size_t>(l)].at(i, dd);
    const auto& lp = P.layers[static_cast<size_t>(l)];
    for (int b = 0; b < B; ++b) {
      std::vector<std::vector<double>> q(static_cast<size_t>(F)), k(static_cast<size_t>(F)),
          v(static_cast<size_t>(F));
      for (int i = 0; i < F; ++i) {
        auto a = ln(h[b][static_cast<size_t>(i)], lp.ln1_g, lp.ln1_b);
        q[static_cast<size_t>(i)] = affine(a, lp.attn.wq, lp.attn.bq);
        k[static_cast<size_t>(i)] = affine(a, lp.attn.wk, lp.attn.bk);
        v[static_cast<size_t>(i)] = affine(a, lp.attn.wv, lp.attn.bv);
      }
      std::vector<std::vector<double>> av(static_cast<size_t>(F), std::vector<double>(D, 0.0));
      for (int hd = 0; hd < H; ++hd)
        for (int i = 0; i < F; ++i) {
          std::vector<double> sc(static_cast<size_t>(F));
          for (int j = 0; j < F; ++j) {
            double s = 0;
            for (int c = 0; c < dh; ++c)
              s += q[static_cast<size_t>(i)][static_cast<size_t>(hd * dh + c)] *
                   k[static_cast<size_t>(j)][static_cast<size_t>(hd * dh + c)];
            sc[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(dh)) +
                                         (mask[b][j] > 0 ? 0.0 : -1e9);
          }
          double mx = sc[0];
          for (double s : sc) mx = std::max(mx, s);
          double den = 0;
          for (double& s : sc) {
            s = std::exp(s - mx);
            den += s;
          }
          for (int j = 0; j < F; ++j)
            for (int c = 0; c < dh; ++c)
              av[static_cast<size_t>(i)][static_cast<size_t>(hd * dh + c)] +=
                  sc[static_cast<size_t>(j)] / den *
                  v[static_cast<size_t>(j)][static_cast<size_t>(hd * dh + c)];
        }
      for (int i = 0; i < F; ++i) {
        auto o = affine(av[static_cast<size_t>(i)], lp.attn.wo, lp.attn.bo);
        for (int dd = 0; dd < D; ++dd) h[b][static_cast<size_t>(i)][static_cast<size_t>(dd)] += o[static_cast<size_t>(dd)];
        auto f = ln(h[b][static_cast<size_t>(i)], lp.ln2_g, lp.ln2_b);
        auto f1 = affine(f, lp.ff_w1, lp.ff_b1);
        for (double& x : f1) x = gelu1(x);
        auto f2 = affine(f1, lp.ff_w2, lp.ff_b2);
        for (int dd = 0; dd < D; ++dd) h[b][static_cast<size_t>(i)][static_cast<size_t>(dd)] += f2[static_cast<size_t>(dd)];
      }
    }
  }

  RefOut out{DT({B, F}), DT({B, F})};
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < F; ++i) {
      auto hf = ln(h[b][static_cast<size_t>(i)], P.lnf_g, P.lnf_b);
      double s = P.head_start_b[0], e = P.head_end_b[0];
      for (int dd = 0; dd < D; ++dd) {
        s += hf[static_cast<size_t>(dd)] * P.head_start_w.at(dd, 0);
        e += hf[static_cast<size_t>(dd)] * P.head_end_w.at(dd, 0);
      }
      out.start.at(b, i) = s;
      out.end.at(b, i) = e;
    }
  return out;
}

}  // namespace

TEST_CASE("config validation catches malformed encoders") {
  EncoderConfig cfg = tiny_config(false);
  cfg.n_layers = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(false);
  cfg.heads = 3;  // hidden 4 is not a multiple
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(false);
  cfg.vocab = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(false);
  cfg.prompt_len = cfg.max_seq;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("injection layout: deep covers all but the last layer, shallow only the first") {
  EncoderConfig deep = tiny_config(false);
  CHECK(deep.n_inject() == 2);
  CHECK(deep.inject_at(0));
  CHECK(deep.inject_at(1));
  CHECK_FALSE(deep.inject_at(2));
  CHECK(deep.inject_layer(0) == 0);
  CHECK(deep.inject_layer(1) == 1);
  CHECK_THROWS_AS(deep.inject_layer(2), ShapeError);
  EncoderConfig sh = tiny_config(true);
  CHECK(sh.n_inject() == 1);
  CHECK(sh.inject_at(0));
  CHECK_FALSE(sh.inject_at(1));
}

TEST_CASE("span logits have shape (B, prompt_len + T) with prompts and (B, T) without") {
  EncoderConfig cfg = tiny_config(false);
  auto P = tiny_params(cfg, 1);
  BatchInput in = tiny_batch();
  EvalCtx<double> cx;
  auto with = encode_mrc<double>(cx, P, in, random_prompts(cfg, 2));
  CHECK(with.start.shape == std::vector<int>{2, 5});
  CHECK(with.end.shape == std::vector<int>{2, 5});
  auto without = encode_mrc<double>(cx, P, in, {});
  CHECK(without.start.shape == std::vector<int>{2, 3});
}

TEST_CASE("shape guards: prompt count, batch layout, max_seq overflow") {
  EncoderConfig cfg = tiny_config(false);
  auto P = tiny_params(cfg, 1);
  BatchInput in = tiny_batch();
  EvalCtx<double> cx;
  auto one = random_prompts(cfg, 2);
  one.pop_back();
  CHECK_THROWS_AS(encode_mrc<double>(cx, P, in, one), ShapeError);
  BatchInput bad = in;
  bad.ids.pop_back();
  CHECK_THROWS_AS(encode_mrc<double>(cx, P, bad, {}), ShapeError);
  BatchInput wide = in;
  wide.T = 15;  // 2 + 15 > max_seq 16
  wide.ids.assign(2 * 15, 1);
  wide.len = {15, 15};
  CHECK_THROWS_AS(encode_mrc<double>(cx, P, wide, random_prompts(cfg, 2)), ShapeError);
}

TEST_CASE("forward pass matches an independent loop implementation (deep)") {
  EncoderConfig cfg = tiny_config(false);
  auto P = tiny_params(cfg, 3);
  BatchInput in = tiny_batch();
  auto prompts = random_prompts(cfg, 4);
  EvalCtx<double> cx;
  auto got = encode_mrc<double>(cx, P, in, prompts);
  auto want = reference_forward(P, in, prompts);
  for (int64_t i = 0; i < want.start.size(); ++i) {
    CHECK(got.start[i] == doctest::Approx(want.start[i]).epsilon(1e-9));
    CHECK(got.end[i] == doctest::Approx(want.end[i]).epsilon(1e-9));
  }
}

TEST_CASE("forward pass matches the loop implementation (shallow and promptless)") {
  EncoderConfig cfg = tiny_config(true);
  auto P = tiny_params(cfg, 5);
  BatchInput in = tiny_batch();
  auto prompts = random_prompts(cfg, 6);
  EvalCtx<double> cx;
  auto got = encode_mrc<double>(cx, P, in, prompts);
  auto want = reference_forward(P, in, prompts);
  for (int64_t i = 0; i < want.start.size(); ++i)
    CHECK(got.start[i] == doctest::Approx(want.start[i]).epsilon(1e-9));

  auto got0 = encode_mrc<double>(cx, P, in, {});
  auto want0 = reference_forward(P, in, {});
  for (int64_t i = 0; i < want0.end.size(); ++i)
    CHECK(got0.end[i] == doctest::Approx(want0.end[i]).epsilon(1e-9));
}

TEST_CASE("padding tokens never influence attended positions") {
  EncoderConfig cfg = tiny_config(false);
  cfg.vocab = 9;
  auto P = tiny_params(cfg, 7);
  BatchInput a;
  a.B = 2;
  a.T = 4;
  a.ids = {3, 5, 6, 0, 4, 2, 0, 0};
  a.len = {3, 2};
  BatchInput b = a;
  b.ids[3] = 8;  // rewrite slots beyond each sample's length only
  b.ids[6] = 7;
  b.ids[7] = 8;
  auto prompts = random_prompts(cfg, 8);
  int L = cfg.prompt_len;
  // The scalar reference is the arbiter for exact claims: masked attention
  // scores get -1e9, exp underflows to exactly 0, so pad columns contribute
  // nothing and attended outputs must match bit for bit.
  RefOut ra = reference_forward(P, a, prompts);
  RefOut rb = reference_forward(P, b, prompts);
  for (int bi = 0; bi < a.B; ++bi)
    for (int i = 0; i < L + a.len[static_cast<size_t>(bi)]; ++i) {
      CHECK(ra.start.at(bi, i) == rb.start.at(bi, i));
      CHECK(ra.end.at(bi, i) == rb.end.at(bi, i));
    }
  // The production kernels pick SIMD paths from runtime buffer addresses, so
  // back-to-back calls are only reproducible to the last few ulps; compare
  // them at a tolerance far below any real leak through the mask.
  EvalCtx<double> cx;
  auto pa = encode_mrc<double>(cx, P, a, prompts);
  auto pb = encode_mrc<double>(cx, P, b, prompts);
  for (int bi = 0; bi < a.B; ++bi)
    for (int i = 0; i < L + a.len[static_cast<size_t>(bi)]; ++i) {
      CHECK(pa.start.at(bi, i) == doctest::Approx(pb.start.at(bi, i)).epsilon(1e-12));
      CHECK(pa.end.at(bi, i) == doctest::Approx(pb.end.at(bi, i)).epsilon(1e-12));
    }
}

TEST_CASE("with two layers the deep and shallow variants coincide") {
  EncoderConfig deep = tiny_config(false);
  deep.n_layers = 2;
  EncoderConfig sh = deep;
  sh.shallow = true;
  CHECK(deep.n_inject() == sh.n_inject());
  auto P = tiny_params(deep, 9);
  BatchInput in = tiny_batch();
  auto prompts = random_prompts(deep, 10);
  // With two layers both variants inject prompts at layer 0 only, so the
  // forward computation is identical; the scalar reference runs the same
  // instruction stream either way and must agree bit for bit.
  RefOut rd = reference_forward(P, in, prompts);
  P.cfg = sh;
  RefOut rs = reference_forward(P, in, prompts);
  CHECK(rd.start.data == rs.start.data);
  CHECK(rd.end.data == rs.end.data);
  // The production kernels are address-sensitive at the last ulp (SIMD path
  // selection depends on where the allocator places intermediates), so the
  // real forward is held to a tight tolerance instead of bit equality.
  EvalCtx<double> cx;
  P.cfg = deep;
  auto od = encode_mrc<double>(cx, P, in, prompts);
  P.cfg = sh;
  auto os = encode_mrc<double>(cx, P, in, prompts);
  for (int64_t i = 0; i < od.start.size(); ++i) {
    CHECK(od.start[i] == doctest::Approx(os.start[i]).epsilon(1e-12));
    CHECK(od.end[i] == doctest::Approx(os.end[i]).epsilon(1e-12));
  }
}

TEST_CASE("repeated forward passes are deterministic") {
  EncoderConfig cfg = tiny_config(false);
  EncoderParamsT<float> P;
  Rng rng(11);
  P.init(cfg, rng, 0.3f);
  BatchInput in = tiny_batch();
  std::vector<TensorT<float>> prompts;
  Rng pr(12);
  for (int j = 0; j < cfg.n_inject(); ++j) {
    TensorT<float> p({cfg.prompt_len, cfg.hidden});
    for (auto& v : p.data) v = static_cast<float>(pr.uniform_in(-0.5, 0.5));
    prompts.push_back(std::move(p));
  }
  EvalCtx<float> cx;
  std::function<SpanOutT<EvalCtx<float>>()> run = [&] {
    return encode_mrc<float>(cx, P, in, prompts);
  };
  auto r1 = run();
  auto r2 = run();
  // No hidden state or randomness feeds the forward, but the vectorized
  // kernels choose SIMD peeling by runtime buffer address, so consecutive
  // calls can legitimately differ in the final float bit.
  for (int64_t i = 0; i < r1.start.size(); ++i) {
    CHECK(r1.start[i] == doctest::Approx(r2.start[i]).epsilon(1e-5));
    CHECK(r1.end[i] == doctest::Approx(r2.end[i]).epsilon(1e-5));
  }
}

TEST_CASE("zeroed span heads give exactly ln 2 per BCE head") {
  EncoderConfig cfg = tiny_config(false);
  auto P = tiny_params(cfg, 13);
  P.head_start_w = DT({cfg.hidden, 1});
  P.head_start_b = DT({1});
  BatchInput in = tiny_batch();
  EvalCtx<double> cx;
  auto out = encode_mrc<double>(cx, P, in, random_prompts(cfg, 14));
  for (double v : out.start.data) CHECK(v == 0.0);
  int F = cfg.prompt_len + in.T;
  DT target({in.B, F});
  target.at(0, cfg.prompt_len) = 1;
  target.at(1, cfg.prompt_len + 1) = 1;
  DT mask({in.B, F});
  for (int b = 0; b < in.B; ++b)
    for (int t = 0; t < in.len[static_cast<size_t>(b)]; ++t) mask.at(b, cfg.prompt_len + t) = 1;
  CHECK(kernels::masked_bce(out.start, target, mask)[0] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("gradients flow correctly into every prompt slot") {
  EncoderConfig cfg = tiny_config(false);
  auto P = tiny_params(cfg, 15);
  BatchInput in = tiny_batch();
  auto prompts = random_prompts(cfg, 16);
  int F = cfg.prompt_len + in.T;
  DT s_t({in.B, F}), e_t({in.B, F}), msk({in.B, F});
  s_t.at(0, 2) = 1;
  s_t.at(1, 3) = 1;
  e_t.at(0, 3) = 1;
  e_t.at(1, 3) = 1;
  for (int b = 0; b < in.B; ++b)
    for (int t = 0; t < in.len[static_cast<size_t>(b)]; ++t) msk.at(b, cfg.prompt_len + t) = 1;

  auto loss_at = [&](const std::vector<DT>& ps) {
    EvalCtx<double> cx;
    auto out = encode_mrc<double>(cx, P, in, ps);
    return kernels::masked_bce(out.start, s_t, msk)[0] +
           kernels::masked_bce(out.end, e_t, msk)[0];
  };

  TapeT<double> tape;
  TapedCtx<double> cx{tape};
  std::vector<VarT<double>> pv;
  for (size_t j = 0; j < prompts.size(); ++j)
    pv.push_back(cx.param("prompt.l" + std::to_string(j), prompts[j]));
  auto out = encode_mrc<double>(cx, P, in, pv);
  auto loss = add(masked_bce(out.start, s_t, msk), masked_bce(out.end, e_t, msk));
  auto grads = tape.backward(loss);

  for (size_t j = 0; j < prompts.size(); ++j) {
    CAPTURE(j);
    std::function<double(const DT&)> fn = [&](const DT& p) {
      auto ps = prompts;
      ps[j] = p;
      return loss_at(ps);
    };
    std::string name = "prompt.l" + std::to_string(j);
    double mag = 0;
    for (double g : grads.at(name).data) mag += std::abs(g);
    CHECK(mag > 0.0);  // every slot participates
    CHECK(finite_diff_check<double>(fn, prompts[j], grads.at(name), 1e-6) < 1e-6);
  }
}

TEST_CASE("gradients flow correctly into encoder weights through the full stack") {
  EncoderConfig cfg = tiny_config(false);
  auto P = tiny_params(cfg, 17);
  BatchInput in = tiny_batch();
  auto prompts = random_prompts(cfg, 18);
  int F = cfg.prompt_len + in.T;
  DT s_t({in.B, F}), msk({in.B, F});
  s_t.at(0, 2) = 1;
  s_t.at(1, 4) = 1;
  for (int b = 0; b < in.B; ++b)
    for (int t = 0; t < in.T; ++t) msk.at(b, cfg.prompt_len + t) = 1;

  TapeT<double> tape;
  TapedCtx<double> cx{tape};
  std::vector<VarT<double>> pv;
  for (size_t j = 0; j < prompts.size(); ++j) pv.push_back(cx.constant(prompts[j]));
  auto out = encode_mrc<double>(cx, P, in, pv);
  auto grads = tape.backward(masked_bce(out.start, s_t, msk));

  SUBCASE("attention projection in a middle layer") {
    std::function<double(const DT&)> fn = [&](const DT& w) {
      auto P2 = P;
      P2.layers[1].attn.wq = w;
      EvalCtx<double> ec;
      auto o = encode_mrc<double>(ec, P2, in, prompts);
      return kernels::masked_bce(o.start, s_t, msk)[0];
    };
    CHECK(finite_diff_check<double>(fn, P.layers[1].attn.wq, grads.at("enc.l1.attn.wq"), 1e-6) <
          1e-6);
  }
  SUBCASE("token embedding table with repeated PAD ids") {
    std::function<double(const DT&)> fn = [&](const DT& w) {
      auto P2 = P;
      P2.tok_emb = w;
      EvalCtx<double> ec;
      auto o = encode_mrc<double>(ec, P2, in, prompts);
      return kernels::masked_bce(o.start, s_t, msk)[0];
    };
    CHECK(finite_diff_check<double>(fn, P.tok_emb, grads.at("enc.tok_emb"), 1e-6) < 1e-6);
  }
}

TEST_CASE("span decoding picks the argmax candidate with smallest-pair tie-break") {
  int L = 2;
  std::vector<double> start = {9, 9, 0.5, 0.1, 0.9, 0.2};  // text region at idx 2..5
  std::vector<double> end = {9, 9, 0.3, 0.3, 0.1, 0.8};
  std::vector<std::pair<int, int>> cands = {{0, 1}, {0, 3}, {2, 2}, {2, 3}, {3, 3}};
  // brute-force oracle over the same list
  int best = -1;
  double best_s = 0;
  for (size_t c = 0; c < cands.size(); ++c) {
    double sc = start[static_cast<size_t>(L + cands[c].first)] +
                end[static_cast<size_t>(L + cands[c].second)];
    if (best < 0 || sc > best_s ||
        (sc == best_s && cands[c] < cands[static_cast<size_t>(best)])) {
      best = static_cast<int>(c);
      best_s = sc;
    }
  }
  CHECK(extract_span(start.data(), end.data(), 6, cands, L) == best);

  // exact ties resolve to the smallest (start, end) pair
  std::vector<double> flat_s(6, 1.0), flat_e(6, 2.0);
  std::vector<std::pair<int, int>> shuffled = {{2, 3}, {0, 2}, {1, 1}, {0, 1}};
  CHECK(extract_span(flat_s.data(), flat_e.data(), 6, shuffled, L) == 3);

  CHECK_THROWS_AS(extract_span(flat_s.data(), flat_e.data(), 6, {}, L), Error);
  std::vector<std::pair<int, int>> oob = {{3, 4}};  // L+4 = 6 past the row
  CHECK_THROWS_AS(extract_span(flat_s.data(), flat_e.data(), 6, oob, L), ShapeError);
}

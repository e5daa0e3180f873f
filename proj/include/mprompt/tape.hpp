#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mprompt/tensor.hpp"

namespace mprompt {

namespace detail {
// Counts every GradTape ever constructed (any scalar instantiation). The
// black-box fine-tuning paradigm asserts this stays flat: zero gradient
// machinery may be touched there.
inline std::atomic<int64_t>& tape_counter() {
  static std::atomic<int64_t> n{0};
  return n;
}
}  // namespace detail

inline int64_t tapes_constructed() { return detail::tape_counter().load(); }

// ---------------------------------------------------------------------------
// Forward kernels, shared by the autodiff ops and the tape-free inference path.
// ---------------------------------------------------------------------------
namespace kernels {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
inline void matmul_dims(const TensorT<S>& a, const TensorT<S>& b, bool ta, bool tb,
                        int64_t& batch, int& M, int& K, int& N) {
  if (a.ndim() < 2 || b.ndim() < 2 || a.ndim() != b.ndim())
    throw ShapeError("matmul needs equal-rank operands of rank >= 2, got " +
                     shape_str(a.shape) + " x " + shape_str(b.shape));
  for (int i = 0; i + 2 < a.ndim(); ++i)
    if (a.shape[i] != b.shape[i])
      throw ShapeError("matmul batch dims differ: " + shape_str(a.shape) + " x " +
                       shape_str(b.shape));
  int ar = a.shape[a.ndim() - 2], ac = a.shape[a.ndim() - 1];
  int br = b.shape[b.ndim() - 2], bc = b.shape[b.ndim() - 1];
  M = ta ? ac : ar;
  K = ta ? ar : ac;
  int Kb = tb ? bc : br;
  N = tb ? br : bc;
  if (K != Kb)
    throw ShapeError("matmul inner dims differ: " + shape_str(a.shape) + (ta ? "^T" : "") +
                     " x " + shape_str(b.shape) + (tb ? "^T" : ""));
  batch = 1;
  for (int i = 0; i + 2 < a.ndim(); ++i) batch *= a.shape[i];
}

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, bool ta = false, bool tb = false) {
  int64_t batch;
  int M, K, N;
  matmul_dims(a, b, ta, tb, batch, M, K, N);
  std::vector<int> oshape(a.shape.begin(), a.shape.end() - 2);
  oshape.push_back(M);
  oshape.push_back(N);
  TensorT<S> out(std::move(oshape));
  int ar = a.shape[a.ndim() - 2], ac = a.shape[a.ndim() - 1];
  int br = b.shape[b.ndim() - 2], bc = b.shape[b.ndim() - 1];
  for (int64_t i = 0; i < batch; ++i) {
    ECMap<S> A(a.data.data() + i * ar * ac, ar, ac);
    ECMap<S> B(b.data.data() + i * br * bc, br, bc);
    EMap<S> C(out.data.data() + i * static_cast<int64_t>(M) * N, M, N);
    if (!ta && !tb)
      C.noalias() = A * B;
    else if (ta && !tb)
      C.noalias() = A.transpose() * B;
    else if (!ta && tb)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  require_finite(out, "matmul");
  return out;
}

// Broadcast modes for add/mul: equal shape, rhs a suffix of lhs shape
// (bias-style), or rhs a single scalar.
enum class Bcast { same, suffix, scalar };

template <typename S>
inline Bcast bcast_mode(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.shape == b.shape) return Bcast::same;
  if (b.size() == 1) return Bcast::scalar;
  if (b.ndim() <= a.ndim()) {
    bool suffix = true;
    for (int i = 0; i < b.ndim(); ++i)
      if (b.shape[b.ndim() - 1 - i] != a.shape[a.ndim() - 1 - i]) suffix = false;
    if (suffix) return Bcast::suffix;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape) + " onto " +
                   shape_str(a.shape));
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  Bcast m = bcast_mode(a, b, "add");
  TensorT<S> out = a;
  if (m == Bcast::same) {
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b[i];
  } else if (m == Bcast::scalar) {
    S v = b[0];
    for (int64_t i = 0; i < out.size(); ++i) out[i] += v;
  } else {
    int64_t n = b.size();
    const S* pb = b.data.data();
    for (int64_t r = 0; r < out.size() / n; ++r) {
      S* po = out.data.data() + r * n;
      for (int64_t i = 0; i < n; ++i) po[i] += pb[i];
    }
  }
  require_finite(out, "add");
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  Bcast m = bcast_mode(a, b, "mul");
  TensorT<S> out = a;
  if (m == Bcast::same) {
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  } else if (m == Bcast::scalar) {
    S v = b[0];
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= v;
  } else {
    int64_t n = b.size();
    const S* pb = b.data.data();
    for (int64_t r = 0; r < out.size() / n; ++r) {
      S* po = out.data.data() + r * n;
      for (int64_t i = 0; i < n; ++i) po[i] *= pb[i];
    }
  }
  require_finite(out, "mul");
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out = a;
  for (auto& v : out.data) v *= c;
  require_finite(out, "scale");
  return out;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  TensorT<S> out = a;
  for (auto& v : out.data) {
    if (v >= 0) {
      S e = std::exp(-v);
      v = S(1) / (S(1) + e);
    } else {
      S e = std::exp(v);
      v = e / (S(1) + e);
    }
  }
  require_finite(out, "sigmoid");
  return out;
}

template <typename S>
TensorT<S> exp(const TensorT<S>& a) {
  TensorT<S> out = a;
  for (auto& v : out.data) v = std::exp(v);
  require_finite(out, "exp");
  return out;
}

template <typename S>
TensorT<S> log(const TensorT<S>& a) {
  TensorT<S> out = a;
  for (auto& v : out.data) v = std::log(v);
  require_finite(out, "log");
  return out;
}

template <typename S>
inline S gelu_scalar(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475)));
}
template <typename S>
inline S gelu_grad_scalar(S x) {
  S cdf = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475)));
  S pdf = S(0.3989422804014327) * std::exp(S(-0.5) * x * x);
  return cdf + x * pdf;
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  TensorT<S> out = a;
  for (auto& v : out.data) v = gelu_scalar(v);
  require_finite(out, "gelu");
  return out;
}

template <typename S>
TensorT<S> clamp(const TensorT<S>& a, S lo, S hi) {
  TensorT<S> out = a;
  for (auto& v : out.data) v = v < lo ? lo : (v > hi ? hi : v);
  require_finite(out, "clamp");
  return out;
}

template <typename S>
TensorT<S> softmax_last(const TensorT<S>& a) {
  if (a.ndim() < 1) throw ShapeError("softmax needs rank >= 1");
  int n = a.shape.back();
  if (n == 0) throw ShapeError("softmax over empty axis");
  TensorT<S> out = a;
  int64_t rows = a.size() / n;
  for (int64_t r = 0; r < rows; ++r) {
    S* p = out.data.data() + r * n;
    S mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    // exp kept separate from the sum so the exp loop can vectorize
    for (int i = 0; i < n; ++i) p[i] = std::exp(p[i] - mx);
    S sum = 0;
    for (int i = 0; i < n; ++i) sum += p[i];
    for (int i = 0; i < n; ++i) p[i] /= sum;
  }
  require_finite(out, "softmax");
  return out;
}

template <typename S>
struct LayerNormAux {
  TensorT<S> y, xhat;
  std::vector<S> inv_std;  // one per row
};

template <typename S>
LayerNormAux<S> layer_norm_full(const TensorT<S>& x, const TensorT<S>& g, const TensorT<S>& b,
                                S eps) {
  int n = x.shape.back();
  if (g.size() != n || b.size() != n)
    throw ShapeError("layer_norm scale/shift must match last axis " + std::to_string(n));
  LayerNormAux<S> aux;
  aux.y = x;
  aux.xhat = x;
  int64_t rows = x.size() / n;
  aux.inv_std.resize(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const S* px = x.data.data() + r * n;
    S mean = 0;
    for (int i = 0; i < n; ++i) mean += px[i];
    mean /= S(n);
    S var = 0;
    for (int i = 0; i < n; ++i) {
      S d = px[i] - mean;
      var += d * d;
    }
    var /= S(n);
    S is = S(1) / std::sqrt(var + eps);
    aux.inv_std[static_cast<size_t>(r)] = is;
    S* ph = aux.xhat.data.data() + r * n;
    S* py = aux.y.data.data() + r * n;
    for (int i = 0; i < n; ++i) {
      ph[i] = (px[i] - mean) * is;
      py[i] = ph[i] * g[i] + b[i];
    }
  }
  require_finite(aux.y, "layer_norm");
  return aux;
}

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& g, const TensorT<S>& b, S eps) {
  return layer_norm_full(x, g, b, eps).y;
}

template <typename S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<int>& ids, int B, int T) {
  if (table.ndim() != 2) throw ShapeError("embedding table must be 2-D");
  if (static_cast<int64_t>(ids.size()) != static_cast<int64_t>(B) * T)
    throw ShapeError("embedding id count mismatch");
  int V = table.shape[0], D = table.shape[1];
  TensorT<S> out({B, T, D});
  for (int64_t i = 0; i < static_cast<int64_t>(ids.size()); ++i) {
    int id = ids[static_cast<size_t>(i)];
    if (id < 0 || id >= V) throw ShapeError("token id " + std::to_string(id) + " out of vocab");
    std::copy_n(table.data.data() + static_cast<int64_t>(id) * D, D, out.data.data() + i * D);
  }
  return out;
}

// Sequence-axis (axis 1 of a B x T x D tensor) slice and concat.
template <typename S>
TensorT<S> slice_seq(const TensorT<S>& x, int s0, int s1) {
  if (x.ndim() != 3) throw ShapeError("slice_seq expects B x T x D");
  int B = x.shape[0], T = x.shape[1], D = x.shape[2];
  if (s0 < 0 || s1 < s0 || s1 > T) throw ShapeError("slice_seq range out of bounds");
  TensorT<S> out({B, s1 - s0, D});
  for (int b = 0; b < B; ++b)
    std::copy_n(x.data.data() + (static_cast<int64_t>(b) * T + s0) * D,
                static_cast<int64_t>(s1 - s0) * D,
                out.data.data() + static_cast<int64_t>(b) * (s1 - s0) * D);
  return out;
}

template <typename S>
TensorT<S> concat_seq(const TensorT<S>& x1, const TensorT<S>& x2) {
  if (x1.ndim() != 3 || x2.ndim() != 3 || x1.shape[0] != x2.shape[0] ||
      x1.shape[2] != x2.shape[2])
    throw ShapeError("concat_seq expects matching B and D: " + shape_str(x1.shape) + " vs " +
                     shape_str(x2.shape));
  int B = x1.shape[0], T1 = x1.shape[1], T2 = x2.shape[1], D = x1.shape[2];
  TensorT<S> out({B, T1 + T2, D});
  for (int b = 0; b < B; ++b) {
    std::copy_n(x1.data.data() + static_cast<int64_t>(b) * T1 * D, static_cast<int64_t>(T1) * D,
                out.data.data() + static_cast<int64_t>(b) * (T1 + T2) * D);
    std::copy_n(x2.data.data() + static_cast<int64_t>(b) * T2 * D, static_cast<int64_t>(T2) * D,
                out.data.data() + (static_cast<int64_t>(b) * (T1 + T2) + T1) * D);
  }
  return out;
}

template <typename S>
TensorT<S> broadcast_rows(const TensorT<S>& p, int B) {
  if (p.ndim() != 2) throw ShapeError("broadcast_rows expects L x D");
  int L = p.shape[0], D = p.shape[1];
  TensorT<S> out({B, L, D});
  for (int b = 0; b < B; ++b)
    std::copy_n(p.data.data(), static_cast<int64_t>(L) * D,
                out.data.data() + static_cast<int64_t>(b) * L * D);
  return out;
}

template <typename S>
TensorT<S> split_heads(const TensorT<S>& x, int H) {
  if (x.ndim() != 3) throw ShapeError("split_heads expects B x T x D");
  int B = x.shape[0], T = x.shape[1], D = x.shape[2];
  if (D % H != 0) throw ShapeError("hidden width not divisible by heads");
  int dh = D / H;
  TensorT<S> out({B, H, T, dh});
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int h = 0; h < H; ++h)
        std::copy_n(x.data.data() + ((static_cast<int64_t>(b) * T + t) * D) + h * dh, dh,
                    out.data.data() + (((static_cast<int64_t>(b) * H + h) * T) + t) * dh);
  return out;
}

template <typename S>
TensorT<S> merge_heads(const TensorT<S>& x) {
  if (x.ndim() != 4) throw ShapeError("merge_heads expects B x H x T x dh");
  int B = x.shape[0], H = x.shape[1], T = x.shape[2], dh = x.shape[3];
  TensorT<S> out({B, T, H * dh});
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < T; ++t)
        std::copy_n(x.data.data() + (((static_cast<int64_t>(b) * H + h) * T) + t) * dh, dh,
                    out.data.data() + ((static_cast<int64_t>(b) * T + t) * (H * dh)) + h * dh);
  return out;
}

// Adds -1e9 to attention scores at masked-out key positions (mask value 0).
template <typename S>
TensorT<S> add_key_mask(const TensorT<S>& scores, const TensorT<S>& mask) {
  if (scores.ndim() != 4 || mask.ndim() != 2 || scores.shape[0] != mask.shape[0] ||
      scores.shape[3] != mask.shape[1])
    throw ShapeError("add_key_mask expects scores B x H x Tq x Tk and mask B x Tk");
  int B = scores.shape[0], H = scores.shape[1], Tq = scores.shape[2], Tk = scores.shape[3];
  TensorT<S> out = scores;
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int q = 0; q < Tq; ++q) {
        S* row = out.data.data() + (((static_cast<int64_t>(b) * H + h) * Tq) + q) * Tk;
        const S* m = mask.data.data() + static_cast<int64_t>(b) * Tk;
        for (int k = 0; k < Tk; ++k)
          if (m[k] == S(0)) row[k] += S(-1e9);
      }
  require_finite(out, "add_key_mask");
  return out;
}

template <typename S>
inline S softplus(S x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Per-token binary cross-entropy against {0,1} targets, averaged over the
// unmasked positions of each sample, then over the batch. Returns a scalar.
template <typename S>
TensorT<S> masked_bce(const TensorT<S>& logits, const TensorT<S>& target, const TensorT<S>& mask) {
  if (logits.shape != target.shape || logits.shape != mask.shape || logits.ndim() != 2)
    throw ShapeError("masked_bce expects matching B x T logits/targets/mask");
  int B = logits.shape[0], T = logits.shape[1];
  S total = 0;
  for (int b = 0; b < B; ++b) {
    S s = 0, m = 0;
    for (int t = 0; t < T; ++t) {
      S mk = mask.at(b, t);
      if (mk == S(0)) continue;
      S x = logits.at(b, t);
      s += mk * (softplus(x) - target.at(b, t) * x);
      m += mk;
    }
    if (m == S(0)) throw ShapeError("masked_bce: sample with empty mask");
    total += s / m;
  }
  TensorT<S> out = TensorT<S>::scalar(total / S(B));
  require_finite(out, "masked_bce");
  return out;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Reverse-mode tape.
// ---------------------------------------------------------------------------

template <typename S>
class TapeT;

template <typename S>
struct VarT {
  TapeT<S>* tape = nullptr;
  int idx = -1;
  bool valid() const { return tape != nullptr && idx >= 0; }
};

template <typename S>
class TapeT {
 public:
  TapeT() { ++detail::tape_counter(); }
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  VarT<S> constant(TensorT<S> t) { return push(std::move(t), false); }

  VarT<S> param(const std::string& name, const TensorT<S>& t) {
    if (name_to_idx_.count(name)) throw Error("duplicate tape parameter '" + name + "'");
    VarT<S> v = push(t, true);
    name_to_idx_[name] = v.idx;
    params_.emplace_back(name, v.idx);
    return v;
  }

  const TensorT<S>& value(VarT<S> v) const { return vals_[static_cast<size_t>(v.idx)]; }

  // Runs the recorded ops in reverse order once and returns gradients for
  // every registered parameter (zeros for parameters off the output's path).
  std::unordered_map<std::string, TensorT<S>> backward(VarT<S> root, TensorT<S> seed) {
    if (consumed_) throw Error("tape already consumed by a previous backward");
    if (!root.valid() || root.tape != this) throw Error("backward root is not on this tape");
    if (seed.shape != vals_[static_cast<size_t>(root.idx)].shape)
      throw ShapeError("backward seed shape " + shape_str(seed.shape) + " mismatches output " +
                       shape_str(vals_[static_cast<size_t>(root.idx)].shape));
    consumed_ = true;
    grads_.assign(vals_.size(), TensorT<S>());
    grads_[static_cast<size_t>(root.idx)] = std::move(seed);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    std::unordered_map<std::string, TensorT<S>> out;
    for (auto& [name, idx] : params_) {
      TensorT<S>& g = grads_[static_cast<size_t>(idx)];
      out[name] = g.data.empty() ? TensorT<S>(vals_[static_cast<size_t>(idx)].shape)
                                 : std::move(g);
    }
    return out;
  }

  std::unordered_map<std::string, TensorT<S>> backward(VarT<S> root) {
    return backward(root, TensorT<S>::scalar(S(1)));
  }

  // ---- internals shared with the op definitions ----
  VarT<S> push(TensorT<S> t, bool needs_grad) {
    vals_.push_back(std::move(t));
    needs_.push_back(needs_grad);
    return VarT<S>{this, static_cast<int>(vals_.size()) - 1};
  }
  void record(std::function<void()> back) { nodes_.push_back(std::move(back)); }
  bool needs_grad(int i) const { return needs_[static_cast<size_t>(i)]; }
  bool has_grad(int i) const { return !grads_[static_cast<size_t>(i)].data.empty(); }
  const TensorT<S>& grad(int i) const { return grads_[static_cast<size_t>(i)]; }
  const TensorT<S>& val(int i) const { return vals_[static_cast<size_t>(i)]; }
  void accumulate(int i, const TensorT<S>& g) {
    if (!needs_[static_cast<size_t>(i)]) return;
    TensorT<S>& dst = grads_[static_cast<size_t>(i)];
    if (dst.data.empty())
      dst = g;
    else
      for (int64_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
  }

 private:
  std::vector<TensorT<S>> vals_;
  std::vector<TensorT<S>> grads_;
  std::vector<bool> needs_;
  std::vector<std::function<void()>> nodes_;
  std::vector<std::pair<std::string, int>> params_;
  std::unordered_map<std::string, int> name_to_idx_;
  bool consumed_ = false;
};

using Tape = TapeT<float>;
using Var = VarT<float>;

// ---- op definitions ----

namespace detail {
template <typename S>
inline TapeT<S>& same_tape(VarT<S> a, VarT<S> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error("operands from different tapes");
  return *a.tape;
}
template <typename S>
inline bool out_needs(TapeT<S>& t, std::initializer_list<int> ins) {
  for (int i : ins)
    if (t.needs_grad(i)) return true;
  return false;
}
}  // namespace detail

template <typename S>
VarT<S> matmul(VarT<S> a, VarT<S> b, bool ta = false, bool tb = false) {
  TapeT<S>& t = detail::same_tape(a, b);
  VarT<S> out = t.push(kernels::matmul(t.val(a.idx), t.val(b.idx), ta, tb),
                       detail::out_needs(t, {a.idx, b.idx}));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.record([&t, ai, bi, oi, ta, tb] {
    if (!t.has_grad(oi)) return;
    const TensorT<S>& dC = t.grad(oi);
    const TensorT<S>& A = t.val(ai);
    const TensorT<S>& B = t.val(bi);
    if (t.needs_grad(ai)) {
      TensorT<S> dA = ta ? kernels::matmul(B, dC, tb, true) : kernels::matmul(dC, B, false, !tb);
      t.accumulate(ai, dA);
    }
    if (t.needs_grad(bi)) {
      TensorT<S> dB = tb ? kernels::matmul(dC, A, true, ta) : kernels::matmul(A, dC, !ta, false);
      t.accumulate(bi, dB);
    }
  });
  return out;
}

namespace detail {
// Reduces a gradient of `like`'s shape down to `target_shape` according to the
// broadcast that add/mul applied.
template <typename S>
TensorT<S> reduce_to(const TensorT<S>& g, const std::vector<int>& target_shape) {
  TensorT<S> out(target_shape);
  int64_t n = out.size();
  if (n == g.size()) {
    out.data = g.data;
    return out;
  }
  if (n == 1) {
    S s = 0;
    for (S v : g.data) s += v;
    out[0] = s;
    return out;
  }
  const S* pg = g.data.data();
  for (int64_t r = 0; r < g.size() / n; ++r, pg += n)
    for (int64_t i = 0; i < n; ++i) out[i] += pg[i];
  return out;
}
}  // namespace detail

template <typename S>
VarT<S> add(VarT<S> a, VarT<S> b) {
  TapeT<S>& t = detail::same_tape(a, b);
  VarT<S> out =
      t.push(kernels::add(t.val(a.idx), t.val(b.idx)), detail::out_needs(t, {a.idx, b.idx}));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.record([&t, ai, bi, oi] {
    if (!t.has_grad(oi)) return;
    const TensorT<S>& g = t.grad(oi);
    if (t.needs_grad(ai)) t.accumulate(ai, g);
    if (t.needs_grad(bi)) t.accumulate(bi, detail::reduce_to(g, t.val(bi).shape));
  });
  return out;
}

template <typename S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
  TapeT<S>& t = detail::same_tape(a, b);
  VarT<S> out =
      t.push(kernels::mul(t.val(a.idx), t.val(b.idx)), detail::out_needs(t, {a.idx, b.idx}));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.record([&t, ai, bi, oi] {
    if (!t.has_grad(oi)) return;
    const TensorT<S>& g = t.grad(oi);
    if (t.needs_grad(ai)) t.accumulate(ai, kernels::mul(g, t.val(bi)));
    if (t.needs_grad(bi))
      t.accumulate(bi, detail::reduce_to(kernels::mul(g, t.val(ai)), t.val(bi).shape));
  });
  return out;
}

template <typename S>
VarT<S> scale(VarT<S> a, S c) {
  TapeT<S>& t = *a.tape;
  VarT<S> out = t.push(kernels::scale(t.val(a.idx), c), t.needs_grad(a.idx));
  int ai = a.idx, oi = out.idx;
  t.record([&t, ai, oi, c] {
    if (t.has_grad(oi) && t.needs_grad(ai)) t.accumulate(ai, kernels::scale(t.grad(oi), c));
  });
  return out;
}

template <typename S>
VarT<S> sigmoid(VarT<S> a) {
  TapeT<S>& t = *a.tape;
  VarT<S> out = t.push(kernels::sigmoid(t.val(a.idx)), t.needs_grad(a.idx));
  int ai = a.idx, oi = out.idx;
  t.record([&t, ai, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(ai)) return;
    const TensorT<S>& y = t.val(oi);
    TensorT<S> d = t.grad(oi);
    for (int64_t i = 0; i < d.size(); ++i) d[i] *= y[i] * (S(1) - y[i]);
    t.accumulate(ai, d);
  });
  return out;
}

template <typename S>
VarT<S> vexp(VarT<S> a) {
  TapeT<S>& t = *a.tape;
  VarT<S> out = t.push(kernels::exp(t.val(a.idx)), t.needs_grad(a.idx));
  int ai = a.idx, oi = out.idx;
  t.record([&t, ai, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(ai)) return;
    t.accumulate(ai, kernels::mul(t.grad(oi), t.val(oi)));
  });
  return out;
}

template <typename S>
VarT<S> vlog(VarT<S> a) {
  TapeT<S>& t = *a.tape;
  VarT<S> out = t.push(kernels::log(t.val(a.idx)), t.needs_grad(a.idx));
  int ai = a.idx, oi = out.idx;
  t.record([&t, ai, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(ai)) return;
    TensorT<S> d = t.grad(oi);
    const TensorT<S>& x = t.val(ai);
    for (int64_t i = 0; i < d.size(); ++i) d[i] /= x[i];
    t.accumulate(ai, d);
  });
  return out;
}

template <typename S>
VarT<S> gelu(VarT<S> a) {
  TapeT<S>& t = *a.tape;
  VarT<S> out = t.push(kernels::gelu(t.val(a.idx)), t.needs_grad(a.idx));
  int ai = a.idx, oi = out.idx;
  t.record([&t, ai, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(ai)) return;
    TensorT<S> d = t.grad(oi);
    const TensorT<S>& x = t.val(ai);
    for (int64_t i = 0; i < d.size(); ++i) d[i] *= kernels::gelu_grad_scalar(x[i]);
    t.accumulate(ai, d);
  });
  return out;
}

template <typename S>
VarT<S> clamp(VarT<S> a, S lo, S hi) {
  TapeT<S>& t = *a.tape;
  VarT<S> out = t.push(kernels::clamp(t.val(a.idx), lo, hi), t.needs_grad(a.idx));
  int ai = a.idx, oi = out.idx;
  t.record([&t, ai, oi, lo, hi] {
    if (!t.has_grad(oi) || !t.needs_grad(ai)) return;
    TensorT<S> d = t.grad(oi);
    const TensorT<S>& x = t.val(ai);
    for (int64_t i = 0; i < d.size(); ++i)
      if (x[i] <= lo || x[i] >= hi) d[i] = S(0);
    t.accumulate(ai, d);
  });
  return out;
}

template <typename S>
VarT<S> softmax_last(VarT<S> a) {
  TapeT<S>& t = *a.tape;
  VarT<S> out = t.push(kernels::softmax_last(t.val(a.idx)), t.needs_grad(a.idx));
  int ai = a.idx, oi = out.idx;
  t.record([&t, ai, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(ai)) return;
    const TensorT<S>& y = t.val(oi);
    const TensorT<S>& dy = t.grad(oi);
    TensorT<S> dx = dy;
    int n = y.shape.back();
    int64_t rows = y.size() / n;
    for (int64_t r = 0; r < rows; ++r) {
      const S* py = y.data.data() + r * n;
      const S* pdy = dy.data.data() + r * n;
      S dot = 0;
      for (int i = 0; i < n; ++i) dot += py[i] * pdy[i];
      S* pdx = dx.data.data() + r * n;
      for (int i = 0; i < n; ++i) pdx[i] = py[i] * (pdy[i] - dot);
    }
    t.accumulate(ai, dx);
  });
  return out;
}

template <typename S>
VarT<S> layer_norm(VarT<S> x, VarT<S> g, VarT<S> b, S eps = S(1e-5)) {
  TapeT<S>& t = detail::same_tape(x, g);
  detail::same_tape(g, b);
  auto aux = kernels::layer_norm_full(t.val(x.idx), t.val(g.idx), t.val(b.idx), eps);
  bool ng = detail::out_needs(t, {x.idx, g.idx, b.idx});
  VarT<S> out = t.push(std::move(aux.y), ng);
  auto xhat = std::make_shared<TensorT<S>>(std::move(aux.xhat));
  auto inv_std = std::make_shared<std::vector<S>>(std::move(aux.inv_std));
  int xi = x.idx, gi = g.idx, bi = b.idx, oi = out.idx;
  t.record([&t, xi, gi, bi, oi, xhat, inv_std] {
    if (!t.has_grad(oi)) return;
    const TensorT<S>& dy = t.grad(oi);
    const TensorT<S>& gv = t.val(gi);
    int n = dy.shape.back();
    int64_t rows = dy.size() / n;
    if (t.needs_grad(gi) || t.needs_grad(bi)) {
      TensorT<S> dg(gv.shape), db(gv.shape);
      for (int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < n; ++i) {
          dg[i] += dy[r * n + i] * (*xhat)[r * n + i];
          db[i] += dy[r * n + i];
        }
      if (t.needs_grad(gi)) t.accumulate(gi, dg);
      if (t.needs_grad(bi)) t.accumulate(bi, db);
    }
    if (t.needs_grad(xi)) {
      TensorT<S> dx(t.val(xi).shape);
      for (int64_t r = 0; r < rows; ++r) {
        S m1 = 0, m2 = 0;
        for (int i = 0; i < n; ++i) {
          S gdy = dy[r * n + i] * gv[i];
          m1 += gdy;
          m2 += gdy * (*xhat)[r * n + i];
        }
        m1 /= S(n);
        m2 /= S(n);
        S is = (*inv_std)[static_cast<size_t>(r)];
        for (int i = 0; i < n; ++i) {
          S gdy = dy[r * n + i] * gv[i];
          dx[r * n + i] = (gdy - m1 - (*xhat)[r * n + i] * m2) * is;
        }
      }
      t.accumulate(xi, dx);
    }
  });
  return out;
}

template <typename S>
VarT<S> embedding(VarT<S> table, const std::vector<int>& ids, int B, int T) {
  TapeT<S>& t = *table.tape;
  VarT<S> out = t.push(kernels::embedding(t.val(table.idx), ids, B, T), t.needs_grad(table.idx));
  int ti = table.idx, oi = out.idx;
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  t.record([&t, ti, oi, ids_copy] {
    if (!t.has_grad(oi) || !t.needs_grad(ti)) return;
    const TensorT<S>& dy = t.grad(oi);
    TensorT<S> dt(t.val(ti).shape);
    int D = dt.shape[1];
    for (int64_t i = 0; i < static_cast<int64_t>(ids_copy->size()); ++i) {
      S* dst = dt.data.data() + static_cast<int64_t>((*ids_copy)[static_cast<size_t>(i)]) * D;
      const S* src = dy.data.data() + i * D;
      for (int d = 0; d < D; ++d) dst[d] += src[d];
    }
    t.accumulate(ti, dt);
  });
  return out;
}

template <typename S>
VarT<S> slice_seq(VarT<S> x, int s0, int s1) {
  TapeT<S>& t = *x.tape;
  VarT<S> out = t.push(kernels::slice_seq(t.val(x.idx), s0, s1), t.needs_grad(x.idx));
  int xi = x.idx, oi = out.idx;
  t.record([&t, xi, oi, s0, s1] {
    if (!t.has_grad(oi) || !t.needs_grad(xi)) return;
    const TensorT<S>& dy = t.grad(oi);
    TensorT<S> dx(t.val(xi).shape);
    int B = dx.shape[0], T = dx.shape[1], D = dx.shape[2];
    for (int b = 0; b < B; ++b)
      std::copy_n(dy.data.data() + static_cast<int64_t>(b) * (s1 - s0) * D,
                  static_cast<int64_t>(s1 - s0) * D,
                  dx.data.data() + (static_cast<int64_t>(b) * T + s0) * D);
    t.accumulate(xi, dx);
  });
  return out;
}

template <typename S>
VarT<S> concat_seq(VarT<S> a, VarT<S> b) {
  TapeT<S>& t = detail::same_tape(a, b);
  VarT<S> out =
      t.push(kernels::concat_seq(t.val(a.idx), t.val(b.idx)), detail::out_needs(t, {a.idx, b.idx}));
  int ai = a.idx, bi = b.idx, oi = out.idx;
  t.record([&t, ai, bi, oi] {
    if (!t.has_grad(oi)) return;
    const TensorT<S>& dy = t.grad(oi);
    int T1 = t.val(ai).shape[1];
    int T = dy.shape[1];
    if (t.needs_grad(ai)) t.accumulate(ai, kernels::slice_seq(dy, 0, T1));
    if (t.needs_grad(bi)) t.accumulate(bi, kernels::slice_seq(dy, T1, T));
  });
  return out;
}

template <typename S>
VarT<S> broadcast_rows(VarT<S> p, int B) {
  TapeT<S>& t = *p.tape;
  VarT<S> out = t.push(kernels::broadcast_rows(t.val(p.idx), B), t.needs_grad(p.idx));
  int pi = p.idx, oi = out.idx;
  t.record([&t, pi, oi, B] {
    if (!t.has_grad(oi) || !t.needs_grad(pi)) return;
    const TensorT<S>& dy = t.grad(oi);
    TensorT<S> dp(t.val(pi).shape);
    int64_t n = dp.size();
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < n; ++i) dp[i] += dy[static_cast<int64_t>(b) * n + i];
    t.accumulate(pi, dp);
  });
  return out;
}

template <typename S>
VarT<S> reshape(VarT<S> x, std::vector<int> shp) {
  TapeT<S>& t = *x.tape;
  VarT<S> out = t.push(t.val(x.idx).reshaped(shp), t.needs_grad(x.idx));
  int xi = x.idx, oi = out.idx;
  t.record([&t, xi, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(xi)) return;
    t.accumulate(xi, t.grad(oi).reshaped(t.val(xi).shape));
  });
  return out;
}

template <typename S>
VarT<S> split_heads(VarT<S> x, int H) {
  TapeT<S>& t = *x.tape;
  VarT<S> out = t.push(kernels::split_heads(t.val(x.idx), H), t.needs_grad(x.idx));
  int xi = x.idx, oi = out.idx;
  t.record([&t, xi, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(xi)) return;
    t.accumulate(xi, kernels::merge_heads(t.grad(oi)));
  });
  return out;
}

template <typename S>
VarT<S> merge_heads(VarT<S> x, int H) {
  TapeT<S>& t = *x.tape;
  VarT<S> out = t.push(kernels::merge_heads(t.val(x.idx)), t.needs_grad(x.idx));
  int xi = x.idx, oi = out.idx;
  t.record([&t, xi, oi, H] {
    if (!t.has_grad(oi) || !t.needs_grad(xi)) return;
    t.accumulate(xi, kernels::split_heads(t.grad(oi), H));
  });
  return out;
}

template <typename S>
VarT<S> add_key_mask(VarT<S> scores, const TensorT<S>& mask) {
  TapeT<S>& t = *scores.tape;
  VarT<S> out = t.push(kernels::add_key_mask(t.val(scores.idx), mask), t.needs_grad(scores.idx));
  int si = scores.idx, oi = out.idx;
  t.record([&t, si, oi] {
    if (!t.has_grad(oi) || !t.needs_grad(si)) return;
    t.accumulate(si, t.grad(oi));
  });
  return out;
}

template <typename S>
VarT<S> masked_bce(VarT<S> logits, const TensorT<S>& target, const TensorT<S>& mask) {
  TapeT<S>& t = *logits.tape;
  VarT<S> out = t.push(kernels::masked_bce(t.val(logits.idx), target, mask),
                       t.needs_grad(logits.idx));
  auto tgt = std::make_shared<TensorT<S>>(target);
  auto msk = std::make_shared<TensorT<S>>(mask);
  int li = logits.idx, oi = out.idx;
  t.record([&t, li, oi, tgt, msk] {
    if (!t.has_grad(oi) || !t.needs_grad(li)) return;
    S gout = t.grad(oi)[0];
    const TensorT<S>& x = t.val(li);
    int B = x.shape[0], T = x.shape[1];
    TensorT<S> dx(x.shape);
    for (int b = 0; b < B; ++b) {
      S msum = 0;
      for (int tt = 0; tt < T; ++tt) msum += msk->at(b, tt);
      S inv = gout / (S(B) * msum);
      for (int tt = 0; tt < T; ++tt) {
        S mk = msk->at(b, tt);
        if (mk == S(0)) continue;
        S sig = S(1) / (S(1) + std::exp(-x.at(b, tt)));
        dx.at(b, tt) = mk * inv * (sig - tgt->at(b, tt));
      }
    }
    t.accumulate(li, dx);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Execution contexts: the same model code runs taped (training) or plain
// (inference / black-box fine-tuning, which must never build a tape).
// ---------------------------------------------------------------------------

template <typename S>
struct TapedCtx {
  TapeT<S>& tape;
  // Parameters failing this predicate enter the graph as constants (frozen).
  std::function<bool(const std::string&)> trainable = [](const std::string&) { return true; };
  using V = VarT<S>;
  static constexpr bool taped = true;

  V param(const std::string& n, const TensorT<S>& t) {
    return trainable(n) ? tape.param(n, t) : tape.constant(t);
  }
  V constant(const TensorT<S>& t) { return tape.constant(t); }
  const TensorT<S>& value(const V& v) const { return tape.value(v); }

  V matmul(V a, V b, bool ta = false, bool tb = false) { return mprompt::matmul(a, b, ta, tb); }
  V add(V a, V b) { return mprompt::add(a, b); }
  V mul(V a, V b) { return mprompt::mul(a, b); }
  V scale(V a, S c) { return mprompt::scale(a, c); }
  V sigmoid(V a) { return mprompt::sigmoid(a); }
  V gelu(V a) { return mprompt::gelu(a); }
  V clamp(V a, S lo, S hi) { return mprompt::clamp(a, lo, hi); }
  V softmax_last(V a) { return mprompt::softmax_last(a); }
  V layer_norm(V x, V g, V b) { return mprompt::layer_norm(x, g, b); }
  V embedding(V tbl, const std::vector<int>& ids, int B, int T) {
    return mprompt::embedding(tbl, ids, B, T);
  }
  V slice_seq(V x, int s0, int s1) { return mprompt::slice_seq(x, s0, s1); }
  V concat_seq(V a, V b) { return mprompt::concat_seq(a, b); }
  V broadcast_rows(V p, int B) { return mprompt::broadcast_rows(p, B); }
  V reshape(V x, std::vector<int> shp) { return mprompt::reshape(x, std::move(shp)); }
  V split_heads(V x, int H) { return mprompt::split_heads(x, H); }
  V merge_heads(V x, int H) { return mprompt::merge_heads(x, H); }
  V add_key_mask(V s, const TensorT<S>& m) { return mprompt::add_key_mask(s, m); }
  V masked_bce(V x, const TensorT<S>& t, const TensorT<S>& m) {
    return mprompt::masked_bce(x, t, m);
  }
};

template <typename S>
struct EvalCtx {
  using V = TensorT<S>;
  static constexpr bool taped = false;

  V param(const std::string&, const TensorT<S>& t) { return t; }
  V constant(const TensorT<S>& t) { return t; }
  const TensorT<S>& value(const V& v) const { return v; }

  V matmul(const V& a, const V& b, bool ta = false, bool tb = false) {
    return kernels::matmul(a, b, ta, tb);
  }
  V add(const V& a, const V& b) { return kernels::add(a, b); }
  V mul(const V& a, const V& b) { return kernels::mul(a, b); }
  V scale(const V& a, S c) { return kernels::scale(a, c); }
  V sigmoid(const V& a) { return kernels::sigmoid(a); }
  V gelu(const V& a) { return kernels::gelu(a); }
  V clamp(const V& a, S lo, S hi) { return kernels::clamp(a, lo, hi); }
  V softmax_last(const V& a) { return kernels::softmax_last(a); }
  V layer_norm(const V& x, const V& g, const V& b) { return kernels::layer_norm(x, g, b, S(1e-5)); }
  V embedding(const V& tbl, const std::vector<int>& ids, int B, int T) {
    return kernels::embedding(tbl, ids, B, T);
  }
  V slice_seq(const V& x, int s0, int s1) { return kernels::slice_seq(x, s0, s1); }
  V concat_seq(const V& a, const V& b) { return kernels::concat_seq(a, b); }
  V broadcast_rows(const V& p, int B) { return kernels::broadcast_rows(p, B); }
  V reshape(const V& x, std::vector<int> shp) { return x.reshaped(std::move(shp)); }
  V split_heads(const V& x, int H) { return kernels::split_heads(x, H); }
  V merge_heads(const V& x, int) { return kernels::merge_heads(x); }
  V add_key_mask(const V& s, const TensorT<S>& m) { return kernels::add_key_mask(s, m); }
  V masked_bce(const V& x, const TensorT<S>& t, const TensorT<S>& m) {
    return kernels::masked_bce(x, t, m);
  }
};

}  // namespace mprompt

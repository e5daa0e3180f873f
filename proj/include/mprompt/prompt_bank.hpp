#pragma once

#include <vector>

#include "mprompt/gates.hpp"
#include "mprompt/rng.hpp"
#include "mprompt/tape.hpp"
#include "mprompt/tensor.hpp"

namespace mprompt {

// Per-layer bank of K modular prompts stored intrinsically: K vectors z_k of
// dimension d plus one shared projection A of shape (L*D) x d.
template <typename S>
struct PromptBankT {
  int layer_index = 0;
  int K = 8, L = 8, D = 64, d = 8;
  TensorT<S> z;  // (K, d)
  TensorT<S> A;  // (L*D, d)

  void init(Rng& rng, S stddev = S(0.02)) {
    z = TensorT<S>({K, d});
    A = TensorT<S>({L * D, d});
    for (auto& v : z.data) v = static_cast<S>(rng.normal()) * stddev;
    for (auto& v : A.data) v = static_cast<S>(rng.normal()) * stddev;
  }

  TensorT<S> z_k(int k) const {
    if (k < 0 || k >= K) throw ShapeError("prompt index out of range");
    TensorT<S> out({d});
    std::copy_n(z.data.data() + static_cast<int64_t>(k) * d, d, out.data.data());
    return out;
  }
};
using PromptBank = PromptBankT<float>;

// p = reshape(A . z, L x D); linear in z.
template <typename S>
TensorT<S> materialize_intrinsic(const TensorT<S>& z, const TensorT<S>& A, int L, int D) {
  if (z.ndim() != 1 || A.ndim() != 2 || A.shape[1] != z.shape[0] || A.shape[0] != L * D)
    throw ShapeError("materialize_intrinsic: A " + shape_str(A.shape) + " with z " +
                     shape_str(z.shape) + " does not make an " + std::to_string(L) + "x" +
                     std::to_string(D) + " prompt");
  TensorT<S> zc({static_cast<int>(z.size()), 1});
  zc.data = z.data;
  return kernels::matmul(A, zc).reshaped({L, D});
}

// p = (1/K) * sum_k w_hat_k * (A . z_k). Plain (tape-free) form.
template <typename S>
TensorT<S> compose_prompt(const PromptBankT<S>& bank, const GateSampleT<S>& gates) {
  if (static_cast<int>(gates.w_hat.size()) != bank.K)
    throw ShapeError("compose_prompt: gate count " + std::to_string(gates.w_hat.size()) +
                     " != bank K " + std::to_string(bank.K));
  TensorT<S> acc({bank.L, bank.D});
  for (int k = 0; k < bank.K; ++k) {
    S w = gates.w_hat[static_cast<size_t>(k)];
    TensorT<S> pk = materialize_intrinsic(bank.z_k(k), bank.A, bank.L, bank.D);
    for (int64_t i = 0; i < acc.size(); ++i) acc[i] += w * pk[i];
  }
  TensorT<S> out = kernels::scale(acc, S(1) / S(bank.K));
  require_finite(out, "compose_prompt");
  return out;
}

// Same composition through an execution context (taped for training, plain for
// inference). gates is a length-K vector value.
template <typename S, class Ctx>
typename Ctx::V compose_prompt_ctx(Ctx& cx, typename Ctx::V z, typename Ctx::V A,
                                   typename Ctx::V gates, int K, int L, int D) {
  auto gr = cx.reshape(gates, {1, K});
  auto zmix = cx.matmul(gr, z);                // (1,K) x (K,d) -> (1,d)
  auto pm = cx.matmul(A, zmix, false, true);   // (LD,d) x (d,1) -> (LD,1)
  return cx.scale(cx.reshape(pm, {L, D}), S(1) / S(K));
}

}  // namespace mprompt

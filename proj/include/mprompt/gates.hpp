#pragma once

#include <cmath>
#include <vector>

#include "mprompt/rng.hpp"
#include "mprompt/tape.hpp"
#include "mprompt/tensor.hpp"

namespace mprompt {

// Router logits are clamped to this range before exponentiation so the
// location parameter alpha = exp(w) stays inside f32 range.
inline constexpr double kRouterClamp = 30.0;

template <typename S>
struct RouterLogitsT {
  int layer_index = 0;
  TensorT<S> w;  // shape (K)

  int K() const { return static_cast<int>(w.size()); }
};
using RouterLogits = RouterLogitsT<float>;

// alpha = sigma(w) / (1 - sigma(w)) = exp(w), clamped.
template <typename S>
S location_param(S w) {
  if (!std::isfinite(w)) throw NumericError("location_param: non-finite logit");
  S c = std::clamp(w, S(-kRouterClamp), S(kRouterClamp));
  return std::exp(c);
}

// One relaxed-Bernoulli draw: v = log(alpha) + log(u) - log(1-u),
// w_hat = sigma(v / tau). Differentiable in w with u held fixed.
template <typename S>
S sample_relaxed(S w, S tau, S u) {
  if (!(tau > S(0))) throw ConfigError("relaxed sample needs tau > 0");
  if (!(u > S(0) && u < S(1)))
    throw NumericError("relaxed sample needs u strictly inside (0,1)");
  S c = std::clamp(w, S(-kRouterClamp), S(kRouterClamp));
  S v = c + std::log(u) - std::log1p(-u);
  S t = v / tau;
  return t >= 0 ? S(1) / (S(1) + std::exp(-t)) : std::exp(t) / (S(1) + std::exp(t));
}

template <typename S>
struct GateSampleT {
  std::vector<S> w_hat;   // (0,1) when relaxed; {0,1} when binarized
  S tau = S(0.5);
  std::vector<S> u;       // uniform draws used (empty for binarized samples)
  bool binary = false;
};
using GateSample = GateSampleT<float>;

template <typename S>
GateSampleT<S> sample_gates(const RouterLogitsT<S>& router, S tau, Rng& rng) {
  GateSampleT<S> g;
  g.tau = tau;
  g.binary = false;
  int K = router.K();
  g.w_hat.resize(static_cast<size_t>(K));
  g.u.resize(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    S u = static_cast<S>(rng.uniform_open());
    g.u[static_cast<size_t>(k)] = u;
    g.w_hat[static_cast<size_t>(k)] = sample_relaxed(router.w[k], tau, u);
  }
  return g;
}

// Inference rule: gate k opens iff w_k > 0, strictly.
template <typename S>
std::vector<int> binarize_router(const RouterLogitsT<S>& router) {
  std::vector<int> mask(static_cast<size_t>(router.K()));
  for (int k = 0; k < router.K(); ++k) {
    if (!std::isfinite(router.w[k])) throw NumericError("binarize_router: non-finite logit");
    mask[static_cast<size_t>(k)] = router.w[k] > S(0) ? 1 : 0;
  }
  return mask;
}

template <typename S>
GateSampleT<S> binarized_gates(const RouterLogitsT<S>& router) {
  GateSampleT<S> g;
  g.binary = true;
  g.tau = S(0);
  for (int m : binarize_router(router)) g.w_hat.push_back(static_cast<S>(m));
  return g;
}

// Taped/plain relaxed gate vector: sigma((clamp(w) + logit(u)) / tau).
template <typename S, class Ctx>
typename Ctx::V relaxed_gates(Ctx& cx, typename Ctx::V router, const std::vector<S>& u, S tau) {
  if (!(tau > S(0))) throw ConfigError("relaxed gates need tau > 0");
  TensorT<S> logit_u({static_cast<int>(u.size())});
  for (size_t k = 0; k < u.size(); ++k) {
    S uk = u[k];
    if (!(uk > S(0) && uk < S(1)))
      throw NumericError("relaxed gates need u strictly inside (0,1)");
    logit_u[static_cast<int64_t>(k)] = std::log(uk) - std::log1p(-uk);
  }
  auto c = cx.clamp(router, S(-kRouterClamp), S(kRouterClamp));
  auto v = cx.add(c, cx.constant(logit_u));
  return cx.sigmoid(cx.scale(v, S(1) / tau));
}

}  // namespace mprompt

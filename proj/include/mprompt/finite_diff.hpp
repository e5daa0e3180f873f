#pragma once

#include <functional>

#include "mprompt/tensor.hpp"

namespace mprompt {

// Central-difference validation oracle for analytic gradients.
// Returns max over coordinates of |analytic - central| / max(1, |analytic|).
template <typename S>
S finite_diff_check(const std::function<S(const TensorT<S>&)>& fn, const TensorT<S>& point,
                    const TensorT<S>& analytic_grad, S eps) {
  if (!(eps > S(0))) throw ConfigError("finite_diff_check needs eps > 0");
  if (analytic_grad.shape != point.shape)
    throw ShapeError("finite_diff_check: gradient shape " + shape_str(analytic_grad.shape) +
                     " mismatches point " + shape_str(point.shape));
  TensorT<S> probe = point;
  S worst = S(0);
  for (int64_t i = 0; i < point.size(); ++i) {
    S x = point[i];
    probe[i] = x + eps;
    S fp = fn(probe);
    probe[i] = x - eps;
    S fm = fn(probe);
    probe[i] = x;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_check: non-finite function value at probe point");
    S central = (fp - fm) / (S(2) * eps);
    S a = analytic_grad[i];
    S err = std::abs(a - central) / std::max(S(1), std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

// Convenience: derive the analytic gradient by a caller-supplied gradient
// function evaluated at `point`.
template <typename S>
S finite_diff_check(const std::function<S(const TensorT<S>&)>& fn,
                    const std::function<TensorT<S>(const TensorT<S>&)>& grad_fn,
                    const TensorT<S>& point, S eps) {
  return finite_diff_check(fn, point, grad_fn(point), eps);
}

}  // namespace mprompt

#include "mprompt/adam.hpp"

#include <cmath>

namespace mprompt {

void Adam::step(const std::vector<ParamRef>& params,
                const std::unordered_map<std::string, Tensor>& grads,
                const std::function<double(const std::string&)>& lr_of) {
  for (const auto& p : params) {
    auto git = grads.find(p.name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    Tensor& w = *p.tensor;
    if (g.shape != w.shape)
      throw ShapeError("gradient shape mismatch for parameter " + p.name);
    double lr = lr_of(p.name);
    if (lr == 0.0) continue;
    State& st = state_[p.name];
    if (st.t == 0) {
      st.m = Tensor::zeros(w.shape);
      st.v = Tensor::zeros(w.shape);
    }
    ++st.t;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
    for (size_t i = 0; i < w.data.size(); ++i) {
      double gi = static_cast<double>(g.data[i]);
      double m = beta1_ * static_cast<double>(st.m.data[i]) + (1.0 - beta1_) * gi;
      double v = beta2_ * static_cast<double>(st.v.data[i]) + (1.0 - beta2_) * gi * gi;
      st.m.data[i] = static_cast<float>(m);
      st.v.data[i] = static_cast<float>(v);
      double upd = lr * (m / bc1) / (std::sqrt(v / bc2) + eps_);
      w.data[i] = static_cast<float>(static_cast<double>(w.data[i]) - upd);
    }
    require_finite(w, "adam update of " + p.name);
  }
}

}  // namespace mprompt

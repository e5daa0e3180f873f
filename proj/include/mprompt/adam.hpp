#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mprompt/tensor.hpp"

namespace mprompt {

struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};

// Adam with bias correction and per-parameter lazy state, so sparsely-updated
// parameters (per-task routers) keep their own step counts. Learning rates are
// resolved per parameter name, which realizes fast/slow parameter groups.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef>& params,
            const std::unordered_map<std::string, Tensor>& grads,
            const std::function<double(const std::string&)>& lr_of);

  bool has_state(const std::string& name) const { return state_.count(name) > 0; }

 private:
  struct State {
    Tensor m, v;
    int64_t t = 0;
  };
  double beta1_, beta2_, eps_;
  std::unordered_map<std::string, State> state_;
};

}  // namespace mprompt

#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "mprompt/rng.hpp"
#include "mprompt/tensor.hpp"

namespace mprompt {

struct CmaesConfig {
  int dim = 0;
  double sigma0 = 0.5;
  std::vector<double> mean0;  // empty -> zeros
  uint64_t seed = 0;
  int lambda = 0;  // 0 -> 4 + floor(3 ln n)
};

// Covariance matrix adaptation evolution strategy (minimization), standard
// rank-1 + rank-mu recurrences with positive recombination weights. Internals
// run in double; covariance eigenvalues are floored at 1e-12 on decomposition.
class Cmaes {
 public:
  explicit Cmaes(const CmaesConfig& cfg);

  int dim() const { return n_; }
  int lambda() const { return lambda_; }
  double sigma() const { return sigma_; }
  int64_t generation() const { return gen_; }
  std::vector<double> mean() const;

  std::vector<std::vector<double>> ask();
  void tell(const std::vector<std::vector<double>>& candidates,
            const std::vector<double>& fitness);

  double best_fitness() const { return best_fit_; }
  const std::vector<double>& best_point() const { return best_x_; }
  int64_t evaluations() const { return evals_; }

 private:
  void decompose();

  int n_, lambda_, mu_;
  double sigma_, mu_eff_, c_sigma_, d_sigma_, c_c_, c1_, c_mu_, chi_n_;
  Eigen::VectorXd weights_, mean_, p_sigma_, p_c_;
  Eigen::MatrixXd C_, B_;
  Eigen::VectorXd D_;  // sqrt of eigenvalues
  bool decomposed_ = false;
  int64_t gen_ = 0, evals_ = 0;
  double best_fit_;
  std::vector<double> best_x_;
  Rng rng_;
};

}  // namespace mprompt

#pragma once

#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mprompt/rng.hpp"
#include "mprompt/tensor.hpp"

namespace mprompt {

struct GpConfig {
  std::vector<std::pair<double, double>> bounds;  // per-dimension search box
  double length_scale = 1.0;   // on inputs normalized to the unit box
  double signal_var = 1.0;
  double noise_var = 1e-4;
  double kappa = 2.0;          // UCB exploration weight
  int grid = 4096;             // quasi-random acquisition grid size
};

// Gaussian-process regression with an RBF kernel plus UCB acquisition
// maximized over a Halton grid. Observations are standardized before fitting.
class GpUcb {
 public:
  explicit GpUcb(GpConfig cfg);

  void add(const std::vector<double>& x, double y);
  int n_obs() const { return static_cast<int>(ys_.size()); }

  // Posterior mean/stddev at x in original y units (prior when no data).
  std::pair<double, double> posterior(const std::vector<double>& x) const;

  // argmax of mu + kappa*s over the acquisition grid; a uniform random point
  // in bounds when there are no observations yet.
  std::vector<double> suggest(Rng& rng) const;

 private:
  std::vector<double> normalize(const std::vector<double>& x) const;
  double kernel(const std::vector<double>& a, const std::vector<double>& b) const;
  void refit();

  GpConfig cfg_;
  std::vector<std::vector<double>> xs_;  // normalized inputs
  std::vector<double> ys_;               // raw observations
  double y_mean_ = 0.0, y_scale_ = 1.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
  bool fitted_ = false;
};

// Deterministic Halton sequence point (base-p radical inverse per dimension).
std::vector<double> halton_point(int index, int dims);

}  // namespace mprompt

#include "mprompt/cmaes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mprompt {

Cmaes::Cmaes(const CmaesConfig& cfg)
    : n_(cfg.dim),
      sigma_(cfg.sigma0),
      best_fit_(std::numeric_limits<double>::infinity()),
      rng_(cfg.seed) {
  if (n_ < 1) throw ConfigError("search dimension must be positive");
  if (!(sigma_ > 0.0)) throw ConfigError("initial step size must be positive");
  lambda_ = cfg.lambda > 0 ? cfg.lambda
                           : 4 + static_cast<int>(std::floor(3.0 * std::log(n_)));
  if (lambda_ < 2) throw ConfigError("population size must be at least 2");
  mu_ = lambda_ / 2;

  weights_ = Eigen::VectorXd(mu_);
  for (int i = 0; i < mu_; ++i)
    weights_(i) = std::log(mu_ + 0.5) - std::log(static_cast<double>(i + 1));
  weights_ /= weights_.sum();
  mu_eff_ = 1.0 / weights_.squaredNorm();

  double n = static_cast<double>(n_);
  c_sigma_ = (mu_eff_ + 2.0) / (n + mu_eff_ + 5.0);
  d_sigma_ = 1.0 + 2.0 * std::max(0.0, std::sqrt((mu_eff_ - 1.0) / (n + 1.0)) - 1.0) + c_sigma_;
  c_c_ = (4.0 + mu_eff_ / n) / (n + 4.0 + 2.0 * mu_eff_ / n);
  c1_ = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff_);
  c_mu_ = std::min(1.0 - c1_, 2.0 * (mu_eff_ - 2.0 + 1.0 / mu_eff_) /
                                  ((n + 2.0) * (n + 2.0) + mu_eff_));
  chi_n_ = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

  mean_ = Eigen::VectorXd::Zero(n_);
  if (!cfg.mean0.empty()) {
    if (static_cast<int>(cfg.mean0.size()) != n_)
      throw ShapeError("initial mean has " + std::to_string(cfg.mean0.size()) +
                       " entries for dimension " + std::to_string(n_));
    for (int i = 0; i < n_; ++i) mean_(i) = cfg.mean0[static_cast<size_t>(i)];
  }
  p_sigma_ = Eigen::VectorXd::Zero(n_);
  p_c_ = Eigen::VectorXd::Zero(n_);
  C_ = Eigen::MatrixXd::Identity(n_, n_);
  B_ = Eigen::MatrixXd::Identity(n_, n_);
  D_ = Eigen::VectorXd::Ones(n_);
  decomposed_ = true;
}

std::vector<double> Cmaes::mean() const {
  return std::vector<double>(mean_.data(), mean_.data() + n_);
}

void Cmaes::decompose() {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C_);
  if (es.info() != Eigen::Success)
    throw NumericError("covariance eigendecomposition failed");
  B_ = es.eigenvectors();
  D_ = es.eigenvalues().cwiseMax(1e-12).cwiseSqrt();
  decomposed_ = true;
}

std::vector<std::vector<double>> Cmaes::ask() {
  if (!decomposed_) decompose();
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<size_t>(lambda_));
  for (int k = 0; k < lambda_; ++k) {
    Eigen::VectorXd z(n_);
    for (int i = 0; i < n_; ++i) z(i) = rng_.normal();
    Eigen::VectorXd x = mean_ + sigma_ * (B_ * (D_.asDiagonal() * z));
    out.emplace_back(x.data(), x.data() + n_);
  }
  return out;
}

void Cmaes::tell(const std::vector<std::vector<double>>& candidates,
                 const std::vector<double>& fitness) {
  if (candidates.size() != fitness.size() ||
      static_cast<int>(candidates.size()) != lambda_)
    throw ShapeError("tell expects " + std::to_string(lambda_) + " candidates with fitness");
  for (double f : fitness)
    if (!std::isfinite(f)) throw NumericError("non-finite fitness in tell");

  std::vector<int> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return fitness[static_cast<size_t>(a)] <
                                              fitness[static_cast<size_t>(b)]; });
  evals_ += lambda_;
  if (fitness[static_cast<size_t>(order[0])] < best_fit_) {
    best_fit_ = fitness[static_cast<size_t>(order[0])];
    best_x_ = candidates[static_cast<size_t>(order[0])];
  }

  Eigen::VectorXd old_mean = mean_;
  Eigen::MatrixXd ys(n_, mu_);
  for (int i = 0; i < mu_; ++i) {
    const auto& x = candidates[static_cast<size_t>(order[static_cast<size_t>(i)])];
    for (int d = 0; d < n_; ++d) ys(d, i) = (x[static_cast<size_t>(d)] - old_mean(d)) / sigma_;
  }
  Eigen::VectorXd y_w = ys * weights_;
  mean_ = old_mean + sigma_ * y_w;

  if (!decomposed_) decompose();
  Eigen::VectorXd c_inv_sqrt_y =
      B_ * (D_.cwiseInverse().asDiagonal() * (B_.transpose() * y_w));
  p_sigma_ = (1.0 - c_sigma_) * p_sigma_ +
             std::sqrt(c_sigma_ * (2.0 - c_sigma_) * mu_eff_) * c_inv_sqrt_y;

  double n = static_cast<double>(n_);
  double expected_decay =
      std::sqrt(1.0 - std::pow(1.0 - c_sigma_, 2.0 * static_cast<double>(gen_ + 1)));
  bool h_sigma =
      p_sigma_.norm() / expected_decay / chi_n_ < 1.4 + 2.0 / (n + 1.0);

  p_c_ = (1.0 - c_c_) * p_c_;
  if (h_sigma) p_c_ += std::sqrt(c_c_ * (2.0 - c_c_) * mu_eff_) * y_w;

  Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n_, n_);
  for (int i = 0; i < mu_; ++i) rank_mu += weights_(i) * ys.col(i) * ys.col(i).transpose();
  double delta_h = h_sigma ? 0.0 : c_c_ * (2.0 - c_c_);
  C_ = (1.0 - c1_ - c_mu_) * C_ +
       c1_ * (p_c_ * p_c_.transpose() + delta_h * C_) + c_mu_ * rank_mu;
  C_ = (0.5 * (C_ + C_.transpose())).eval();

  sigma_ *= std::exp((c_sigma_ / d_sigma_) * (p_sigma_.norm() / chi_n_ - 1.0));
  if (!std::isfinite(sigma_) || !mean_.allFinite() || !C_.allFinite())
    throw NumericError("optimizer state became non-finite");
  ++gen_;
  decomposed_ = false;
}

}  // namespace mprompt

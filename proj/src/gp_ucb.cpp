#include "mprompt/gp_ucb.hpp"

#include <cmath>
#include <limits>

#include "mprompt/tensor.hpp"

namespace mprompt {

std::vector<double> halton_point(int index, int dims) {
  static const int bases[] = {2, 3, 5, 7, 11, 13, 17, 19};
  if (dims < 1 || dims > 8)
    throw ConfigError("acquisition grid supports 1..8 dimensions");
  std::vector<double> p(static_cast<size_t>(dims));
  for (int d = 0; d < dims; ++d) {
    int base = bases[d];
    double f = 1.0, r = 0.0;
    int i = index + 1;  // skip the all-zero corner
    while (i > 0) {
      f /= base;
      r += f * (i % base);
      i /= base;
    }
    p[static_cast<size_t>(d)] = r;
  }
  return p;
}

GpUcb::GpUcb(GpConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.bounds.empty()) throw ConfigError("search box is empty");
  for (auto [lo, hi] : cfg_.bounds)
    if (!(lo < hi)) throw ConfigError("degenerate search box bound");
  if (!(cfg_.length_scale > 0.0) || !(cfg_.signal_var > 0.0) || !(cfg_.noise_var > 0.0))
    throw ConfigError("kernel hyperparameters must be positive");
}

std::vector<double> GpUcb::normalize(const std::vector<double>& x) const {
  if (x.size() != cfg_.bounds.size())
    throw ShapeError("query point has " + std::to_string(x.size()) + " entries for a " +
                     std::to_string(cfg_.bounds.size()) + "-dimensional box");
  std::vector<double> z(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    auto [lo, hi] = cfg_.bounds[i];
    z[i] = (x[i] - lo) / (hi - lo);
  }
  return z;
}

double GpUcb::kernel(const std::vector<double>& a, const std::vector<double>& b) const {
  double d2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    d2 += d * d;
  }
  return cfg_.signal_var * std::exp(-d2 / (2.0 * cfg_.length_scale * cfg_.length_scale));
}

void GpUcb::add(const std::vector<double>& x, double y) {
  if (!std::isfinite(y)) throw NumericError("non-finite observation");
  xs_.push_back(normalize(x));
  ys_.push_back(y);
  refit();
}

void GpUcb::refit() {
  int n = static_cast<int>(ys_.size());
  double mean = 0.0;
  for (double y : ys_) mean += y;
  mean /= n;
  double var = 0.0;
  for (double y : ys_) var += (y - mean) * (y - mean);
  double scale = std::sqrt(var / n);
  y_mean_ = mean;
  y_scale_ = scale < 1e-12 ? 1.0 : scale;

  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      K(i, j) = kernel(xs_[static_cast<size_t>(i)], xs_[static_cast<size_t>(j)]) +
                (i == j ? cfg_.noise_var : 0.0);
  llt_.compute(K);
  if (llt_.info() != Eigen::Success)
    throw NumericError("optimizer fault: kernel matrix singular");
  Eigen::VectorXd yt(n);
  for (int i = 0; i < n; ++i) yt(i) = (ys_[static_cast<size_t>(i)] - y_mean_) / y_scale_;
  alpha_ = llt_.solve(yt);
  fitted_ = true;
}

std::pair<double, double> GpUcb::posterior(const std::vector<double>& x) const {
  std::vector<double> z = normalize(x);
  if (!fitted_ || ys_.empty())
    return {0.0, std::sqrt(cfg_.signal_var)};
  int n = static_cast<int>(ys_.size());
  Eigen::VectorXd ks(n);
  for (int i = 0; i < n; ++i) ks(i) = kernel(z, xs_[static_cast<size_t>(i)]);
  double mu = ks.dot(alpha_);
  Eigen::VectorXd v = llt_.solve(ks);
  double var = kernel(z, z) - ks.dot(v);
  double sd = std::sqrt(std::max(0.0, var));
  return {mu * y_scale_ + y_mean_, sd * y_scale_};
}

std::vector<double> GpUcb::suggest(Rng& rng) const {
  size_t dims = cfg_.bounds.size();
  if (ys_.empty()) {
    std::vector<double> x(dims);
    for (size_t i = 0; i < dims; ++i)
      x[i] = rng.uniform_in(cfg_.bounds[i].first, cfg_.bounds[i].second);
    return x;
  }
  std::vector<double> best;
  double best_acq = -std::numeric_limits<double>::infinity();
  for (int g = 0; g < cfg_.grid; ++g) {
    std::vector<double> u = halton_point(g, static_cast<int>(dims));
    std::vector<double> x(dims);
    for (size_t i = 0; i < dims; ++i)
      x[i] = cfg_.bounds[i].first + u[i] * (cfg_.bounds[i].second - cfg_.bounds[i].first);
    auto [mu, sd] = posterior(x);
    double acq = mu + cfg_.kappa * sd;
    if (acq > best_acq) {
      best_acq = acq;
      best = std::move(x);
    }
  }
  return best;
}

}  // namespace mprompt

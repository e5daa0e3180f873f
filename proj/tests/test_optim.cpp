#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "mprompt/adam.hpp"
#include "mprompt/cmaes.hpp"
#include "mprompt/gp_ucb.hpp"
#include "mprompt/rng.hpp"

using namespace mprompt;

namespace {

double sphere(const std::vector<double>& x) {
  double s = 0;
  for (double v : x) s += v * v;
  return s;
}

double rosenbrock(const std::vector<double>& x) {
  double s = 0;
  for (size_t i = 0; i + 1 < x.size(); ++i) {
    double a = x[i + 1] - x[i] * x[i];
    double b = 1.0 - x[i];
    s += 100.0 * a * a + b * b;
  }
  return s;
}

double run_cmaes(int dim, double sigma0, std::vector<double> mean0, uint64_t seed,
                 int max_gens, const std::function<double(const std::vector<double>&)>& f,
                 double stop_below) {
  CmaesConfig cfg;
  cfg.dim = dim;
  cfg.sigma0 = sigma0;
  cfg.mean0 = std::move(mean0);
  cfg.seed = seed;
  Cmaes opt(cfg);
  for (int g = 0; g < max_gens; ++g) {
    auto xs = opt.ask();
    std::vector<double> fs(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) fs[i] = f(xs[i]);
    opt.tell(xs, fs);
    if (opt.best_fitness() < stop_below) break;
  }
  return opt.best_fitness();
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST_CASE("first Adam step moves by about lr in the gradient direction") {
  Tensor w({2}, {1.0f, -2.0f});
  std::unordered_map<std::string, Tensor> grads;
  grads["w"] = Tensor({2}, {0.5f, -3.0f});
  Adam opt;
  opt.step({{"w", &w}}, grads, [](const std::string&) { return 0.1; });
  // bias-corrected first step: lr * g / (|g| + eps), i.e. lr * sign(g)
  CHECK(w.data[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  CHECK(w.data[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));
}

TEST_CASE("constant gradients give near-constant Adam steps") {
  Tensor w({1}, {1.0f});
  std::unordered_map<std::string, Tensor> grads;
  grads["w"] = Tensor({1}, {0.5f});
  Adam opt;
  for (int i = 0; i < 3; ++i)
    opt.step({{"w", &w}}, grads, [](const std::string&) { return 0.1; });
  CHECK(w.data[0] == doctest::Approx(1.0 - 0.3).epsilon(1e-5));
}

TEST_CASE("Adam matches a double-precision replay of its recurrences") {
  Rng rng(123);
  Tensor w({4});
  for (auto& v : w.data) v = static_cast<float>(rng.uniform_in(-1, 1));
  std::vector<double> ref(w.data.begin(), w.data.end());
  std::vector<double> m(4, 0.0), vv(4, 0.0);
  Adam opt;
  double lr = 0.05;
  for (int t = 1; t <= 5; ++t) {
    std::unordered_map<std::string, Tensor> grads;
    Tensor g({4});
    for (auto& x : g.data) x = static_cast<float>(rng.uniform_in(-2, 2));
    grads["w"] = g;
    for (int i = 0; i < 4; ++i) {
      double gi = g.data[static_cast<size_t>(i)];
      m[static_cast<size_t>(i)] = 0.9 * m[static_cast<size_t>(i)] + 0.1 * gi;
      vv[static_cast<size_t>(i)] = 0.999 * vv[static_cast<size_t>(i)] + 0.001 * gi * gi;
      double mh = m[static_cast<size_t>(i)] / (1.0 - std::pow(0.9, t));
      double vh = vv[static_cast<size_t>(i)] / (1.0 - std::pow(0.999, t));
      ref[static_cast<size_t>(i)] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    opt.step({{"w", &w}}, grads, [&](const std::string&) { return lr; });
  }
  for (int i = 0; i < 4; ++i)
    CHECK(w.data[static_cast<size_t>(i)] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-4));
}

TEST_CASE("zero learning rate and missing gradients leave parameters untouched") {
  Tensor w({2}, {1.5f, 2.5f});
  Tensor frozen = w;
  std::unordered_map<std::string, Tensor> grads;
  grads["w"] = Tensor({2}, {1.0f, 1.0f});
  Adam opt;
  opt.step({{"w", &w}}, grads, [](const std::string&) { return 0.0; });
  CHECK(w.data == frozen.data);
  CHECK_FALSE(opt.has_state("w"));  // lr 0 allocates no state
  opt.step({{"other", &w}}, grads, [](const std::string&) { return 0.1; });
  CHECK(w.data == frozen.data);  // no gradient entry for "other"
}

TEST_CASE("per-name learning rates realize fast and slow groups") {
  Tensor fast({1}, {0.0f}), slow({1}, {0.0f});
  std::unordered_map<std::string, Tensor> grads;
  grads["fast"] = Tensor({1}, {1.0f});
  grads["slow"] = Tensor({1}, {1.0f});
  Adam opt;
  opt.step({{"fast", &fast}, {"slow", &slow}}, grads,
           [](const std::string& n) { return n == "fast" ? 0.1 : 0.001; });
  CHECK(std::abs(fast.data[0]) == doctest::Approx(0.1).epsilon(1e-5));
  CHECK(std::abs(slow.data[0]) == doctest::Approx(0.001).epsilon(1e-5));
}

TEST_CASE("late-registered parameters start with fresh bias correction") {
  Tensor a({1}, {0.0f}), b({1}, {0.0f});
  Adam opt;
  std::unordered_map<std::string, Tensor> ga;
  ga["a"] = Tensor({1}, {1.0f});
  for (int i = 0; i < 10; ++i) opt.step({{"a", &a}, {"b", &b}}, ga, [](const std::string&) { return 0.1; });
  CHECK_FALSE(opt.has_state("b"));
  std::unordered_map<std::string, Tensor> gb;
  gb["b"] = Tensor({1}, {-2.0f});
  opt.step({{"a", &a}, {"b", &b}}, gb, [](const std::string&) { return 0.1; });
  // b's very first update is a full-size bias-corrected step
  CHECK(b.data[0] == doctest::Approx(0.1).epsilon(1e-5));
}

TEST_CASE("Adam traps shape mismatches and non-finite updates") {
  Tensor w({2}, {1.0f, 1.0f});
  std::unordered_map<std::string, Tensor> grads;
  grads["w"] = Tensor({3}, {1.0f, 1.0f, 1.0f});
  Adam opt;
  CHECK_THROWS_AS(opt.step({{"w", &w}}, grads, [](const std::string&) { return 0.1; }),
                  ShapeError);
  grads["w"] = Tensor({2}, {std::numeric_limits<float>::infinity(), 0.0f});
  CHECK_THROWS_AS(opt.step({{"w", &w}}, grads, [](const std::string&) { return 0.1; }),
                  NumericError);
}

// ---------------------------------------------------------------------------
// CMA-ES
// ---------------------------------------------------------------------------

TEST_CASE("default population size follows 4 + floor(3 ln n)") {
  CmaesConfig cfg;
  cfg.dim = 10;
  cfg.sigma0 = 0.5;
  CHECK(Cmaes(cfg).lambda() == 10);  // 4 + floor(3 ln 10) = 4 + 6
  cfg.dim = 2;
  CHECK(Cmaes(cfg).lambda() == 6);   // 4 + floor(3 ln 2) = 4 + 2
  cfg.dim = 100;
  CHECK(Cmaes(cfg).lambda() == 17);  // 4 + floor(3 ln 100) = 4 + 13
}

TEST_CASE("CMA-ES constructor and tell validate their inputs") {
  CmaesConfig cfg;
  cfg.dim = 0;
  CHECK_THROWS_AS(Cmaes{cfg}, ConfigError);
  cfg.dim = 4;
  cfg.sigma0 = 0.0;
  CHECK_THROWS_AS(Cmaes{cfg}, ConfigError);
  cfg.sigma0 = 0.5;
  cfg.lambda = 1;
  CHECK_THROWS_AS(Cmaes{cfg}, ConfigError);
  cfg.lambda = 0;
  cfg.mean0 = {1.0, 2.0};  // wrong length for dim 4
  CHECK_THROWS_AS(Cmaes{cfg}, ShapeError);
  cfg.mean0.clear();

  Cmaes opt(cfg);
  auto xs = opt.ask();
  std::vector<double> fs(xs.size(), 1.0);
  fs.pop_back();
  CHECK_THROWS_AS(opt.tell(xs, fs), ShapeError);
  fs.push_back(std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(opt.tell(xs, fs), NumericError);
}

TEST_CASE("ask produces lambda points of the right dimension, deterministically") {
  CmaesConfig cfg;
  cfg.dim = 5;
  cfg.sigma0 = 0.3;
  cfg.seed = 7;
  Cmaes a(cfg), b(cfg);
  auto xs = a.ask();
  REQUIRE(static_cast<int>(xs.size()) == a.lambda());
  for (const auto& x : xs) CHECK(x.size() == 5);
  auto ys = b.ask();
  CHECK(xs == ys);
}

TEST_CASE("CMA-ES minimizes a shifted sphere to high precision") {
  double best = run_cmaes(4, 0.5, {2.0, 2.0, 2.0, 2.0}, 3, 300, sphere, 1e-12);
  CHECK(best < 1e-12);
}

TEST_CASE("CMA-ES follows the bent Rosenbrock valley") {
  double best = run_cmaes(4, 0.3, std::vector<double>(4, 0.0), 5, 900, rosenbrock, 1e-8);
  CHECK(best < 1e-8);
}

TEST_CASE("best fitness never worsens and evaluations are counted") {
  CmaesConfig cfg;
  cfg.dim = 3;
  cfg.sigma0 = 0.4;
  cfg.mean0 = {1.0, -1.0, 0.5};
  cfg.seed = 11;
  Cmaes opt(cfg);
  double prev = std::numeric_limits<double>::infinity();
  for (int g = 0; g < 30; ++g) {
    auto xs = opt.ask();
    std::vector<double> fs(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) fs[i] = sphere(xs[i]);
    opt.tell(xs, fs);
    CHECK(opt.best_fitness() <= prev);
    prev = opt.best_fitness();
  }
  CHECK(opt.generation() == 30);
  CHECK(opt.evaluations() == 30 * opt.lambda());
  CHECK(opt.mean().size() == 3);
  CHECK(opt.sigma() > 0.0);
}

// ---------------------------------------------------------------------------
// GP-UCB
// ---------------------------------------------------------------------------

TEST_CASE("Halton points reproduce the radical-inverse fractions") {
  // base-2 sequence starting at index 1: 1/2, 1/4, 3/4, 1/8, 5/8
  double b2[] = {0.5, 0.25, 0.75, 0.125, 0.625};
  // base-3: 1/3, 2/3, 1/9, 4/9, 7/9
  double b3[] = {1.0 / 3, 2.0 / 3, 1.0 / 9, 4.0 / 9, 7.0 / 9};
  for (int i = 0; i < 5; ++i) {
    auto p = halton_point(i, 2);
    CHECK(p[0] == doctest::Approx(b2[i]).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(b3[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(halton_point(0, 9), ConfigError);
}

TEST_CASE("GP configuration is validated") {
  GpConfig cfg;
  CHECK_THROWS_AS(GpUcb{cfg}, ConfigError);  // empty box
  cfg.bounds = {{1.0, 1.0}};
  CHECK_THROWS_AS(GpUcb{cfg}, ConfigError);  // degenerate bound
  cfg.bounds = {{0.0, 1.0}};
  cfg.noise_var = 0.0;
  CHECK_THROWS_AS(GpUcb{cfg}, ConfigError);
  cfg.noise_var = 1e-4;
  GpUcb gp(cfg);
  CHECK_THROWS_AS(gp.add({0.5, 0.5}, 1.0), ShapeError);  // dim mismatch
  CHECK_THROWS_AS(gp.add({0.5}, std::nan("")), NumericError);
}

TEST_CASE("two-point posterior matches the closed-form GP solution") {
  GpConfig cfg;
  cfg.bounds = {{0.0, 1.0}};
  GpUcb gp(cfg);
  gp.add({0.0}, 0.0);
  gp.add({1.0}, 2.0);

  // hand-derived 2x2 solution: standardized y = (-1, +1), so the midpoint
  // mean collapses to the data mean and the variance has a closed form
  double nu = 1e-4;
  double a = 1.0 + nu;
  double b = std::exp(-0.5);       // k(0,1)
  double c = std::exp(-0.125);     // k(0.5, 0) = k(0.5, 1)
  auto [mu_mid, sd_mid] = gp.posterior({0.5});
  CHECK(mu_mid == doctest::Approx(1.0).epsilon(1e-9));
  double var_mid = 1.0 - 2.0 * c * c / (a + b);
  CHECK(sd_mid == doctest::Approx(std::sqrt(var_mid)).epsilon(1e-9));

  // at an observed point the mean approaches the observation
  auto [mu0, sd0] = gp.posterior({0.0});
  CHECK(mu0 == doctest::Approx(0.0).epsilon(0.01));
  CHECK(sd0 < 0.05);
  auto [mu1, sd1] = gp.posterior({1.0});
  CHECK(mu1 == doctest::Approx(2.0).epsilon(0.01));
  CHECK(sd1 < 0.05);
}

TEST_CASE("prior posterior before any data is (0, signal stddev)") {
  GpConfig cfg;
  cfg.bounds = {{-3.0, 3.0}, {-3.0, 3.0}};
  cfg.signal_var = 4.0;
  GpUcb gp(cfg);
  auto [mu, sd] = gp.posterior({0.0, 0.0});
  CHECK(mu == 0.0);
  CHECK(sd == doctest::Approx(2.0));
}

TEST_CASE("suggestions stay inside the search box in every regime") {
  GpConfig cfg;
  cfg.bounds = {{-3.0, 3.0}, {-1.0, 5.0}};
  GpUcb gp(cfg);
  Rng rng(21);
  auto x0 = gp.suggest(rng);  // random, no data yet
  REQUIRE(x0.size() == 2);
  CHECK(x0[0] >= -3.0);
  CHECK(x0[0] <= 3.0);
  CHECK(x0[1] >= -1.0);
  CHECK(x0[1] <= 5.0);
  Rng rng_b(22);
  CHECK(gp.suggest(rng_b) != x0);  // different stream, different random point

  gp.add({0.0, 0.0}, 1.0);
  gp.add({1.0, 2.0}, 3.0);
  auto x1 = gp.suggest(rng);
  CHECK(x1[0] >= -3.0);
  CHECK(x1[0] <= 3.0);
  CHECK(x1[1] >= -1.0);
  CHECK(x1[1] <= 5.0);
  // with data the acquisition argmax is deterministic
  CHECK(gp.suggest(rng) == x1);
}

TEST_CASE("repeated observations do not break the fit") {
  GpConfig cfg;
  cfg.bounds = {{0.0, 1.0}};
  GpUcb gp(cfg);
  for (int i = 0; i < 5; ++i) gp.add({0.5}, 1.7);
  auto [mu, sd] = gp.posterior({0.5});
  CHECK(std::isfinite(mu));
  CHECK(std::isfinite(sd));
  CHECK(mu == doctest::Approx(1.7).epsilon(0.01));
  Rng rng(23);
  auto x = gp.suggest(rng);
  CHECK(x[0] >= 0.0);
  CHECK(x[0] <= 1.0);
}

TEST_CASE("the acquisition favors a clearly better region") {
  // y rises linearly; after several observations the suggestion should sit
  // in the upper half of the box where mean + uncertainty is largest
  GpConfig cfg;
  cfg.bounds = {{0.0, 1.0}};
  GpUcb gp(cfg);
  for (double x : {0.1, 0.3, 0.5, 0.7}) gp.add({x}, x);
  Rng rng(29);
  auto x = gp.suggest(rng);
  CHECK(x[0] > 0.5);
}

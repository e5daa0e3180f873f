#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace mprompt {

// splitmix64 finalizer; used to derive independent named sub-streams from one
// run seed so the draw order of one component never perturbs another.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t base, std::initializer_list<uint64_t> salts) {
  uint64_t h = splitmix64(base);
  for (uint64_t s : salts) h = splitmix64(h ^ (s + 0x9e3779b97f4a7c15ull));
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t u64() { return gen_(); }

  // [0,1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // strictly inside (0,1); relaxed-Bernoulli draws must avoid the endpoints
  double uniform_open() {
    for (;;) {
      double u = uniform();
      if (u > 0.0 && u < 1.0) return u;
    }
  }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller without cached state so stream position is one-draw-per-call
    // predictable; fixed algorithm keeps serialized suites byte-stable.
    for (;;) {
      double u1 = uniform_open();
      double u2 = uniform();
      double r = std::sqrt(-2.0 * std::log(u1));
      double v = r * std::cos(2.0 * 3.14159265358979323846 * u2);
      if (std::isfinite(v)) return v;
    }
  }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    return static_cast<int>(gen_() % static_cast<uint64_t>(n));
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace mprompt

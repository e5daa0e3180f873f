#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#if defined(__GNUC__) && !defined(__clang__) && defined(__GLIBC__) && defined(__x86_64__)
// glibc ships vectorized erf/exp/log in libmvec but only advertises them under
// -ffast-math, which would sacrifice the IEEE semantics the numeric guards
// rely on. Declaring the simd variants explicitly lets the elementwise kernel
// loops vectorize while the rest of the program keeps strict float behavior.
// libm.so is a linker script that pulls libmvec in as needed.
extern "C" {
float erff(float) noexcept __attribute__((simd("notinbranch")));
double erf(double) noexcept __attribute__((simd("notinbranch")));
float expf(float) noexcept __attribute__((simd("notinbranch")));
double exp(double) noexcept __attribute__((simd("notinbranch")));
float logf(float) noexcept __attribute__((simd("notinbranch")));
double log(double) noexcept __attribute__((simd("notinbranch")));
float log1pf(float) noexcept __attribute__((simd("notinbranch")));
double log1p(double) noexcept __attribute__((simd("notinbranch")));
}
#endif

namespace mprompt {

// Error taxonomy; the CLI maps these onto exit codes.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric fault: " + msg) {}
};
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("i/o error: " + msg) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// Dense row-major tensor over scalar S (float in production, double in
// gradient-oracle tests).
template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> shp) : shape(std::move(shp)) {
    data.assign(static_cast<size_t>(count(shape)), S(0));
  }
  TensorT(std::vector<int> shp, std::vector<S> values)
      : shape(std::move(shp)), data(std::move(values)) {
    if (static_cast<int64_t>(data.size()) != count(shape))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not fill shape " + shape_str(shape));
  }

  static int64_t count(const std::vector<int>& shp) {
    int64_t n = 1;
    for (int d : shp) {
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shp));
      n *= d;
    }
    return n;
  }

  static TensorT zeros(std::vector<int> shp) { return TensorT(std::move(shp)); }
  static TensorT full(std::vector<int> shp, S v) {
    TensorT t(std::move(shp));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // Row-major element access for up to 4 indices.
  S& at(int i) { return data[static_cast<size_t>(i)]; }
  S& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  S& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  S& at(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  S at(int i) const { return data[static_cast<size_t>(i)]; }
  S at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  S at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  S at(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool all_finite() const {
    // Non-finite IEEE values are exactly those with an all-ones exponent
    // field; the integer OR reduction vectorizes, unlike isfinite calls.
    using U = std::conditional_t<sizeof(S) == 4, uint32_t, uint64_t>;
    static_assert(sizeof(S) == sizeof(U));
    constexpr U mask = sizeof(S) == 4 ? U(0x7F800000u) : U(0x7FF0000000000000ull);
    U bad = 0;
    for (S v : data) bad |= ((std::bit_cast<U>(v) & mask) == mask) ? U(1) : U(0);
    return bad == 0;
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  TensorT reshaped(std::vector<int> shp) const {
    if (count(shp) != size())
      throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(shp));
    TensorT t;
    t.shape = std::move(shp);
    t.data = data;
    return t;
  }

  template <typename T>
  TensorT<T> cast() const {
    TensorT<T> t;
    t.shape = shape;
    t.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<T>(data[i]);
    return t;
  }
};

using Tensor = TensorT<float>;

template <typename S>
inline void require_finite(const TensorT<S>& t, const char* op) {
  if (!t.all_finite()) throw NumericError("non-finite value after op '" + std::string(op) + "'");
}

template <typename S>
inline void require_finite(const TensorT<S>& t, const std::string& op) {
  require_finite(t, op.c_str());
}

}  // namespace mprompt

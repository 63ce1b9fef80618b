#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace uniperc {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Named random stream. Distinct names on the same base seed give independent
// streams; draw helpers avoid std::*_distribution so sequences are identical
// across standard libraries.
class RngStream {
 public:
  RngStream() : RngStream(0, "default") {}
  RngStream(std::uint64_t seed, const std::string& name)
      : eng_(splitmix64(seed ^ fnv1a64(name))) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0,1)
  double next_double() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) {
    // rejection sampling, unbiased
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
  }

  int next_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  double next_gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // categorical draw from non-negative weights
  int next_categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = next_double() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_ << " " << (have_spare_ ? 1 : 0) << " " << spare_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    int hs = 0;
    is >> eng_ >> hs >> spare_;
    have_spare_ = hs != 0;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace uniperc

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace caetswin {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Deterministic random stream. The engine is mt19937_64 (bit-exact per the
/// standard); all distribution transforms are implemented here so that the
/// produced doubles do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller (two engine draws per call).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586 * u2);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  /// Normal(0, sigma) resampled until within +-clip.
  double trunc_normal(double sigma, double clip) {
    for (;;) {
      const double v = sigma * normal();
      if (v >= -clip && v <= clip) return v;
    }
  }

  /// Fisher-Yates, independent of std::shuffle's unspecified draw pattern.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent child stream, stable under reordering of sibling streams.
  Rng child(std::uint64_t tag) const {
    return Rng(splitmix64(seed_ ^ (0x9E3779B97F4A7C15ULL * (tag + 1))));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace caetswin

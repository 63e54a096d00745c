#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cape {

/// Deterministic random source. std::mt19937_64 is fully specified by the
/// standard; the distributions are implemented here because the standard
/// library's are not, and every seeded run must be reproducible byte for byte.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) { return bits() % n; }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(two_pi * u2);
    have_spare_ = true;
    return mag * std::cos(two_pi * u2);
  }

  /// Derive an independent stream, e.g. one per worker or per view.
  Rng fork(std::uint64_t salt) {
    return Rng(mix(engine_(), salt));
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the pair
    std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace cape

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace uwseg {

/// SplitMix64 generator. Small, seedable and identical on every platform,
/// which is all the library needs for initialization and augmentation.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Box-Muller; one value per call keeps the stream position predictable.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal resampled until it falls within two standard deviations.
  double truncated_normal(double stddev) {
    for (;;) {
      double z = normal();
      if (std::abs(z) <= 2.0) return z * stddev;
    }
  }

  /// Independent child stream; used to give each subsystem its own sequence.
  Rng fork() { return Rng(next_u64()); }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

}  // namespace uwseg

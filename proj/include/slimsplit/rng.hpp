#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace slimsplit {

/// Seeded 64-bit Mersenne Twister with the few draws this project needs.
/// Uniform doubles are built from the top 53 bits so streams are identical
/// on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Deterministic stream derived from a seed and a list of stream tags.
  Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t mix = seed ^ 0x9E3779B97F4A7C15ULL;
    for (std::uint64_t t : tags) mix = splitmix(mix ^ t);
    engine_.seed(mix);
  }

  std::uint64_t next() { return engine_(); }

  /// [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], unbiased by rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = span == 0 ? 0 : (~std::uint64_t{0} / span) * span;
    std::uint64_t v = engine_();
    while (limit != 0 && v >= limit) v = engine_();
    return lo + static_cast<std::int64_t>(span == 0 ? v : v % span);
  }

  /// Standard normal by Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * 3.14159265358979323846 * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace slimsplit

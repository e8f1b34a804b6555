#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace rebalance {

/**
 * Portable seeded generator.
 *
 * Raw bits come from std::mt19937_64, whose output sequence is fixed by the
 * C++ standard. All conversions to doubles, bounded integers and normals are
 * done here rather than through <random> distributions, whose algorithms are
 * implementation-defined:
 *
 *   uniform01()  = (next_u64() >> 11) * 2^-53          in [0, 1)
 *   below(n)     = Lemire multiply-shift with rejection in [0, n)
 *   normal()     = Box-Muller, cos branch only, u1 taken from (0, 1]
 *
 * Sub-streams (bootstrap replicate r, simulator episode e) are seeded with
 * derive_seed(seed, index), a SplitMix64 finalizer over both words.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  bool bernoulli(double p) { return uniform01() < p; }

  std::uint64_t below(std::uint64_t n) {
    // n > 0 required.
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    const double z = std::sqrt(-2.0 * std::log(u1)) *
                     std::cos(2.0 * std::numbers::pi * u2);
    return mean + stddev * z;
  }

 private:
  std::mt19937_64 engine_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(index));
}

}  // namespace rebalance

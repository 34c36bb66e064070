// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dmnn {

/// Mixes two 64-bit values into a stream seed (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Explicit, seedable random stream. All draws are derived from the
/// standard-specified mt19937_64 sequence, so a given seed produces the
/// same values on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0,1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(two_pi * u2);
    has_spare_ = true;
    return mag * std::cos(two_pi * u2);
  }

  /// Gumbel(0,1) from a uniform draw: -ln(-ln(U)), U clamped to
  /// [1e-20, 1 - 1e-7].
  static double gumbel_from_uniform(double u) {
    if (u < 1e-20) u = 1e-20;
    if (u > 1.0 - 1e-7) u = 1.0 - 1e-7;
    return -std::log(-std::log(u));
  }

  double gumbel() { return gumbel_from_uniform(uniform()); }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return x % n;
  }

  /// Derives an independent stream; the parent stream is not advanced.
  Rng fork(std::uint64_t stream) const {
    return Rng(mix_seed(base_entropy_ ^ stream, stream));
  }

  /// Remembers the construction seed so fork() is reproducible.
  static Rng seeded(std::uint64_t seed) {
    Rng r(seed);
    r.base_entropy_ = seed;
    return r;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  std::uint64_t base_entropy_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dmnn

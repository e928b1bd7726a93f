#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace patchguard {

// xorshift64* generator. Everything seeded in this project goes through this
// type instead of <random> so that streams are identical across standard
// library implementations.
class Xorshift64 {
 public:
  explicit Xorshift64(std::uint64_t seed) : state_(scramble(seed)) {}

  std::uint64_t next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound), bound > 0. Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t r = next();
    while (r >= limit) r = next();
    return r % bound;
  }

  // Standard normal via Box-Muller (one value per call, the pair partner is discarded).
  double normal();

  template <class T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  // splitmix64 finalizer; also maps seed 0 to a non-zero state.
  static std::uint64_t scramble(std::uint64_t seed) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z == 0 ? 0x9E3779B97F4A7C15ULL : z;
  }

  std::uint64_t state_;
};

}  // namespace patchguard

#pragma once

#include <cmath>
#include <cstdint>

namespace mam {

// Reference PRNG used everywhere randomness is needed. The recipe is
// normative so that seeded results are reproducible across platforms and
// reimplementations:
//
//   state += 0x9E3779B97F4A7C15
//   z  = state
//   z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
//   z ^= z >> 27;  z *= 0x94D049BB133111EB
//   return z ^ (z >> 31)                        (splitmix64)
//
//   uniform_int(b): t = (2^64 - b) % b; draw r until r >= t; return r % b
//   uniform01():    (next() >> 11) * 2^-53
//   geometric(m):   1 + floor(log1p(-u) / log1p(-1/m)), clamped by callers
//   normal():       Box-Muller, sqrt(-2 ln u1) * cos(2 pi u2), one per pair
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Unbiased integer in [0, bound) via rejection sampling.
  uint64_t uniform_int(uint64_t bound) {
    uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      uint64_t r = next();
      if (r >= threshold) return r % bound;
    }
  }

  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Geometric on {1, 2, ...} with the given mean (inverse CDF on one uniform).
  int geometric(double mean) {
    double p = 1.0 / mean;
    if (p >= 1.0) return 1;
    double u = uniform01();
    return 1 + static_cast<int>(std::floor(std::log1p(-u) / std::log1p(-p)));
  }

  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t state_;
};

// Stream derivation for (seed, salt...) tuples: one mixing round per salt.
// Keeps parallel per-utterance streams independent of scheduling.
inline uint64_t derive_seed(uint64_t base, uint64_t salt) {
  SplitMix64 g(base ^ (salt * 0x9E3779B97F4A7C15ull + 0x2545F4914F6CDD1Dull));
  return g.next();
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

}  // namespace mam

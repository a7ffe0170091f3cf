#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace woc {

// The std:: distributions are implementation-defined; these helpers map raw
// mt19937_64 output so seeded runs are bit-identical across standard libraries.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Box-Muller; consumes two draws per call.
inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                    std::cos(2.0 * std::numbers::pi * u2);
}

inline bool coin_flip(Rng& rng) { return (rng() >> 63) != 0; }

inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  // Lemire-free simple rejection keeps it portable and unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace woc

#pragma once

#include <cmath>
#include <cstdint>

namespace raglens {

// Deterministic RNG with identical output on every platform. std:: distributions
// are implementation-defined, so sampling is hand-rolled on top of splitmix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  // standard normal via Box-Muller (cosine branch only, order-stable)
  double next_normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // derives an independent stream for a tagged sub-task
  static uint64_t mix(uint64_t seed, uint64_t tag) {
    Rng r(seed ^ (0x94d049bb133111ebull * (tag + 1)));
    return r.next_u64();
  }

 private:
  uint64_t state_;
};

}  // namespace raglens

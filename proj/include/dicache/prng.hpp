#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "dicache/error.hpp"

namespace dicache {

// splitmix64 stream. Single owner; copy to fork an identical sequence.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // 53-bit uniform in [0, 1).
  double next_unit() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    if (!(lo <= hi)) {
      throw Error(ErrorKind::InvalidRange, "uniform requires lo <= hi");
    }
    if (lo == hi) return lo;
    double v = lo + (hi - lo) * next_unit();
    // Affine scaling can round up onto hi for wide ranges.
    return v < hi ? v : std::nextafter(hi, lo);
  }

  // Box-Muller on two consecutive uniforms; returns the cosine branch only so
  // every draw consumes exactly two u64 values.
  double gaussian() noexcept {
    double u1 = next_unit();
    double u2 = next_unit();
    // Map u1 into (0, 1] so the log is finite.
    double radius = std::sqrt(-2.0 * std::log(1.0 - u1));
    return radius * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace dicache

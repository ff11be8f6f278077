#pragma once

// Counter-based deterministic random generator. Every draw is a pure
// function of (seed, counter), so streams can be derived, replayed and
// partitioned across callers without shared state.

#include <cstdint>
#include <cmath>
#include <numbers>

namespace evb {

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64() {
    return detail::mix64(seed_ + (++counter_) * 0x9e3779b97f4a7c15ull);
  }

  // Uniform on (0, 1].
  double uniform() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(t);
    have_cached_ = true;
    return r * std::cos(t);
  }

  // Independent stream for a sub-task, e.g. derive(seed, epoch, batch).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t h = detail::mix64(seed ^ 0x243f6a8885a308d3ull);
    h = detail::mix64(h ^ (a + 0x9e3779b97f4a7c15ull));
    h = detail::mix64(h ^ (b + 0x452821e638d01377ull));
    return h;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace evb

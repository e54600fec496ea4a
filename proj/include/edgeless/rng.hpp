#pragma once

#include <cmath>
#include <cstdint>

namespace edgeless {

// Splittable counter-style generator built on the SplitMix64 mixer.
// Every consumer takes an explicit seed, so restarts and grid cells can run
// in parallel and still reproduce the sequential results bit for bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Independent stream derived from (seed, stream); used to hand each
  // restart / fold / grid cell its own generator.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    Rng r(mix(seed ^ 0x9e3779b97f4a7c15ull) ^ mix(stream + 0x632be59bd9b4e019ull));
    r.next_u64();
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; safe as a log() argument.
  double uniform_pos() { return 1.0 - uniform(); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. Consumes exactly two uniforms per draw,
  // which keeps the stream layout independent of rejection luck.
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection-free-enough bounded draw; bias is < 2^-64.
    return static_cast<std::uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace edgeless

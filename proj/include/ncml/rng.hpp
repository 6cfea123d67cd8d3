#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ncml {

// splitmix64 step. Also used standalone to derive stream seeds.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Small deterministic PRNG with counter-based stream derivation.
//
// All randomness in this library flows through Rng so that results are
// reproducible across platforms and independent of thread scheduling:
// a worker that needs per-item randomness derives Rng::stream(seed, item)
// rather than sharing one sequential generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // decorrelate trivially related seeds
    next_u64();
    next_u64();
  }

  // Independent stream for (seed, id). Used for per-sample draws.
  static Rng stream(std::uint64_t seed, std::uint64_t id) {
    std::uint64_t a = seed;
    std::uint64_t b = id ^ 0x632be59bd9b4e019ULL;
    std::uint64_t mixed = splitmix64_next(a) ^ (splitmix64_next(b) * 0xff51afd7ed558ccdULL);
    return Rng(mixed);
  }

  static Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a;
    return stream(seed ^ splitmix64_next(s), b);
  }

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in the open interval (0, 1); safe for log/logit transforms
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (two uniforms per draw, no cached spare,
  // so the consumed stream length is predictable)
  double normal() {
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // uniform integer in [0, n), n > 0
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

 private:
  std::uint64_t state_;
};

}  // namespace ncml

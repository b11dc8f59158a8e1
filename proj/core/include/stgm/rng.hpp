#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace stgm {

/// Deterministic random source. The mt19937_64 core is fully specified by the
/// C++ standard and the derived draws below avoid std::*_distribution (whose
/// algorithms are implementation-defined), so a given seed produces
/// bit-identical streams on every platform.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64+boxmuller/1";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform draw on [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Normal draw via Box-Muller; consumes exactly two uniforms.
  double normal(double mean, double sd) {
    double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return mean + sd * z;
  }

  /// Bernoulli draw; consumes one uniform.
  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

  /// splitmix64 hash step, used to derive well-separated stream seeds.
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  /// Seed for the stream of one study replicate, derived from
  /// (base seed, sample size, replicate index).
  static std::uint64_t stream_seed(std::uint64_t base, std::uint64_t m, std::uint64_t replicate) {
    return mix(mix(base ^ (m * 0x9e3779b97f4a7c15ULL)) ^ replicate);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace stgm

#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

namespace bayeslayers {

// SplitMix64 step: advances `state` and returns the next output.
std::uint64_t splitmix64(std::uint64_t& state);

// xoshiro256** seeded by SplitMix64 expansion of a 64-bit seed.
//
// A generator is single-owner. Parallel work derives child generators with
// stream(seed, {i, j, ...}); the child depends only on the seed and the index
// path, never on how many values any other generator has produced.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

  std::uint64_t next();
  std::uint64_t operator()() { return next(); }
  static constexpr std::uint64_t min() { return 0; }
  static constexpr std::uint64_t max() { return ~std::uint64_t{0}; }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on (0, 1].
  double uniform_open_zero();
  // Uniform integer in [0, bound), bound > 0. Lemire's nearly-divisionless method.
  std::uint64_t below(std::uint64_t bound);
  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal();

  std::uint64_t seed() const { return seed_; }

 private:
  std::array<std::uint64_t, 4> s_{};
  std::uint64_t seed_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// One draw from N(mean, sigma^2). Throws std::invalid_argument if sigma <= 0.
double gauss_sample(Rng& rng, double mean, double sigma);

}  // namespace bayeslayers

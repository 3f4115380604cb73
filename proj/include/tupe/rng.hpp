#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tupe {

/// SplitMix64 finaliser.
std::uint64_t splitmix64(std::uint64_t x);

/// Folds a sequence of integers into one 64-bit key, order-sensitive.
std::uint64_t mix_key(std::initializer_list<std::uint64_t> parts);

/// Stateless uniform draw in [0, 1) addressed by (key, counter): output
/// number `counter` of a SplitMix64 stream seeded with `key`. Dropout
/// masks use this so a mask depends only on where it is drawn, not on
/// how many draws happened before it.
double counter_uniform(std::uint64_t key, std::uint64_t counter);

/// Sequential generator for data generation, masking and initialisation.
/// Every draw is defined on top of raw mt19937_64 output so streams are
/// identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// 53-bit uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (no cached second value).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tupe

#pragma once

#include <cstdint>
#include <random>

namespace subformer {

// Seeded generator. The raw 64-bit stream comes from std::mt19937_64, whose
// output sequence is fixed by the standard; every derived distribution is
// computed here rather than through <random> distributions, which are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller.
  double normal();

  // Normal(0, stddev) truncated at +-2 stddev by rejection.
  double truncated_normal(double stddev);

  // Derives an independent stream seed from (seed, counter) with splitmix64.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t counter);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace subformer

#pragma once

#include <cstdint>

namespace drm {

// Named stream offsets so that independent random mechanisms (noise, label
// flips, tie-breaking, initialization, ...) never share a generator. Changing
// how one mechanism consumes randomness then leaves the others untouched.
namespace streams {
inline constexpr std::uint64_t kXNoise = 1;        // covariate noise
inline constexpr std::uint64_t kLabelFlip = 2;     // label corruption
inline constexpr std::uint64_t kMargin = 3;        // margin sample u
inline constexpr std::uint64_t kSpuriousFlip = 4;  // spurious-channel flips
inline constexpr std::uint64_t kXi = 5;            // p-value tie breaking
inline constexpr std::uint64_t kInit = 6;          // parameter initialization
inline constexpr std::uint64_t kShuffle = 7;       // minibatch shuffling
inline constexpr std::uint64_t kSubsample = 8;     // detection subsequences
inline constexpr std::uint64_t kSynthDigits = 9;   // synthetic glyph rendering
inline constexpr std::uint64_t kTestSplit = 10;    // test-set derivation
}  // namespace streams

// Small deterministic generator (xoshiro256**) seeded via splitmix64 from a
// (seed, stream) pair. Hand-rolled so sequences are identical across standard
// libraries and platforms.
class Rng {
 public:
  Rng() : Rng(0, 0) {}
  Rng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();

  // Uniform on [0, 1) with 53 random bits.
  double uniform();

  // Uniform on [lo, hi).
  double uniform(double lo, double hi);

  // Standard normal via the Marsaglia polar method.
  double normal();

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::int64_t uniform_int(std::int64_t n);

  // Bernoulli(p).
  bool flip(double p) { return uniform() < p; }

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Deterministic seed mixing for derived seeds (e.g. the test-split seed).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace drm

#pragma once

#include <cstdint>
#include <limits>

namespace quantod {

/// SplitMix64 generator. Every random draw in the library (shuffling, dropout
/// masks, initialization, synthetic data) goes through this engine so a run is
/// a pure function of its seed. Satisfies UniformRandomBitGenerator, so it can
/// drive the <random> distributions.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Derives an independent child stream; advances this generator once.
  SplitMix64 split() noexcept {
    return SplitMix64((*this)() ^ 0x6a09e667f3bcc909ULL);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

/// Seeds for the independent streams a training run consumes.
inline SplitMix64 derive_stream(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 base(seed ^ (0xd1b54a32d192ed03ULL * (stream + 1)));
  return base.split();
}

}  // namespace quantod

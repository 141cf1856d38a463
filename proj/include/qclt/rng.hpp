#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>

namespace qclt {

/// Finalizer of SplitMix64; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives a stream key from a master seed and a path of integer labels,
/// e.g. (seed, experiment tag, n index, replica). Equal paths give equal keys;
/// changing any label gives an unrelated key.
constexpr std::uint64_t derive_key(std::uint64_t master,
                                   std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t key = mix64(master ^ 0x5851f42d4c957f2dULL);
  for (std::uint64_t label : path) {
    key = mix64(key + 0x9e3779b97f4a7c15ULL * (label + 1));
  }
  return key;
}

/// Counter-based generator: the i-th output is mix64(key + i * golden).
/// Satisfies UniformRandomBitGenerator, so it plugs into <random>
/// distributions. Streams with different keys are independent for all
/// practical purposes, which is what makes replica results independent of
/// thread scheduling.
class CounterRng {
public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  constexpr result_type operator()() noexcept {
    ++counter_;
    return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Index i such that cumulative[i-1] <= u < cumulative[i]; cumulative must be
/// non-decreasing with last entry 1 (or the row total). Falls back to the
/// last index with positive mass when rounding leaves u above the final entry.
int sample_from_cumulative(std::span<const double> cumulative, double u);

}  // namespace qclt

#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace cdm {

class Tensor;

/// Seeded random source.
///
/// Wraps std::mt19937_64 (whose output sequence is fixed by the standard) and
/// derives uniforms, bounded integers and normals itself so that a seed gives
/// the same stream regardless of the standard library in use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal draw (Box-Muller).
  double normal();

  void fill_normal(Tensor& t);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_int(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64-derived child seed, so distinct streams never share state.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace cdm

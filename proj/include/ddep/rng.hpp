#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ddep {

/// Seeded random stream. Uses the bit-exact mt19937_64 engine and derives
/// floats and normals from raw bits so sequences match across standard
/// library implementations. `split` derives an independent child stream
/// from (seed, key) without advancing the parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }
  Rng split(std::uint64_t key) const { return Rng(mix(seed_ ^ mix(key + 0x632be59bd9b4e019ULL))); }
  Rng split(std::string_view name) const { return split(key(name)); }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller; caches the second variate.
  double normal();

  static std::uint64_t mix(std::uint64_t x);
  /// FNV-1a of a stream name.
  static std::uint64_t key(std::string_view name);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ddep

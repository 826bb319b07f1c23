// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace ddtrack {

/// Counter-based generator: output i is a bijective mix of (key, i).
///
/// Streams are derived with split(), so per-voxel or per-seed streams can be
/// drawn in any order, on any thread, with identical results. Normal variates
/// use Box-Muller on 53-bit uniforms; no <random> distributions are involved,
/// which keeps draws bitwise reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0);

  /// Rebuilds a generator from a saved (key, counter) pair.
  static Rng from_state(std::uint64_t key, std::uint64_t counter);

  /// Independent child stream identified by `stream`.
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal.
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace ddtrack

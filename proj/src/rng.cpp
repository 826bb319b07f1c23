// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/rng.hpp"

#include <cmath>
#include <numbers>

namespace ddtrack {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t counter) : key_(mix64(seed ^ 0x6A09E667F3BCC909ULL)), counter_(counter) {}

Rng Rng::from_state(std::uint64_t key, std::uint64_t counter) {
  Rng r(0, counter);
  r.key_ = key;
  return r;
}

Rng Rng::split(std::uint64_t stream) const {
  return from_state(mix64(key_ ^ mix64(stream * kGolden + 0x3C6EF372FE94F82BULL)), 0);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(key_ + (c + 1) * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace ddtrack

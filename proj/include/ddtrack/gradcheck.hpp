// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ddtrack/rng.hpp"
#include "ddtrack/tensor.hpp"

namespace ddtrack::ad {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Relative errors use max(|analytic|, |numeric|, scale_floor) as denominator
  /// so entries with vanishing gradients are judged on absolute error.
  double scale_floor = 1e-6;
  /// Check at most this many randomly chosen entries per parameter (0 = all).
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares reverse-mode gradients of the scalar built by `loss_fn` against
/// central differences. `loss_fn` must rebuild the graph from the current
/// values of `params` (leaf tensors, perturbed in place and restored).
GradCheckReport gradient_check(const std::function<Tensor()>& loss_fn,
                               const std::vector<std::pair<std::string, Tensor>>& params,
                               const GradCheckOptions& options = {});

}  // namespace ddtrack::ad

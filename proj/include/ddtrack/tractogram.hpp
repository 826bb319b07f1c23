// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "ddtrack/volume.hpp"

namespace ddtrack {

/// Ordered points in voxel-continuous coordinates.
using Streamline = std::vector<Vec3>;

struct Tractogram {
  std::vector<Streamline> streamlines;
  /// Optional per-streamline bundle index; empty when unlabelled.
  std::vector<int> labels;

  std::size_t size() const { return streamlines.size(); }
  bool empty() const { return streamlines.empty(); }
};

}  // namespace ddtrack

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

namespace ddtrack {

using Vec3 = Eigen::Vector3d;
using Index3 = std::array<std::ptrdiff_t, 3>;

/// Voxel lattice. Voxel (i,j,k) covers [i,i+1)x[j,j+1)x[k,k+1) in
/// voxel-continuous coordinates; its centre is at (i+0.5, j+0.5, k+0.5).
/// World millimetres are voxel coordinates scaled by voxel_size.
struct Grid {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  bool contains(const Index3& v) const {
    for (int a = 0; a < 3; ++a)
      if (v[a] < 0 || v[a] >= static_cast<std::ptrdiff_t>(dims[a])) return false;
    return true;
  }
  /// x-fastest linear index.
  std::size_t linear(const Index3& v) const {
    return static_cast<std::size_t>(v[0]) +
           dims[0] * (static_cast<std::size_t>(v[1]) + dims[1] * static_cast<std::size_t>(v[2]));
  }
  Index3 unlinear(std::size_t i) const {
    return {static_cast<std::ptrdiff_t>(i % dims[0]), static_cast<std::ptrdiff_t>((i / dims[0]) % dims[1]),
            static_cast<std::ptrdiff_t>(i / (dims[0] * dims[1]))};
  }
  /// Voxel containing a continuous point (may lie outside the grid).
  static Index3 voxel_of(const Vec3& p);
  static Vec3 center_of(const Index3& v) { return {v[0] + 0.5, v[1] + 0.5, v[2] + 0.5}; }

  bool operator==(const Grid&) const = default;
};

/// Binary volume.
struct Mask {
  Grid grid;
  std::vector<std::uint8_t> values;

  Mask() = default;
  explicit Mask(const Grid& g) : grid(g), values(g.voxel_count(), 0) {}
  bool at(const Index3& v) const { return grid.contains(v) && values[grid.linear(v)] != 0; }
  bool at_point(const Vec3& p) const { return at(Grid::voxel_of(p)); }
  std::size_t count() const;
};

/// Diffusion weighting per volume: b-values in s/mm^2 with unit gradient directions.
struct GradientScheme {
  std::vector<double> bvals;
  std::vector<Vec3> bvecs;

  /// Volumes at or below this b-value count as b0.
  static constexpr double kB0Threshold = 50.0;

  std::size_t size() const { return bvals.size(); }
  std::vector<std::size_t> b0_indices() const;
  std::vector<std::size_t> dw_indices() const;
  /// Throws InputError unless every DW b-vector is unit (1e-6) and at least one b0 exists.
  void validate() const;

  /// 32 electrostatic-repulsion directions at b=1000 plus two b0 volumes.
  static GradientScheme default_scheme();
};

/// Raw diffusion-weighted signal, voxel-major (all volumes of a voxel are contiguous).
struct DwiVolume {
  Grid grid;
  GradientScheme scheme;
  std::vector<double> signal;

  std::size_t volumes() const { return scheme.size(); }
  const double* voxel(std::size_t linear) const { return signal.data() + linear * volumes(); }
};

/// Per-voxel SH coefficient vectors, voxel-major.
struct ShVolume {
  Grid grid;
  int l_max = 0;
  std::size_t coeffs_per_voxel = 1;
  std::vector<double> coeffs;

  const double* voxel(std::size_t linear) const { return coeffs.data() + linear * coeffs_per_voxel; }
};

}  // namespace ddtrack

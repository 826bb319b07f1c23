// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "ddtrack/volume.hpp"

namespace ddtrack::sh {

/// Even-order real SH basis settings.
struct ShBasisConfig {
  int l_max = 6;

  /// (l_max + 1)(l_max + 2) / 2 for even l_max.
  std::size_t coeff_count() const;
  /// Throws InputError for odd or negative l_max.
  void validate() const;
};

/// Degree l of every basis column, in basis order.
std::vector<int> column_degrees(int l_max);

/// Rows: directions; columns: the symmetric real basis of Descoteaux et al.
/// (2007) in DIPY's legacy ordering: l = 0, 2, ...; within l, order m from -l
/// to +l. m < 0 uses sqrt(2) Re Y_l^|m|, m > 0 uses sqrt(2) Im Y_l^m, m = 0 uses
/// Y_l^0, with the Condon-Shortley phase included in Y.
Eigen::MatrixXd basis_matrix(std::span<const Vec3> directions, const ShBasisConfig& config);

/// DW signals divided by each voxel's mean b0.
struct NormalizedDwi {
  Grid grid;
  std::vector<std::size_t> dw_indices;
  /// voxel-major, dw_indices.size() values per voxel; zero for flagged voxels.
  std::vector<double> signal;
  /// Voxels whose b0 mean is below the floor.
  std::vector<std::uint8_t> flagged;
  double b0_floor = 0.0;
};

/// b0 floor = floor_fraction * (largest voxel b0 mean).
NormalizedDwi normalize_dwi(const DwiVolume& dwi, double floor_fraction = 1e-6);

/// Per-voxel minimiser of |B c - s|^2 + reg |L c|^2 with L = diag(l(l+1)).
/// Flagged (background) voxels get all-zero coefficients.
ShVolume fit_sh(const DwiVolume& dwi, const ShBasisConfig& config, double reg = 0.0, double floor_fraction = 1e-6);

/// 3x3x3 x m block around a point, offsets ordered (dz, dy, dx) then coefficient.
struct NeighborhoodFeature {
  std::size_t coeffs_per_cell = 0;
  std::vector<double> values;
  bool out_of_bounds = false;

  static constexpr std::size_t kCells = 27;
};

/// Trilinear interpolation of the coefficient field at a continuous point.
/// Points outside the grid give zeros and return false; within the outer
/// half-voxel rim the nearest lattice values are extended.
bool interpolate(const ShVolume& sh, const Vec3& p, std::span<double> out);

/// Coefficients trilinearly interpolated at p + o for every o in {-1,0,1}^3 (voxel units).
NeighborhoodFeature sample_neighborhood(const ShVolume& sh, const Vec3& p);

}  // namespace ddtrack::sh

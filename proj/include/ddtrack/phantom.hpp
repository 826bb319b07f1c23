// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddtrack/tractogram.hpp"
#include "ddtrack/volume.hpp"

namespace ddtrack::phantom {

/// A tube of fibres around a polyline centreline (voxel coordinates).
struct BundleSpec {
  std::string name;
  std::vector<Vec3> centerline;
  double radius = 3.0;
  /// Relative volume fraction where this bundle overlaps others.
  double weight = 1.0;
};

/// Arc-length parametrised polyline with a continuous tangent field
/// (vertex tangents bisect adjacent segments and are blended linearly).
class Centerline {
 public:
  explicit Centerline(std::vector<Vec3> points);

  struct Closest {
    double arc_length;  ///< along the centreline, in [0, length()]
    double distance;    ///< from the query point
    Vec3 tangent;       ///< unit, pointing from head to tail
  };
  Closest closest(const Vec3& p) const;
  Vec3 point_at(double arc_length) const;
  Vec3 tangent_at(double arc_length) const;
  double length() const { return cumulative_.back(); }
  const std::vector<Vec3>& points() const { return points_; }

 private:
  std::pair<std::size_t, double> locate(double arc_length) const;
  Vec3 blend(std::size_t segment, double u) const;

  std::vector<Vec3> points_;
  std::vector<double> cumulative_;
  std::vector<Vec3> vertex_tangents_;
};

struct Compartment {
  Vec3 orientation;
  double fraction;
  int bundle;
};

struct PhantomDataset {
  Grid grid;
  std::vector<BundleSpec> bundles;
  std::vector<Centerline> centerlines;
  /// Per voxel; empty outside white matter.
  std::vector<std::vector<Compartment>> compartments;
  Mask wm_mask;
  std::vector<Mask> bundle_masks;
  std::vector<Mask> head_rois;
  std::vector<Mask> tail_rois;
  /// End-slab length of the ROIs along the centreline, voxels.
  double roi_length = 2.0;
};

/// Voxelises the bundles: a voxel belongs to a bundle when its centre is within
/// `radius` of the centreline; head/tail ROIs are the bundle voxels whose
/// closest centreline point lies within `roi_length` of the first/last point.
PhantomDataset build_phantom(const std::vector<BundleSpec>& specs, const std::array<std::size_t, 3>& dims,
                             const std::array<double, 3>& voxel_size, double roi_length = 2.0);

/// Three bundles on a 40^3 grid: a straight tract, a pair crossing at 60
/// degrees, and a quarter-circle arc of radius 24.
std::vector<BundleSpec> default_bundles();

/// Cylindrically symmetric tensor compartments; diffusivities in mm^2/s.
struct TensorModelParams {
  double lambda_parallel = 1.7e-3;
  double lambda_perp = 0.3e-3;
  double s0 = 1000.0;

  void validate() const;
};

/// Multi-tensor forward model with optional Rician noise of sigma = S0/snr.
/// Noise streams are keyed by voxel index, so results do not depend on the
/// visiting order.
DwiVolume simulate_dwi(const PhantomDataset& phantom, const GradientScheme& scheme, const TensorModelParams& params,
                       std::optional<double> snr, std::uint64_t seed);

/// Noiseless normalised signal S/S0 of a compartment list for one gradient.
double attenuation(const std::vector<Compartment>& compartments, const Vec3& g, double bval,
                   const TensorModelParams& params);

struct GtTractogram {
  Tractogram tractogram;  ///< labelled with bundle indices
  std::size_t discarded = 0;
};

/// Follows one bundle's orientation field from `seed` with fixed `step`,
/// until the tail end is reached. Returns nothing if the path leaves the
/// bundle, misses the tail ROI, or exceeds the step budget.
std::optional<Streamline> trace_bundle(const PhantomDataset& phantom, std::size_t bundle, const Vec3& seed,
                                       double step);

/// Ground-truth streamlines from jittered head-ROI seeds to the tail ROI.
GtTractogram generate_gt_tractogram(const PhantomDataset& phantom, double step, std::size_t per_bundle,
                                    std::uint64_t seed);

}  // namespace ddtrack::phantom

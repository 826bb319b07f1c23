// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ddtrack/tractogram.hpp"
#include "ddtrack/volume.hpp"

namespace ddtrack::metrics {

/// Head and tail endpoint regions of every bundle on one grid.
struct RoiSet {
  std::vector<std::string> names;
  std::vector<Mask> heads;
  std::vector<Mask> tails;

  std::size_t size() const { return names.size(); }
  /// Throws InputError on mismatched counts or grids, or overlapping head/tail.
  void validate() const;
};

enum class Connection { valid, invalid, none };

struct ConnectionReport {
  std::size_t total = 0;
  std::size_t valid = 0;
  std::size_t invalid = 0;
  std::size_t none = 0;
  /// Per streamline.
  std::vector<Connection> labels;
  /// Bundle joined by each valid streamline, -1 otherwise.
  std::vector<int> bundle_of;
  /// Valid streamline indices per bundle.
  std::vector<std::vector<std::size_t>> valid_by_bundle;

  double vc_fraction() const;
  double ic_fraction() const;
  double nc_fraction() const;
};

/// Endpoints (containing voxels) in the head and tail of one bundle, in
/// either order, are valid; both endpoints in some ROI otherwise is invalid;
/// anything else is no connection.
ConnectionReport classify_connections(const Tractogram& tractogram, const RoiSet& rois);

/// Voxels holding at least one point of the selected streamlines.
Mask coverage(const Tractogram& tractogram, const std::vector<std::size_t>& selection, const Grid& grid);
Mask coverage(const Tractogram& tractogram, const Grid& grid);

struct BundleScores {
  std::string name;
  std::size_t valid_streamlines = 0;
  std::size_t gt_voxels = 0;
  std::size_t recon_voxels = 0;
  double overlap = 0.0;  ///< |Vr & Vgt| / |Vgt|
  double overreach = 0.0;  ///< |Vr \ Vgt| / |Vgt|
  double f1 = 0.0;
};

struct VolumeReport {
  std::vector<BundleScores> bundles;
  double mean_overlap = 0.0;
  double mean_overreach = 0.0;
  double mean_f1 = 0.0;
};

/// Scores the coverage of each bundle's valid streamlines against its
/// ground-truth voxel mask. Throws InputError for an empty ground-truth mask
/// or a grid mismatch.
VolumeReport volume_scores(const Tractogram& tractogram, const ConnectionReport& connections,
                           const std::vector<Mask>& gt_masks, const std::vector<std::string>& names);

/// Overlap scores of explicit voxel sets.
BundleScores score_voxels(const Mask& recon, const Mask& gt);

struct WeightedDice {
  double value = 0.0;
  /// Set when either tract has no voxel inside the grid.
  bool empty = false;
};

/// Weighted Dice of two tracts: per-voxel weights are streamline visit
/// counts (each streamline counted once per voxel) normalised to sum 1.
WeightedDice weighted_dice(const Tractogram& t1, const Tractogram& t2, const Grid& grid);

struct EvalReport {
  ConnectionReport connections;
  VolumeReport volume;
  std::vector<std::string> warnings;
};

EvalReport evaluate(const Tractogram& tractogram, const RoiSet& rois, const std::vector<Mask>& gt_masks);

/// JSON document: aggregate fractions and means plus one record per bundle.
std::string to_json(const EvalReport& report);
/// Flat table, one row per bundle plus a "mean" row.
std::string to_csv(const EvalReport& report);

}  // namespace ddtrack::metrics

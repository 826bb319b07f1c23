// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddtrack/diffusion.hpp"
#include "ddtrack/model.hpp"
#include "ddtrack/rng.hpp"
#include "ddtrack/tractogram.hpp"
#include "ddtrack/volume.hpp"

namespace ddtrack::tracker {

struct TrackerConfig {
  double step = 1.0;  ///< voxels
  std::size_t seeds_per_voxel = 5;
  double angle_threshold_deg = 45.0;
  std::size_t max_steps = 500;
  bool bidirectional = true;
  diffusion::SamplerConfig sampler;
  /// Seeds advanced together in one batch; fixes the work decomposition, so
  /// output does not depend on the number of workers.
  std::size_t chunk_size = 1024;

  void validate() const;
};

enum class StopReason { none, mask_exit, angle, max_steps, degenerate };
const char* to_string(StopReason reason);

/// Orientation predictor with per-walker recurrent memory.
class PropagationModel {
 public:
  virtual ~PropagationModel() = default;

  /// Memory of a walker that has not moved yet.
  virtual std::vector<double> initial_memory() const = 0;

  /// Raw (unaligned) orientation for each position, advancing each walker's
  /// memory. Empty results mark degenerate predictions. Walker i may only
  /// draw randomness from rngs[i].
  virtual void predict(std::span<const Vec3> positions, std::span<std::vector<double>* const> memories,
                       std::span<Rng* const> rngs, std::span<std::optional<Vec3>> out) const = 0;
};

/// The trained network: neighbourhood features -> spatial encoders -> GRU ->
/// reverse diffusion conditioned on (G, L).
class DiffusionModel final : public PropagationModel {
 public:
  DiffusionModel(const model::Parameters& params, const ShVolume& sh, diffusion::SamplerConfig sampler);

  std::vector<double> initial_memory() const override;
  void predict(std::span<const Vec3> positions, std::span<std::vector<double>* const> memories,
               std::span<Rng* const> rngs, std::span<std::optional<Vec3>> out) const override;

 private:
  const model::Parameters& params_;
  const ShVolume& sh_;
  diffusion::SamplerConfig sampler_;
};

/// Memoryless model from a direction field; returns nothing where the field is zero.
class FieldModel final : public PropagationModel {
 public:
  explicit FieldModel(std::function<Vec3(const Vec3&)> field) : field_(std::move(field)) {}

  std::vector<double> initial_memory() const override { return {}; }
  void predict(std::span<const Vec3> positions, std::span<std::vector<double>* const> memories,
               std::span<Rng* const> rngs, std::span<std::optional<Vec3>> out) const override;

 private:
  std::function<Vec3(const Vec3&)> field_;
};

struct TrackState {
  std::vector<Vec3> points;
  std::optional<Vec3> prev_dir;
  std::vector<double> memory;
  StopReason stop = StopReason::none;
  std::size_t steps = 0;
  /// Turn of the latest accepted step, degrees.
  double last_turn_deg = 0.0;

  static TrackState start(const Vec3& seed, const PropagationModel& model);
};

/// seeds_per_voxel uniformly jittered points per mask voxel, in voxel order.
std::vector<Vec3> seed_points(const Mask& wm_mask, std::size_t seeds_per_voxel, Rng& rng);

/// Stop reason implied by the newest point: mask_exit when its containing
/// voxel is outside the mask, angle when the latest turn exceeds the
/// threshold, max_steps when the budget is used up.
StopReason check_stop(const TrackState& state, const Mask& wm_mask, const TrackerConfig& config);

/// Applies one prediction: sign-aligns it to the previous direction, rejects
/// turns over the threshold without appending, otherwise appends
/// p + step * dir and runs check_stop.
void apply_prediction(TrackState& state, const std::optional<Vec3>& raw, const Mask& wm_mask,
                      const TrackerConfig& config);

/// Predicts and applies one step for a single walker.
void step(TrackState& state, const PropagationModel& model, const Mask& wm_mask, const TrackerConfig& config,
          Rng& rng);

struct TrackResult {
  Tractogram tractogram;
  std::size_t seeds = 0;
  std::size_t discarded = 0;  ///< fewer than 3 points
  std::vector<std::size_t> stop_counts;  ///< per StopReason, over all halves
};

/// Tracks every seed (both rays when bidirectional) and concatenates the
/// halves. A point that left the mask stays in the walker state but is not
/// emitted. Per-seed randomness comes from rng.split(seed index).
TrackResult track(std::span<const Vec3> seeds, const PropagationModel& model, const Mask& wm_mask,
                  const TrackerConfig& config, const Rng& rng, std::size_t workers = 1);

}  // namespace ddtrack::tracker

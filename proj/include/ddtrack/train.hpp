// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddtrack/model.hpp"
#include "ddtrack/rng.hpp"
#include "ddtrack/tractogram.hpp"

namespace ddtrack::train {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double plateau_factor = 0.1;
  std::size_t plateau_patience = 50;
  double min_lr = 1e-7;
  std::size_t early_stop_patience = 120;
  std::size_t max_epochs = 1000;
  std::size_t batch_streamlines = 16;
  double val_fraction = 0.1;
  double k_min = 0.02;
  double k_max = 0.98;
  double smooth_l1_beta = 1.0;
  /// Flip every target onto the hemisphere of a reference axis.
  bool canonical_sign = true;
  /// Also train on every streamline traversed backwards.
  bool augment_reverse = true;
  /// Use at most this many source streamlines (0: all), taken evenly across bundles.
  std::size_t max_streamlines = 0;

  void validate() const;
};

/// One source streamline's features at every point, [points][27 m].
struct SourceFeatures {
  std::vector<double> values;
  std::size_t points = 0;
  int label = -1;
};

/// A training sequence: a source streamline traversed forwards or backwards.
/// Step t conditions on the feature of the t-th visited point and targets the
/// unit direction to the next one.
struct Sequence {
  std::size_t source;
  bool reversed;
  std::vector<Vec3> targets;

  std::size_t steps() const { return targets.size(); }
};

struct Dataset {
  std::size_t coeffs = 0;
  std::vector<SourceFeatures> sources;
  std::vector<Sequence> sequences;
  Vec3 sign_reference = Vec3::UnitZ();

  /// Feature of the point visited at `step` by `seq`, 27 m values.
  std::span<const double> feature(const Sequence& seq, std::size_t step) const;
};

/// Axis maximising the smallest |y . u| over the given directions.
Vec3 choose_sign_reference(std::span<const Vec3> directions);

/// Samples neighbourhood features along every streamline and derives targets.
/// When `sign_reference` is given it is used instead of being chosen.
Dataset build_dataset(const Tractogram& tractogram, const ShVolume& sh, const TrainConfig& config,
                      std::optional<Vec3> sign_reference = std::nullopt);

/// Sequence indices for training and validation; reversed copies share their
/// source's side.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
Split split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed);

/// Time-major packing of whole sequences sorted by decreasing length: rows of
/// step t are the first active[t] sequences, so every step's batch is a prefix
/// of the previous one and no padding is needed.
struct Batch {
  std::vector<std::size_t> sequences;  ///< dataset indices, by decreasing length
  std::vector<std::size_t> active;  ///< per step
  std::vector<std::size_t> offsets;  ///< first row of each step
  ad::Tensor features;  ///< [rows, m, 3, 3, 3]
  std::vector<Vec3> targets;  ///< per row
  std::vector<std::size_t> row_sequence;
  std::vector<std::size_t> row_step;

  std::size_t rows() const { return targets.size(); }
};
Batch make_batch(const Dataset& data, std::span<const std::size_t> sequence_indices);

/// Diffusion step and noise for every row of a batch.
struct NoiseDraw {
  std::vector<double> k;
  std::vector<Vec3> eps;
};
NoiseDraw draw_noise(std::size_t rows, const TrainConfig& config, Rng& rng);

/// Teacher-forced mean loss over the rows of a batch: the GRU advances along
/// the true trajectory, each row is noised with its own (k, eps), and the loss
/// compares predicted h and derived eps with the truth.
ad::Tensor batch_loss(const model::Parameters& params, const Batch& batch, const NoiseDraw& noise,
                      const TrainConfig& config);

struct EpochLog {
  std::size_t epoch;
  double train_loss;
  double val_loss;
  double lr;
};

/// Everything needed to continue training bitwise-identically.
struct TrainState {
  model::Parameters params;
  model::Parameters best;
  std::vector<std::vector<double>> adam_m;
  std::vector<std::vector<double>> adam_v;
  std::uint64_t adam_step = 0;
  std::size_t epoch = 0;  ///< completed epochs
  double lr = 0.0;
  double plateau_best = std::numeric_limits<double>::infinity();
  std::size_t plateau_bad = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool stopped = false;
  std::uint64_t seed = 0;
  Vec3 sign_reference = Vec3::UnitZ();
  std::vector<EpochLog> log;
};

TrainState init_state(const model::ModelConfig& model_config, const TrainConfig& config, std::uint64_t seed);

/// One AdamW update with decoupled weight decay.
void adamw_step(TrainState& state, const std::vector<std::vector<double>>& grads, const TrainConfig& config);

/// Trains until `max_epochs` epochs are complete or early stopping fires; on
/// early stop the best parameters are restored. `on_epoch` runs after every
/// epoch (checkpointing). Throws InvariantError on a non-finite loss.
void train(TrainState& state, const Dataset& data, const TrainConfig& config, std::size_t max_epochs,
           const std::function<void(const TrainState&)>& on_epoch = {});

/// Mean validation loss with noise fixed by the run seed.
double evaluate(const model::Parameters& params, const Dataset& data, std::span<const std::size_t> sequences,
                const TrainConfig& config, std::uint64_t seed);

}  // namespace ddtrack::train

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddtrack/model.hpp"
#include "ddtrack/phantom.hpp"
#include "ddtrack/tracker.hpp"
#include "ddtrack/train.hpp"

namespace ddtrack::config {

inline constexpr const char* kToolVersion = "0.1.0";

struct PhantomSection {
  std::array<std::size_t, 3> dims{40, 40, 40};
  std::array<double, 3> voxel_size{2.0, 2.0, 2.0};
  double roi_length = 2.0;
  std::vector<phantom::BundleSpec> bundles = phantom::default_bundles();
  std::optional<double> snr = 20.0;
  phantom::TensorModelParams tensor;
  double gt_step = 1.0;
  std::size_t gt_per_bundle = 100;
};

struct ShSection {
  int lmax = 6;
  double reg = 0.0;
  double b0_floor = 1e-6;
};

struct TrackSection {
  tracker::TrackerConfig tracker;
  std::size_t workers = 1;
};

struct EvalSection {
  bool write_csv = true;
};

/// Every field has a default; a JSON document overrides any subset.
struct RunConfig {
  std::uint64_t seed = 42;
  PhantomSection phantom;
  ShSection sh;
  model::ModelConfig model;
  train::TrainConfig train;
  TrackSection track;
  EvalSection eval;
};

/// Defaults, with the seed taken from DDTRACK_SEED when set.
RunConfig default_config();

/// Applies a JSON document over the defaults. Unknown keys and wrongly typed
/// values throw InputError naming the dotted key path.
RunConfig parse_config(const std::string& json_text);

/// Effective configuration with every field spelled out.
std::string to_json(const RunConfig& config);

/// Seed from a decimal string; throws InputError otherwise.
std::uint64_t parse_seed(const std::string& text, const std::string& source);

}  // namespace ddtrack::config

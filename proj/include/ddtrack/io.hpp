// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ddtrack/model.hpp"
#include "ddtrack/tractogram.hpp"
#include "ddtrack/train.hpp"
#include "ddtrack/volume.hpp"

namespace ddtrack::io {

namespace fs = std::filesystem;

inline constexpr int kVolumeVersion = 1;
inline constexpr int kCheckpointVersion = 1;

/// In-memory form of the native volume container: a JSON header sidecar and
/// a raw payload of little-endian f32, x fastest, channel slowest.
struct Volume {
  Grid grid;
  /// "scalar", "sh", "dwi" or "mask"; the header stores "<kind>:<channels>"
  /// for all but scalar.
  std::string kind = "scalar";
  std::size_t channels = 1;
  std::vector<float> data;  ///< channels * voxel_count
  std::optional<GradientScheme> scheme;  ///< dwi only
  std::vector<std::string> labels;  ///< optional channel names

  std::string kind_tag() const;
};

/// Writes `<stem>.json` and `<stem>.raw` next to each other; `header` is the .json path.
void write_volume(const fs::path& header, const Volume& volume);
/// Throws InputError naming the offending field for any malformed header or payload.
Volume read_volume(const fs::path& header);

Volume to_volume(const DwiVolume& dwi);
Volume to_volume(const ShVolume& sh);
Volume to_volume(const std::vector<Mask>& masks, std::vector<std::string> labels);
DwiVolume to_dwi(const Volume& v);
ShVolume to_sh(const Volume& v);
std::vector<Mask> to_masks(const Volume& v);

/// MRtrix .tck stream. Coordinates are voxel-continuous in memory and world
/// millimetres (voxel * voxel_size) on disk.
struct TckFile {
  Tractogram tractogram;
  std::map<std::string, std::string> header;
};

void write_tck(const fs::path& path, const Tractogram& tractogram, const std::array<double, 3>& voxel_size,
               const std::map<std::string, std::string>& extra = {});
std::string tck_bytes(const Tractogram& tractogram, const std::array<double, 3>& voxel_size,
                      const std::map<std::string, std::string>& extra = {});
TckFile read_tck(const fs::path& path, const std::array<double, 3>& voxel_size);
TckFile parse_tck(const std::string& bytes, const std::array<double, 3>& voxel_size);

/// Coordinates after one write/read through the TCK format.
Tractogram quantize_like_tck(const Tractogram& tractogram, const std::array<double, 3>& voxel_size);

/// Training state plus the configuration echo written alongside it.
struct Checkpoint {
  train::TrainState state;
  /// Opaque JSON text stored for provenance (effective train config).
  std::string train_config_json = "{}";
};

/// `<stem>.json` header and `<stem>.raw` f64 payload holding every parameter,
/// the Adam moments and the best parameters.
void save_checkpoint(const fs::path& header, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const fs::path& header);

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_hash(const fs::path& path);
std::string read_file(const fs::path& path);
void write_file(const fs::path& path, const std::string& bytes);

}  // namespace ddtrack::io

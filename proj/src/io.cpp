// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "ddtrack/error.hpp"
#include "json.hpp"

namespace ddtrack::io {
namespace {

using nlohmann::json;

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits;
  std::memcpy(&bits, &value, sizeof bits);
  for (std::size_t i = 0; i < sizeof bits; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof bits; ++i) bits |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  T value;
  std::memcpy(&value, &bits, sizeof value);
  return value;
}

fs::path payload_path(const fs::path& header) {
  fs::path p = header;
  p.replace_extension(".raw");
  return p;
}

const json& field(const json& doc, const std::string& name, const std::string& where) {
  if (!doc.is_object() || !doc.contains(name)) throw InputError(where + ": missing field '" + name + "'");
  return doc.at(name);
}

template <typename T>
T get_field(const json& doc, const std::string& name, const std::string& where) {
  const json& v = field(doc, name, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw InputError(where + ": field '" + name + "' has the wrong type");
  }
}

json parse_json(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(where + ": invalid JSON (" + e.what() + ")");
  }
}

std::size_t parse_channels(const std::string& tag, std::string& kind) {
  if (tag == "scalar") {
    kind = "scalar";
    return 1;
  }
  const auto colon = tag.find(':');
  if (colon == std::string::npos) throw InputError("volume header: unknown value kind '" + tag + "'");
  kind = tag.substr(0, colon);
  if (kind != "sh" && kind != "dwi" && kind != "mask") throw InputError("volume header: unknown value kind '" + tag + "'");
  const std::string count = tag.substr(colon + 1);
  if (count.empty() || count.find_first_not_of("0123456789") != std::string::npos || std::stoull(count) == 0)
    throw InputError("volume header: bad channel count in kind '" + tag + "'");
  return static_cast<std::size_t>(std::stoull(count));
}

json model_config_json(const model::ModelConfig& c) {
  return {{"sh_coeffs", c.sh_coeffs},
          {"spatial_channels1", c.spatial_channels1},
          {"spatial_channels2", c.spatial_channels2},
          {"embed_dim", c.embed_dim},
          {"context_dim", c.context_dim},
          {"gru_layers", c.gru_layers},
          {"step_embed_dim", c.step_embed_dim},
          {"global_dim", c.global_dim},
          {"denoiser_channels", c.denoiser_channels},
          {"norm_groups", c.norm_groups}};
}

model::ModelConfig model_config_from(const json& j) {
  const std::string w = "checkpoint model";
  model::ModelConfig c;
  c.sh_coeffs = get_field<std::size_t>(j, "sh_coeffs", w);
  c.spatial_channels1 = get_field<std::size_t>(j, "spatial_channels1", w);
  c.spatial_channels2 = get_field<std::size_t>(j, "spatial_channels2", w);
  c.embed_dim = get_field<std::size_t>(j, "embed_dim", w);
  c.context_dim = get_field<std::size_t>(j, "context_dim", w);
  c.gru_layers = get_field<std::size_t>(j, "gru_layers", w);
  c.step_embed_dim = get_field<std::size_t>(j, "step_embed_dim", w);
  c.global_dim = get_field<std::size_t>(j, "global_dim", w);
  c.denoiser_channels = get_field<std::size_t>(j, "denoiser_channels", w);
  c.norm_groups = get_field<std::size_t>(j, "norm_groups", w);
  c.validate();
  return c;
}

// JSON has no infinity; null stands for it.
json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double from_nullable(const json& j) { return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>(); }

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t parse_hex64(const std::string& s, const std::string& what) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw InputError("checkpoint: field '" + what + "' is not a 16-digit hex value");
  return std::stoull(s, nullptr, 16);
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

std::string file_hash(const fs::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : read_file(path)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

std::string Volume::kind_tag() const { return kind == "scalar" ? "scalar" : kind + ":" + std::to_string(channels); }

void write_volume(const fs::path& header, const Volume& v) {
  const std::size_t expected = v.channels * v.grid.voxel_count();
  if (v.data.size() != expected)
    throw InputError("write_volume: data has " + std::to_string(v.data.size()) + " values, expected " +
                     std::to_string(expected));
  if (v.kind == "scalar" && v.channels != 1) throw InputError("write_volume: scalar volume with several channels");
  if (v.kind == "dwi" && (!v.scheme || v.scheme->size() != v.channels))
    throw InputError("write_volume: dwi volume needs a gradient scheme with one entry per channel");
  if (!v.labels.empty() && v.labels.size() != v.channels)
    throw InputError("write_volume: " + std::to_string(v.labels.size()) + " labels for " + std::to_string(v.channels) +
                     " channels");
  std::string payload;
  payload.reserve(expected * 4);
  for (float x : v.data) put_le(payload, x);

  json doc = {{"format", "ddtrack-volume"},
              {"version", kVolumeVersion},
              {"dims", v.grid.dims},
              {"voxel_size", v.grid.voxel_size},
              {"kind", v.kind_tag()},
              {"dtype", "float32"},
              {"endianness", "little"},
              {"payload", payload_path(header).filename().string()},
              {"payload_bytes", payload.size()}};
  if (v.scheme) {
    json bvecs = json::array();
    for (const Vec3& g : v.scheme->bvecs) bvecs.push_back({g.x(), g.y(), g.z()});
    doc["bvals"] = v.scheme->bvals;
    doc["bvecs"] = bvecs;
  }
  if (!v.labels.empty()) doc["labels"] = v.labels;
  write_file(payload_path(header), payload);
  write_file(header, doc.dump(2) + "\n");
}

Volume read_volume(const fs::path& header) {
  const std::string where = "volume header '" + header.string() + "'";
  const json doc = parse_json(read_file(header), where);
  static const std::set<std::string> known = {"format", "version", "dims", "voxel_size", "kind", "dtype",
                                              "endianness", "payload", "payload_bytes", "bvals", "bvecs", "labels"};
  for (const auto& [key, value] : doc.items())
    if (!known.count(key)) throw InputError(where + ": unknown field '" + key + "'");
  if (get_field<std::string>(doc, "format", where) != "ddtrack-volume")
    throw InputError(where + ": field 'format' is not ddtrack-volume");
  const int version = get_field<int>(doc, "version", where);
  if (version != kVolumeVersion)
    throw InputError(where + ": field 'version' is " + std::to_string(version) + ", supported " +
                     std::to_string(kVolumeVersion));
  if (get_field<std::string>(doc, "dtype", where) != "float32") throw InputError(where + ": field 'dtype' must be float32");
  if (get_field<std::string>(doc, "endianness", where) != "little")
    throw InputError(where + ": field 'endianness' must be little");

  Volume v;
  v.grid.dims = get_field<std::array<std::size_t, 3>>(doc, "dims", where);
  v.grid.voxel_size = get_field<std::array<double, 3>>(doc, "voxel_size", where);
  for (int a = 0; a < 3; ++a) {
    if (v.grid.dims[a] == 0) throw InputError(where + ": field 'dims' has a zero extent");
    if (!(v.grid.voxel_size[a] > 0.0)) throw InputError(where + ": field 'voxel_size' must be positive");
  }
  v.channels = parse_channels(get_field<std::string>(doc, "kind", where), v.kind);
  const std::size_t expected = v.channels * v.grid.voxel_count() * 4;
  const auto declared = get_field<std::size_t>(doc, "payload_bytes", where);
  if (declared != expected)
    throw InputError(where + ": field 'payload_bytes' is " + std::to_string(declared) + ", dims and kind imply " +
                     std::to_string(expected));
  if (doc.contains("labels")) {
    v.labels = get_field<std::vector<std::string>>(doc, "labels", where);
    if (v.labels.size() != v.channels) throw InputError(where + ": field 'labels' does not match the channel count");
  }
  if (v.kind == "dwi") {
    GradientScheme s;
    s.bvals = get_field<std::vector<double>>(doc, "bvals", where);
    for (const auto& g : get_field<std::vector<std::array<double, 3>>>(doc, "bvecs", where)) s.bvecs.emplace_back(g[0], g[1], g[2]);
    if (s.size() != v.channels) throw InputError(where + ": fields 'bvals'/'bvecs' do not match the channel count");
    s.validate();
    v.scheme = std::move(s);
  } else if (doc.contains("bvals") || doc.contains("bvecs")) {
    throw InputError(where + ": fields 'bvals'/'bvecs' are only valid for dwi volumes");
  }

  const fs::path payload = header.parent_path() / get_field<std::string>(doc, "payload", where);
  const std::string bytes = read_file(payload);
  if (bytes.size() != expected)
    throw InputError("volume payload '" + payload.string() + "': expected " + std::to_string(expected) +
                     " bytes, found " + std::to_string(bytes.size()));
  v.data.resize(expected / 4);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = get_le<float>(bytes.data() + 4 * i);
  return v;
}

Volume to_volume(const DwiVolume& dwi) {
  Volume v;
  v.grid = dwi.grid;
  v.kind = "dwi";
  v.channels = dwi.volumes();
  v.scheme = dwi.scheme;
  const std::size_t nvox = dwi.grid.voxel_count();
  v.data.resize(nvox * v.channels);
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t i = 0; i < nvox; ++i) v.data[c * nvox + i] = static_cast<float>(dwi.signal[i * v.channels + c]);
  return v;
}

Volume to_volume(const ShVolume& sh) {
  Volume v;
  v.grid = sh.grid;
  v.kind = "sh";
  v.channels = sh.coeffs_per_voxel;
  const std::size_t nvox = sh.grid.voxel_count();
  v.data.resize(nvox * v.channels);
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t i = 0; i < nvox; ++i) v.data[c * nvox + i] = static_cast<float>(sh.coeffs[i * v.channels + c]);
  return v;
}

Volume to_volume(const std::vector<Mask>& masks, std::vector<std::string> labels) {
  if (masks.empty()) throw InputError("to_volume: no masks");
  Volume v;
  v.grid = masks[0].grid;
  v.kind = "mask";
  v.channels = masks.size();
  v.labels = std::move(labels);
  const std::size_t nvox = v.grid.voxel_count();
  v.data.resize(nvox * v.channels);
  for (std::size_t c = 0; c < v.channels; ++c) {
    if (!(masks[c].grid == v.grid)) throw InputError("to_volume: masks are on different grids");
    for (std::size_t i = 0; i < nvox; ++i) v.data[c * nvox + i] = masks[c].values[i] ? 1.0f : 0.0f;
  }
  return v;
}

DwiVolume to_dwi(const Volume& v) {
  if (v.kind != "dwi" || !v.scheme) throw InputError("expected a dwi volume, got " + v.kind_tag());
  DwiVolume d;
  d.grid = v.grid;
  d.scheme = *v.scheme;
  const std::size_t nvox = v.grid.voxel_count();
  d.signal.resize(nvox * v.channels);
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t i = 0; i < nvox; ++i) d.signal[i * v.channels + c] = v.data[c * nvox + i];
  return d;
}

ShVolume to_sh(const Volume& v) {
  if (v.kind != "sh") throw InputError("expected an sh volume, got " + v.kind_tag());
  ShVolume s;
  s.grid = v.grid;
  s.coeffs_per_voxel = v.channels;
  s.l_max = -1;
  for (int l = 0; l <= 64; l += 2)
    if (static_cast<std::size_t>((l + 1) * (l + 2) / 2) == v.channels) s.l_max = l;
  if (s.l_max < 0) throw InputError("sh volume: " + std::to_string(v.channels) + " is not an even-order coefficient count");
  const std::size_t nvox = v.grid.voxel_count();
  s.coeffs.resize(nvox * v.channels);
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t i = 0; i < nvox; ++i) s.coeffs[i * v.channels + c] = v.data[c * nvox + i];
  return s;
}

std::vector<Mask> to_masks(const Volume& v) {
  if (v.kind != "mask" && v.kind != "scalar") throw InputError("expected a mask volume, got " + v.kind_tag());
  const std::size_t nvox = v.grid.voxel_count();
  std::vector<Mask> out;
  for (std::size_t c = 0; c < v.channels; ++c) {
    Mask m(v.grid);
    for (std::size_t i = 0; i < nvox; ++i) {
      const float x = v.data[c * nvox + i];
      if (x != 0.0f && x != 1.0f) throw InputError("mask volume holds a value other than 0 or 1");
      m.values[i] = x != 0.0f;
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::string tck_bytes(const Tractogram& tractogram, const std::array<double, 3>& voxel_size,
                      const std::map<std::string, std::string>& extra) {
  std::string head = "mrtrix tracks\ndatatype: Float32LE\ncount: " + std::to_string(tractogram.size()) + "\n";
  for (const auto& [k, v] : extra) {
    if (k == "datatype" || k == "count" || k == "file" || k.find_first_of(":\n") != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw InputError("tck header key '" + k + "' is reserved or malformed");
    head += k + ": " + v + "\n";
  }
  // The offset is written in decimal inside the header it points past.
  std::size_t offset = head.size();
  for (;;) {
    const std::size_t total = head.size() + std::string("file: . ").size() + std::to_string(offset).size() + 5;
    if (total == offset) break;
    offset = total;
  }
  std::string out = head + "file: . " + std::to_string(offset) + "\nEND\n";
  const float nan = std::numeric_limits<float>::quiet_NaN();
  const float inf = std::numeric_limits<float>::infinity();
  for (const auto& sl : tractogram.streamlines) {
    for (const Vec3& p : sl)
      for (int a = 0; a < 3; ++a) {
        const double w = p[a] * voxel_size[static_cast<std::size_t>(a)];
        if (!std::isfinite(w)) throw InputError("tck: non-finite coordinate");
        put_le(out, static_cast<float>(w));
      }
    for (int a = 0; a < 3; ++a) put_le(out, nan);
  }
  for (int a = 0; a < 3; ++a) put_le(out, inf);
  return out;
}

void write_tck(const fs::path& path, const Tractogram& tractogram, const std::array<double, 3>& voxel_size,
               const std::map<std::string, std::string>& extra) {
  write_file(path, tck_bytes(tractogram, voxel_size, extra));
}

TckFile parse_tck(const std::string& bytes, const std::array<double, 3>& voxel_size) {
  TckFile out;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::optional<std::string> {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) return std::nullopt;
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  const auto magic = next_line();
  if (!magic || *magic != "mrtrix tracks") throw InputError("tck: missing 'mrtrix tracks' magic");
  bool ended = false;
  while (auto line = next_line()) {
    if (*line == "END") {
      ended = true;
      break;
    }
    const auto colon = line->find(':');
    if (colon == std::string::npos) throw InputError("tck: malformed header line '" + *line + "'");
    std::string key = line->substr(0, colon), value = line->substr(colon + 1);
    value.erase(0, value.find_first_not_of(' '));
    out.header[key] = value;
  }
  if (!ended) throw InputError("tck: header has no END line");
  if (!out.header.count("datatype") || out.header["datatype"] != "Float32LE")
    throw InputError("tck: unsupported datatype '" + (out.header.count("datatype") ? out.header["datatype"] : "") + "'");
  if (!out.header.count("file")) throw InputError("tck: missing 'file' entry");
  std::size_t offset = 0;
  {
    std::istringstream is(out.header["file"]);
    std::string dot;
    if (!(is >> dot >> offset) || dot != ".") throw InputError("tck: malformed 'file' entry");
  }
  if (offset < pos || offset > bytes.size()) throw InputError("tck: data offset outside the file");
  if ((bytes.size() - offset) % 12 != 0) throw InputError("tck: payload is not a whole number of triplets");

  Streamline current;
  bool terminated = false;
  for (std::size_t p = offset; p + 12 <= bytes.size(); p += 12) {
    const float x = get_le<float>(bytes.data() + p), y = get_le<float>(bytes.data() + p + 4),
                z = get_le<float>(bytes.data() + p + 8);
    if (std::isinf(x) && std::isinf(y) && std::isinf(z)) {
      terminated = true;
      if (p + 12 != bytes.size()) throw InputError("tck: data after the terminator");
      break;
    }
    if (std::isnan(x) && std::isnan(y) && std::isnan(z)) {
      out.tractogram.streamlines.push_back(std::move(current));
      current.clear();
      continue;
    }
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) throw InputError("tck: malformed point triplet");
    current.emplace_back(x / voxel_size[0], y / voxel_size[1], z / voxel_size[2]);
  }
  if (!terminated) throw InputError("tck: missing terminator triplet");
  if (!current.empty()) throw InputError("tck: last streamline is not closed");
  if (out.header.count("count")) {
    const std::string& c = out.header["count"];
    if (c.empty() || c.find_first_not_of("0123456789") != std::string::npos ||
        std::stoull(c) != out.tractogram.size())
      throw InputError("tck: count '" + c + "' does not match " + std::to_string(out.tractogram.size()) +
                       " streamlines");
  }
  return out;
}

TckFile read_tck(const fs::path& path, const std::array<double, 3>& voxel_size) {
  return parse_tck(read_file(path), voxel_size);
}

Tractogram quantize_like_tck(const Tractogram& tractogram, const std::array<double, 3>& voxel_size) {
  Tractogram out = tractogram;
  for (auto& sl : out.streamlines)
    for (Vec3& p : sl)
      for (int a = 0; a < 3; ++a) {
        const auto s = voxel_size[static_cast<std::size_t>(a)];
        p[a] = static_cast<double>(static_cast<float>(p[a] * s)) / s;
      }
  return out;
}

void save_checkpoint(const fs::path& header, const Checkpoint& ck) {
  const auto& s = ck.state;
  std::string payload;
  json blobs = json::array();
  auto add_blob = [&](const std::string& name, const ad::Shape& shape, std::span<const double> values) {
    blobs.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", values.size()}});
    for (double v : values) put_le(payload, v);
  };
  const auto params = s.params.named_parameters();
  const auto best = s.best.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    add_blob("param/" + name, t.shape(), t.data());
    add_blob("adam_m/" + name, t.shape(), s.adam_m.at(i));
    add_blob("adam_v/" + name, t.shape(), s.adam_v.at(i));
    add_blob("best/" + name, t.shape(), best[i].second.data());
  }
  json log = json::array();
  for (const auto& e : s.log) log.push_back({e.epoch, e.train_loss, e.val_loss, e.lr});
  const Rng master(s.seed);
  json doc = {{"format", "ddtrack-checkpoint"},
              {"version", kCheckpointVersion},
              {"model", model_config_json(s.params.config)},
              {"train_config", parse_json(ck.train_config_json, "checkpoint train config")},
              {"optimizer", {{"name", "adamw"}, {"step", s.adam_step}, {"lr", s.lr}}},
              {"scheduler",
               {{"epoch", s.epoch},
                {"plateau_best", finite_or_null(s.plateau_best)},
                {"plateau_bad", s.plateau_bad},
                {"best_val", finite_or_null(s.best_val)},
                {"best_epoch", s.best_epoch},
                {"stopped", s.stopped}}},
              {"rng", {{"seed", s.seed}, {"key", hex64(master.key())}, {"counter", master.counter()}}},
              {"sign_reference", {s.sign_reference.x(), s.sign_reference.y(), s.sign_reference.z()}},
              {"log", log},
              {"blobs", blobs},
              {"payload", payload_path(header).filename().string()},
              {"payload_bytes", payload.size()}};
  write_file(payload_path(header), payload);
  write_file(header, doc.dump(1) + "\n");
}

Checkpoint load_checkpoint(const fs::path& header) {
  const std::string where = "checkpoint '" + header.string() + "'";
  const json doc = parse_json(read_file(header), where);
  if (get_field<std::string>(doc, "format", where) != "ddtrack-checkpoint")
    throw InputError(where + ": field 'format' is not ddtrack-checkpoint");
  const int version = get_field<int>(doc, "version", where);
  if (version != kCheckpointVersion)
    throw InputError(where + ": version " + std::to_string(version) + " does not match supported version " +
                     std::to_string(kCheckpointVersion));

  Checkpoint ck;
  auto& s = ck.state;
  const auto config = model_config_from(field(doc, "model", where));
  ck.train_config_json = field(doc, "train_config", where).dump();
  const json& rng = field(doc, "rng", where);
  s.seed = get_field<std::uint64_t>(rng, "seed", where);
  if (parse_hex64(get_field<std::string>(rng, "key", where), "rng.key") != Rng(s.seed).key())
    throw InputError(where + ": rng key does not match its seed");
  const json& opt = field(doc, "optimizer", where);
  s.adam_step = get_field<std::uint64_t>(opt, "step", where);
  s.lr = get_field<double>(opt, "lr", where);
  const json& sched = field(doc, "scheduler", where);
  s.epoch = get_field<std::size_t>(sched, "epoch", where);
  s.plateau_best = from_nullable(field(sched, "plateau_best", where));
  s.plateau_bad = get_field<std::size_t>(sched, "plateau_bad", where);
  s.best_val = from_nullable(field(sched, "best_val", where));
  s.best_epoch = get_field<std::size_t>(sched, "best_epoch", where);
  s.stopped = get_field<bool>(sched, "stopped", where);
  const auto ref = get_field<std::array<double, 3>>(doc, "sign_reference", where);
  s.sign_reference = Vec3(ref[0], ref[1], ref[2]);
  for (const auto& e : field(doc, "log", where)) {
    if (!e.is_array() || e.size() != 4) throw InputError(where + ": malformed log entry");
    s.log.push_back({e[0].get<std::size_t>(), e[1].get<double>(), e[2].get<double>(), e[3].get<double>()});
  }

  const fs::path payload_file = header.parent_path() / get_field<std::string>(doc, "payload", where);
  const std::string payload = read_file(payload_file);
  const auto declared = get_field<std::size_t>(doc, "payload_bytes", where);
  if (payload.size() != declared)
    throw InputError(where + ": payload has " + std::to_string(payload.size()) + " bytes, header declares " +
                     std::to_string(declared));

  std::map<std::string, const json*> blobs;
  for (const auto& b : field(doc, "blobs", where)) blobs[get_field<std::string>(b, "name", where)] = &b;
  auto read_blob = [&](const std::string& name, const ad::Shape& shape) {
    const auto it = blobs.find(name);
    if (it == blobs.end()) throw InputError(where + ": missing blob '" + name + "'");
    const json& b = *it->second;
    const auto count = get_field<std::size_t>(b, "count", where);
    const auto offset = get_field<std::size_t>(b, "offset", where);
    if (count != ad::numel(shape) || get_field<ad::Shape>(b, "shape", where) != shape)
      throw InputError(where + ": blob '" + name + "' has " + std::to_string(count) + " values, parameter needs " +
                       std::to_string(ad::numel(shape)) + " " + ad::to_string(shape));
    if (offset + 8 * count > payload.size()) throw InputError(where + ": blob '" + name + "' runs past the payload");
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = get_le<double>(payload.data() + offset + 8 * i);
    return values;
  };

  s.params = model::init_parameters(config, 0);
  s.best = model::init_parameters(config, 0);
  auto params = s.params.named_parameters();
  auto best = s.best.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].first;
    const auto& shape = params[i].second.shape();
    const auto p = read_blob("param/" + name, shape);
    std::copy(p.begin(), p.end(), params[i].second.mutable_data().begin());
    const auto b = read_blob("best/" + name, shape);
    std::copy(b.begin(), b.end(), best[i].second.mutable_data().begin());
    s.adam_m.push_back(read_blob("adam_m/" + name, shape));
    s.adam_v.push_back(read_blob("adam_v/" + name, shape));
  }
  if (blobs.size() != 4 * params.size()) throw InputError(where + ": unexpected extra blobs");
  return ck;
}

}  // namespace ddtrack::io

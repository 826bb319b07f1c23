// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/config.hpp"

#include <cstdlib>

#include "ddtrack/error.hpp"
#include "json.hpp"

namespace ddtrack::config {
namespace {

using nlohmann::json;

json bundle_json(const phantom::BundleSpec& b) {
  json pts = json::array();
  for (const Vec3& p : b.centerline) pts.push_back({p.x(), p.y(), p.z()});
  return {{"name", b.name}, {"centerline", pts}, {"radius", b.radius}, {"weight", b.weight}};
}

json to_doc(const RunConfig& c) {
  json bundles = json::array();
  for (const auto& b : c.phantom.bundles) bundles.push_back(bundle_json(b));
  const auto& tr = c.train;
  const auto& tk = c.track.tracker;
  return {
      {"seed", c.seed},
      {"phantom",
       {{"dims", c.phantom.dims},
        {"voxel_size", c.phantom.voxel_size},
        {"roi_length", c.phantom.roi_length},
        {"bundles", bundles},
        {"snr", c.phantom.snr ? json(*c.phantom.snr) : json(nullptr)},
        {"lambda_parallel", c.phantom.tensor.lambda_parallel},
        {"lambda_perp", c.phantom.tensor.lambda_perp},
        {"s0", c.phantom.tensor.s0},
        {"gt_step", c.phantom.gt_step},
        {"gt_per_bundle", c.phantom.gt_per_bundle}}},
      {"sh", {{"lmax", c.sh.lmax}, {"reg", c.sh.reg}, {"b0_floor", c.sh.b0_floor}}},
      {"model",
       {{"spatial_channels1", c.model.spatial_channels1},
        {"spatial_channels2", c.model.spatial_channels2},
        {"embed_dim", c.model.embed_dim},
        {"context_dim", c.model.context_dim},
        {"gru_layers", c.model.gru_layers},
        {"step_embed_dim", c.model.step_embed_dim},
        {"global_dim", c.model.global_dim},
        {"denoiser_channels", c.model.denoiser_channels},
        {"norm_groups", c.model.norm_groups}}},
      {"train",
       {{"lr", tr.lr},
        {"weight_decay", tr.weight_decay},
        {"beta1", tr.beta1},
        {"beta2", tr.beta2},
        {"adam_eps", tr.adam_eps},
        {"plateau_factor", tr.plateau_factor},
        {"plateau_patience", tr.plateau_patience},
        {"min_lr", tr.min_lr},
        {"early_stop_patience", tr.early_stop_patience},
        {"max_epochs", tr.max_epochs},
        {"batch_streamlines", tr.batch_streamlines},
        {"val_fraction", tr.val_fraction},
        {"k_min", tr.k_min},
        {"k_max", tr.k_max},
        {"smooth_l1_beta", tr.smooth_l1_beta},
        {"canonical_sign", tr.canonical_sign},
        {"augment_reverse", tr.augment_reverse},
        {"max_streamlines", tr.max_streamlines}}},
      {"track",
       {{"step", tk.step},
        {"seeds_per_voxel", tk.seeds_per_voxel},
        {"angle", tk.angle_threshold_deg},
        {"max_steps", tk.max_steps},
        {"bidirectional", tk.bidirectional},
        {"steps", tk.sampler.num_steps},
        {"deterministic", tk.sampler.deterministic},
        {"chunk_size", tk.chunk_size},
        {"workers", c.track.workers}}},
      {"eval", {{"write_csv", c.eval.write_csv}}}};
}

bool same_kind(const json& def, const json& user) {
  if (def.is_number()) return user.is_number();
  if (def.is_null()) return user.is_null() || user.is_number();
  return def.type() == user.type();
}

void merge_strict(json& target, const json& user, const std::string& path) {
  if (!user.is_object()) throw InputError("config" + (path.empty() ? "" : " '" + path + "'") + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!target.contains(key)) throw InputError("config: unknown key '" + here + "'");
    json& slot = target[key];
    if (here == "phantom.snr") {
      if (!value.is_null() && !value.is_number()) throw InputError("config: 'phantom.snr' must be a number or null");
      slot = value;
    } else if (slot.is_object()) {
      merge_strict(slot, value, here);
    } else {
      if (!same_kind(slot, value)) throw InputError("config: '" + here + "' has the wrong type");
      slot = value;
    }
  }
}

template <typename T>
T get(const json& doc, const std::string& section, const std::string& key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    throw InputError("config: '" + section + "." + key + "' has an invalid value");
  }
}

std::vector<phantom::BundleSpec> bundles_from(const json& arr) {
  std::vector<phantom::BundleSpec> out;
  std::size_t i = 0;
  for (const auto& b : arr) {
    const std::string here = "phantom.bundles[" + std::to_string(i++) + "]";
    if (!b.is_object()) throw InputError("config: '" + here + "' must be an object");
    for (const auto& [key, value] : b.items())
      if (key != "name" && key != "centerline" && key != "radius" && key != "weight")
        throw InputError("config: unknown key '" + here + "." + key + "'");
    try {
      phantom::BundleSpec spec;
      spec.name = b.at("name").get<std::string>();
      for (const auto& p : b.at("centerline").get<std::vector<std::array<double, 3>>>())
        spec.centerline.emplace_back(p[0], p[1], p[2]);
      spec.radius = b.value("radius", 3.0);
      spec.weight = b.value("weight", 1.0);
      out.push_back(std::move(spec));
    } catch (const json::exception&) {
      throw InputError("config: '" + here + "' needs a string 'name' and a 'centerline' of [x,y,z] points");
    }
  }
  return out;
}

RunConfig from_doc(const json& d) {
  RunConfig c;
  try {
    c.seed = d.at("seed").get<std::uint64_t>();
  } catch (const json::exception&) {
    throw InputError("config: 'seed' must be a non-negative integer");
  }
  auto& ph = c.phantom;
  ph.dims = get<std::array<std::size_t, 3>>(d, "phantom", "dims");
  ph.voxel_size = get<std::array<double, 3>>(d, "phantom", "voxel_size");
  ph.roi_length = get<double>(d, "phantom", "roi_length");
  ph.bundles = bundles_from(d.at("phantom").at("bundles"));
  const json& snr = d.at("phantom").at("snr");
  ph.snr = snr.is_null() ? std::nullopt : std::optional<double>(snr.get<double>());
  ph.tensor.lambda_parallel = get<double>(d, "phantom", "lambda_parallel");
  ph.tensor.lambda_perp = get<double>(d, "phantom", "lambda_perp");
  ph.tensor.s0 = get<double>(d, "phantom", "s0");
  ph.gt_step = get<double>(d, "phantom", "gt_step");
  ph.gt_per_bundle = get<std::size_t>(d, "phantom", "gt_per_bundle");

  c.sh.lmax = get<int>(d, "sh", "lmax");
  c.sh.reg = get<double>(d, "sh", "reg");
  c.sh.b0_floor = get<double>(d, "sh", "b0_floor");

  auto& m = c.model;
  m.spatial_channels1 = get<std::size_t>(d, "model", "spatial_channels1");
  m.spatial_channels2 = get<std::size_t>(d, "model", "spatial_channels2");
  m.embed_dim = get<std::size_t>(d, "model", "embed_dim");
  m.context_dim = get<std::size_t>(d, "model", "context_dim");
  m.gru_layers = get<std::size_t>(d, "model", "gru_layers");
  m.step_embed_dim = get<std::size_t>(d, "model", "step_embed_dim");
  m.global_dim = get<std::size_t>(d, "model", "global_dim");
  m.denoiser_channels = get<std::size_t>(d, "model", "denoiser_channels");
  m.norm_groups = get<std::size_t>(d, "model", "norm_groups");

  auto& t = c.train;
  t.lr = get<double>(d, "train", "lr");
  t.weight_decay = get<double>(d, "train", "weight_decay");
  t.beta1 = get<double>(d, "train", "beta1");
  t.beta2 = get<double>(d, "train", "beta2");
  t.adam_eps = get<double>(d, "train", "adam_eps");
  t.plateau_factor = get<double>(d, "train", "plateau_factor");
  t.plateau_patience = get<std::size_t>(d, "train", "plateau_patience");
  t.min_lr = get<double>(d, "train", "min_lr");
  t.early_stop_patience = get<std::size_t>(d, "train", "early_stop_patience");
  t.max_epochs = get<std::size_t>(d, "train", "max_epochs");
  t.batch_streamlines = get<std::size_t>(d, "train", "batch_streamlines");
  t.val_fraction = get<double>(d, "train", "val_fraction");
  t.k_min = get<double>(d, "train", "k_min");
  t.k_max = get<double>(d, "train", "k_max");
  t.smooth_l1_beta = get<double>(d, "train", "smooth_l1_beta");
  t.canonical_sign = get<bool>(d, "train", "canonical_sign");
  t.augment_reverse = get<bool>(d, "train", "augment_reverse");
  t.max_streamlines = get<std::size_t>(d, "train", "max_streamlines");

  auto& tk = c.track.tracker;
  tk.step = get<double>(d, "track", "step");
  tk.seeds_per_voxel = get<std::size_t>(d, "track", "seeds_per_voxel");
  tk.angle_threshold_deg = get<double>(d, "track", "angle");
  tk.max_steps = get<std::size_t>(d, "track", "max_steps");
  tk.bidirectional = get<bool>(d, "track", "bidirectional");
  tk.sampler.num_steps = get<int>(d, "track", "steps");
  tk.sampler.deterministic = get<bool>(d, "track", "deterministic");
  tk.chunk_size = get<std::size_t>(d, "track", "chunk_size");
  c.track.workers = get<std::size_t>(d, "track", "workers");

  c.eval.write_csv = get<bool>(d, "eval", "write_csv");
  return c;
}

}  // namespace

std::uint64_t parse_seed(const std::string& text, const std::string& source) {
  if (text.empty() || text.size() > 20 || text.find_first_not_of("0123456789") != std::string::npos)
    throw InputError(source + ": seed must be a non-negative decimal integer, got '" + text + "'");
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw InputError(source + ": seed out of range: '" + text + "'");
  }
}

RunConfig default_config() {
  RunConfig c;
  if (const char* env = std::getenv("DDTRACK_SEED"); env && *env) c.seed = parse_seed(env, "DDTRACK_SEED");
  return c;
}

RunConfig parse_config(const std::string& json_text) {
  json user;
  try {
    user = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("config: invalid JSON (") + e.what() + ")");
  }
  json doc = to_doc(default_config());
  merge_strict(doc, user, "");
  return from_doc(doc);
}

std::string to_json(const RunConfig& config) { return to_doc(config).dump(2) + "\n"; }

}  // namespace ddtrack::config

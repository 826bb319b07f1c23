// SPDX-License-Identifier: Apache-2.0
// ddtrack: phantom generation, SH fitting, training, tracking and evaluation.

#include <malloc.h>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "ddtrack/config.hpp"
#include "ddtrack/error.hpp"
#include "ddtrack/io.hpp"
#include "ddtrack/metrics.hpp"
#include "ddtrack/phantom.hpp"
#include "ddtrack/sh.hpp"
#include "ddtrack/tracker.hpp"
#include "ddtrack/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace ddtrack;
using nlohmann::json;

namespace {

// Sub-streams of the run seed.
constexpr std::uint64_t kDwiStream = 11;
constexpr std::uint64_t kGtStream = 12;
constexpr std::uint64_t kSeedingStream = 21;
constexpr std::uint64_t kTrackingStream = 22;

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) { return Rng(seed).split(stream).next_u64(); }

struct Common {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string seed_text;
};

config::RunConfig load_config(const Common& c) {
  config::RunConfig cfg = c.config_path.empty() ? config::default_config() : config::parse_config(io::read_file(c.config_path));
  if (!c.seed_text.empty()) cfg.seed = config::parse_seed(c.seed_text, "--seed");
  return cfg;
}

class Manifest {
 public:
  Manifest(std::string command, const config::RunConfig& cfg)
      : command_(std::move(command)), config_(json::parse(config::to_json(cfg))),
        start_(std::chrono::steady_clock::now()) {}

  // Volume and checkpoint headers are hashed together with their payloads.
  void input(const fs::path& p) { hash_into(inputs_, p, p.string()); }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void note(const std::string& key, json value) { notes_[key] = std::move(value); }

  void write(const fs::path& dir) const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::map<std::string, std::string> outputs;
    for (const auto& p : outputs_) hash_into(outputs, p, p.filename().string());
    json doc = {{"command", command_}, {"tool_version", config::kToolVersion}, {"config", config_},
                {"inputs", inputs_}, {"outputs", outputs}, {"wall_time_s", wall}};
    if (!notes_.empty()) doc["results"] = notes_;
    // Several commands may share one directory; each keeps its latest entry.
    json runs = json::array();
    const fs::path path = dir / "manifest.json";
    if (fs::exists(path)) {
      const json prior = json::parse(io::read_file(path), nullptr, false);
      if (prior.is_object() && prior.contains("runs") && prior["runs"].is_array())
        for (const auto& r : prior["runs"])
          if (r.value("command", "") != command_) runs.push_back(r);
    }
    runs.push_back(std::move(doc));
    io::write_file(path, json({{"runs", runs}}).dump(2) + "\n");
  }

 private:
  std::string command_;
  json config_;
  std::chrono::steady_clock::time_point start_;
  std::map<std::string, std::string> inputs_;
  std::vector<fs::path> outputs_;
  json notes_ = json::object();

  static void hash_into(std::map<std::string, std::string>& into, const fs::path& p, const std::string& key) {
    into[key] = io::file_hash(p);
    fs::path payload = p;
    payload.replace_extension(".raw");
    if (p.extension() == ".json" && fs::exists(payload)) {
      std::string raw_key = key;
      raw_key.replace(raw_key.size() - 5, 5, ".raw");
      into[raw_key] = io::file_hash(payload);
    }
  }
};

std::map<std::string, std::string> grid_keys(const Grid& g) {
  std::ostringstream dims, vs;
  dims << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2];
  vs.precision(17);
  vs << g.voxel_size[0] << ' ' << g.voxel_size[1] << ' ' << g.voxel_size[2];
  return {{"ddtrack_dims", dims.str()}, {"ddtrack_voxel_size", vs.str()}};
}

// Rejects a tractogram written for another grid.
void check_tck_grid(const io::TckFile& tck, const Grid& g, const std::string& what) {
  const auto keys = grid_keys(g);
  for (const auto& [k, v] : keys) {
    const auto it = tck.header.find(k);
    if (it != tck.header.end() && it->second != v)
      throw InputError(what + ": grid mismatch (" + k + " is '" + it->second + "', expected '" + v + "')");
  }
}

void write_config(const fs::path& dir, const config::RunConfig& cfg, Manifest& m) {
  io::write_file(dir / "config.json", config::to_json(cfg));
  m.output(dir / "config.json");
}

int cmd_phantom(const Common& common) {
  const auto cfg = load_config(common);
  const fs::path out = common.out_dir;
  fs::create_directories(out);
  Manifest manifest("phantom", cfg);
  if (!common.config_path.empty()) manifest.input(common.config_path);

  const auto& pc = cfg.phantom;
  const auto ph = phantom::build_phantom(pc.bundles, pc.dims, pc.voxel_size, pc.roi_length);
  const auto dwi = phantom::simulate_dwi(ph, GradientScheme::default_scheme(), pc.tensor, pc.snr,
                                         derive(cfg.seed, kDwiStream));
  const auto gt = phantom::generate_gt_tractogram(ph, pc.gt_step, pc.gt_per_bundle, derive(cfg.seed, kGtStream));

  std::vector<std::string> names, roi_labels;
  std::vector<Mask> rois;
  for (std::size_t b = 0; b < ph.bundles.size(); ++b) {
    names.push_back(ph.bundles[b].name);
    roi_labels.push_back(ph.bundles[b].name + ".head");
    roi_labels.push_back(ph.bundles[b].name + ".tail");
    rois.push_back(ph.head_rois[b]);
    rois.push_back(ph.tail_rois[b]);
  }
  // Ground-truth voxel sets come from the coordinates as stored in gt.tck.
  const Tractogram stored = io::quantize_like_tck(gt.tractogram, ph.grid.voxel_size);
  std::vector<Mask> gt_masks;
  for (std::size_t b = 0; b < ph.bundles.size(); ++b) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < stored.size(); ++i)
      if (stored.labels[i] == static_cast<int>(b)) members.push_back(i);
    gt_masks.push_back(metrics::coverage(stored, members, ph.grid));
  }

  io::write_volume(out / "dwi.json", io::to_volume(dwi));
  io::write_volume(out / "wm_mask.json", io::to_volume(std::vector<Mask>{ph.wm_mask}, {"wm"}));
  io::write_volume(out / "rois.json", io::to_volume(rois, roi_labels));
  io::write_volume(out / "bundles.json", io::to_volume(ph.bundle_masks, names));
  io::write_volume(out / "gt_masks.json", io::to_volume(gt_masks, names));
  io::write_tck(out / "gt.tck", gt.tractogram, ph.grid.voxel_size, grid_keys(ph.grid));
  io::write_file(out / "gt_labels.json", json({{"bundles", names}, {"labels", gt.tractogram.labels}}).dump() + "\n");
  write_config(out, cfg, manifest);
  for (const char* f : {"dwi.json", "wm_mask.json", "rois.json", "bundles.json", "gt_masks.json", "gt.tck",
                        "gt_labels.json"})
    manifest.output(out / f);
  manifest.note("gt_streamlines", gt.tractogram.size());
  manifest.note("gt_discarded", gt.discarded);
  manifest.note("wm_voxels", ph.wm_mask.count());
  manifest.write(out);
  std::cout << "phantom: " << ph.wm_mask.count() << " WM voxels, " << gt.tractogram.size()
            << " ground-truth streamlines (" << gt.discarded << " discarded)\n";
  return 0;
}

int cmd_fit_sh(const Common& common, const std::string& dwi_path, const CLI::Option* lmax_opt, int lmax,
               const CLI::Option* reg_opt, double reg) {
  auto cfg = load_config(common);
  if (lmax_opt->count()) cfg.sh.lmax = lmax;
  if (reg_opt->count()) cfg.sh.reg = reg;
  const fs::path out = common.out_dir;
  fs::create_directories(out);
  Manifest manifest("fit-sh", cfg);
  manifest.input(dwi_path);
  const auto dwi = io::to_dwi(io::read_volume(dwi_path));
  const auto shv = sh::fit_sh(dwi, sh::ShBasisConfig{cfg.sh.lmax}, cfg.sh.reg, cfg.sh.b0_floor);
  io::write_volume(out / "sh.json", io::to_volume(shv));
  manifest.output(out / "sh.json");
  manifest.write(out);
  std::cout << "fit-sh: l_max " << cfg.sh.lmax << ", " << shv.coeffs_per_voxel << " coefficients per voxel\n";
  return 0;
}

std::string loss_csv(const train::TrainState& s) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train,val,lr\n";
  for (const auto& e : s.log) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
  return os.str();
}

int cmd_train(const Common& common, const std::string& data_dir, std::string sh_path, bool resume,
              const CLI::Option* epochs_opt, std::size_t max_epochs, const std::string& preset) {
  auto cfg = load_config(common);
  if (preset == "tiny-overfit") {
    cfg.train.max_streamlines = 10;
    cfg.train.max_epochs = 200;
    cfg.train.val_fraction = 0.0;
    cfg.train.augment_reverse = false;
    cfg.train.batch_streamlines = 10;
  } else if (!preset.empty()) {
    throw InputError("unknown preset '" + preset + "'");
  }
  if (epochs_opt->count()) cfg.train.max_epochs = max_epochs;
  const fs::path data = data_dir, out = common.out_dir;
  if (sh_path.empty()) sh_path = (data / "sh.json").string();
  fs::create_directories(out);
  Manifest manifest("train", cfg);
  manifest.input(data / "gt.tck");
  manifest.input(data / "gt_labels.json");
  manifest.input(sh_path);

  const auto shv = io::to_sh(io::read_volume(sh_path));
  auto tck = io::read_tck(data / "gt.tck", shv.grid.voxel_size);
  check_tck_grid(tck, shv.grid, "gt.tck");
  const json labels = json::parse(io::read_file(data / "gt_labels.json"));
  tck.tractogram.labels = labels.at("labels").get<std::vector<int>>();
  if (tck.tractogram.labels.size() != tck.tractogram.size())
    throw InputError("gt_labels.json has " + std::to_string(tck.tractogram.labels.size()) + " labels for " +
                     std::to_string(tck.tractogram.size()) + " streamlines");
  if (tck.tractogram.empty()) throw InputError("training set is empty");

  auto model_cfg = cfg.model;
  model_cfg.sh_coeffs = shv.coeffs_per_voxel;
  const fs::path ckpt = out / "checkpoint.json";
  train::TrainState state;
  if (resume) {
    auto loaded = io::load_checkpoint(ckpt);
    if (!(loaded.state.params.config == model_cfg)) throw InputError("checkpoint model configuration differs from config");
    state = std::move(loaded.state);
  } else {
    state = train::init_state(model_cfg, cfg.train, cfg.seed);
  }
  const auto dataset = train::build_dataset(tck.tractogram, shv, cfg.train,
                                            resume ? std::optional<Vec3>(state.sign_reference) : std::nullopt);
  const std::string train_json = json::parse(config::to_json(cfg)).at("train").dump();
  train::train(state, dataset, cfg.train, cfg.train.max_epochs, [&](const train::TrainState& s) {
    io::save_checkpoint(ckpt, {s, train_json});
    io::write_file(out / "loss.csv", loss_csv(s));
    const auto& e = s.log.back();
    std::cout << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " lr " << e.lr << std::endl;
  });
  io::save_checkpoint(ckpt, {state, train_json});
  io::write_file(out / "loss.csv", loss_csv(state));
  write_config(out, cfg, manifest);
  manifest.output(ckpt);
  manifest.output(out / "loss.csv");
  manifest.note("epochs", state.epoch);
  manifest.note("best_epoch", state.best_epoch);
  manifest.note("early_stopped", state.stopped);
  manifest.note("sequences", dataset.sequences.size());
  manifest.write(out);
  return 0;
}

struct TrackFlags {
  std::string checkpoint, sh, mask;
  std::size_t seeds_per_voxel = 5;
  double step = 1.0, angle = 45.0;
  int steps = 4;
  bool deterministic = true, stochastic = false;
  std::size_t workers = 1, max_steps = 500;
};

int cmd_track(const Common& common, const TrackFlags& f, const CLI::App& sub) {
  auto cfg = load_config(common);
  auto& tk = cfg.track.tracker;
  if (sub.count("--seeds-per-voxel")) tk.seeds_per_voxel = f.seeds_per_voxel;
  if (sub.count("--step")) tk.step = f.step;
  if (sub.count("--angle")) tk.angle_threshold_deg = f.angle;
  if (sub.count("--steps")) tk.sampler.num_steps = f.steps;
  if (sub.count("--max-steps")) tk.max_steps = f.max_steps;
  if (sub.count("--deterministic")) tk.sampler.deterministic = true;
  if (sub.count("--stochastic")) tk.sampler.deterministic = false;
  if (sub.count("--workers")) cfg.track.workers = f.workers;
  tk.validate();
  if (cfg.track.workers == 0) throw InputError("--workers must be positive");

  const fs::path out = common.out_dir;
  if (!fs::exists(f.checkpoint)) throw InputError("checkpoint '" + f.checkpoint + "' not found");
  fs::create_directories(out);
  Manifest manifest("track", cfg);
  manifest.input(f.checkpoint);
  manifest.input(f.sh);
  manifest.input(f.mask);

  const auto ck = io::load_checkpoint(f.checkpoint);
  const auto shv = io::to_sh(io::read_volume(f.sh));
  const auto masks = io::to_masks(io::read_volume(f.mask));
  if (masks.size() != 1) throw InputError("mask volume must have exactly one channel");
  if (!(masks[0].grid == shv.grid)) throw InputError("mask and SH volume grids differ");

  Rng seed_rng = Rng(cfg.seed).split(kSeedingStream);
  const auto seeds = tracker::seed_points(masks[0], tk.seeds_per_voxel, seed_rng);
  const tracker::DiffusionModel model(ck.state.best, shv, tk.sampler);
  const auto result = tracker::track(seeds, model, masks[0], tk, Rng(cfg.seed).split(kTrackingStream), cfg.track.workers);

  io::write_tck(out / "tracks.tck", result.tractogram, shv.grid.voxel_size, grid_keys(shv.grid));
  json stops = json::object();
  for (std::size_t k = 0; k < result.stop_counts.size(); ++k)
    stops[tracker::to_string(static_cast<tracker::StopReason>(k))] = result.stop_counts[k];
  const json stats = {{"seeds", result.seeds}, {"streamlines", result.tractogram.size()},
                      {"discarded", result.discarded}, {"stop_reasons", stops}};
  io::write_file(out / "track_stats.json", stats.dump(2) + "\n");
  write_config(out, cfg, manifest);
  manifest.output(out / "tracks.tck");
  manifest.output(out / "track_stats.json");
  manifest.note("tracking", stats);
  manifest.write(out);
  std::cout << "track: " << result.seeds << " seeds, " << result.tractogram.size() << " streamlines, "
            << result.discarded << " discarded\n";
  return 0;
}

int cmd_eval(const Common& common, const std::string& tracks, const std::string& phantom_dir) {
  const auto cfg = load_config(common);
  const fs::path ph = phantom_dir, out = common.out_dir;
  fs::create_directories(out);
  Manifest manifest("eval", cfg);
  manifest.input(tracks);
  manifest.input(ph / "rois.json");
  manifest.input(ph / "gt_masks.json");

  const auto roi_vol = io::read_volume(ph / "rois.json");
  const auto gt_vol = io::read_volume(ph / "gt_masks.json");
  if (!(roi_vol.grid == gt_vol.grid)) throw InputError("rois and gt_masks grids differ");
  const auto roi_masks = io::to_masks(roi_vol);
  const auto gt_masks = io::to_masks(gt_vol);
  if (roi_masks.size() != 2 * gt_masks.size() || gt_vol.labels.size() != gt_masks.size())
    throw InputError("rois.json must hold a head and a tail mask per bundle of gt_masks.json");
  metrics::RoiSet rois;
  rois.names = gt_vol.labels;
  for (std::size_t b = 0; b < gt_masks.size(); ++b) {
    rois.heads.push_back(roi_masks[2 * b]);
    rois.tails.push_back(roi_masks[2 * b + 1]);
  }
  const auto tck = io::read_tck(tracks, roi_vol.grid.voxel_size);
  check_tck_grid(tck, roi_vol.grid, tracks);

  const auto report = metrics::evaluate(tck.tractogram, rois, gt_masks);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  io::write_file(out / "metrics.json", metrics::to_json(report));
  manifest.output(out / "metrics.json");
  if (cfg.eval.write_csv) {
    io::write_file(out / "metrics.csv", metrics::to_csv(report));
    manifest.output(out / "metrics.csv");
  }
  write_config(out, cfg, manifest);
  manifest.write(out);
  std::cout << "eval: VC " << report.connections.vc_fraction() << " IC " << report.connections.ic_fraction() << " NC "
            << report.connections.nc_fraction() << " mean OL " << report.volume.mean_overlap << " mean OR "
            << report.volume.mean_overreach << '\n';
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool out_required = true) {
  sub->add_option("--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("--out", c.out_dir, "Output directory")->required(out_required);
  sub->add_option("--seed", c.seed_text, "Seed for all randomness (overrides config and DDTRACK_SEED)");
}

}  // namespace

int main(int argc, char** argv) {
  // Training frees and reallocates the same multi-megabyte activations every
  // step; keeping them in the heap instead of fresh mmaps avoids page-fault churn.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);

  CLI::App app{"Diffusion-model tractography on synthetic phantoms"};
  app.set_version_flag("--version", config::kToolVersion);
  app.require_subcommand(1);

  Common common;
  auto* phantom_cmd = app.add_subcommand("phantom", "Generate a phantom: DWI, masks, ROIs, ground-truth tracts");
  add_common(phantom_cmd, common);

  std::string dwi_path;
  int lmax = 6;
  double reg = 0.0;
  auto* fit_cmd = app.add_subcommand("fit-sh", "Fit SH coefficients to a DWI volume");
  add_common(fit_cmd, common);
  fit_cmd->add_option("--dwi", dwi_path, "DWI volume header")->required();
  auto* lmax_opt = fit_cmd->add_option("--lmax", lmax, "Even maximum SH order");
  auto* reg_opt = fit_cmd->add_option("--reg", reg, "Laplace-Beltrami regularisation weight");

  std::string data_dir, sh_path, preset;
  bool resume = false;
  std::size_t max_epochs = 0;
  auto* train_cmd = app.add_subcommand("train", "Train the orientation model on ground-truth streamlines");
  add_common(train_cmd, common);
  train_cmd->add_option("--data", data_dir, "Phantom directory (gt.tck, gt_labels.json)")->required();
  train_cmd->add_option("--sh", sh_path, "SH volume header (default: <data>/sh.json)");
  train_cmd->add_flag("--resume", resume, "Continue from <out>/checkpoint.json");
  auto* epochs_opt = train_cmd->add_option("--max-epochs", max_epochs, "Stop after this many epochs in total");
  train_cmd->add_option("--preset", preset, "Named override set: tiny-overfit");

  TrackFlags tf;
  auto* track_cmd = app.add_subcommand("track", "Track streamlines with a trained model");
  add_common(track_cmd, common);
  track_cmd->add_option("--checkpoint", tf.checkpoint, "Checkpoint header")->required();
  track_cmd->add_option("--sh", tf.sh, "SH volume header")->required();
  track_cmd->add_option("--mask", tf.mask, "White-matter mask header (seeding and termination)")->required();
  track_cmd->add_option("--seeds-per-voxel", tf.seeds_per_voxel, "Seeds per mask voxel");
  track_cmd->add_option("--step", tf.step, "Step size in voxels");
  track_cmd->add_option("--angle", tf.angle, "Angle threshold in degrees");
  track_cmd->add_option("--steps", tf.steps, "Reverse diffusion steps");
  track_cmd->add_option("--max-steps", tf.max_steps, "Step budget per direction");
  track_cmd->add_flag("--deterministic", tf.deterministic, "Start sampling from zero, no reverse noise (default)");
  track_cmd->add_flag("--stochastic", tf.stochastic, "Sample from noise");
  track_cmd->add_option("--workers", tf.workers, "Worker threads");

  std::string tracks, phantom_dir;
  auto* eval_cmd = app.add_subcommand("eval", "Score a tractogram against a phantom");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--tracks", tracks, "Tractogram (.tck)")->required();
  eval_cmd->add_option("--phantom", phantom_dir, "Phantom directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*phantom_cmd) return cmd_phantom(common);
    if (*fit_cmd) return cmd_fit_sh(common, dwi_path, lmax_opt, lmax, reg_opt, reg);
    if (*train_cmd) return cmd_train(common, data_dir, sh_path, resume, epochs_opt, max_epochs, preset);
    if (*track_cmd) return cmd_track(common, tf, *track_cmd);
    if (*eval_cmd) return cmd_eval(common, tracks, phantom_dir);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const InvariantError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}

// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/tracker.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <string>
#include <thread>

#include "ddtrack/error.hpp"
#include "ddtrack/ops.hpp"
#include "ddtrack/sh.hpp"

namespace ddtrack::tracker {
namespace {

double turn_degrees(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(a.dot(b), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

// Advances every unstopped walker until all have stopped.
void run_lockstep(std::vector<TrackState>& states, std::vector<Rng>& rngs, const PropagationModel& model,
                  const Mask& wm_mask, const TrackerConfig& config) {
  std::vector<std::size_t> active;
  std::vector<Vec3> positions;
  std::vector<std::vector<double>*> memories;
  std::vector<Rng*> rng_ptrs;
  std::vector<std::optional<Vec3>> out;
  for (;;) {
    active.clear();
    for (std::size_t i = 0; i < states.size(); ++i)
      if (states[i].stop == StopReason::none) active.push_back(i);
    if (active.empty()) return;
    positions.clear();
    memories.clear();
    rng_ptrs.clear();
    for (std::size_t i : active) {
      positions.push_back(states[i].points.back());
      memories.push_back(&states[i].memory);
      rng_ptrs.push_back(&rngs[i]);
    }
    out.assign(active.size(), std::nullopt);
    model.predict(positions, memories, rng_ptrs, out);
    for (std::size_t j = 0; j < active.size(); ++j) apply_prediction(states[active[j]], out[j], wm_mask, config);
  }
}

// Points of a finished half that are emitted (a mask-exit point is dropped).
std::span<const Vec3> emitted(const TrackState& s) {
  std::size_t n = s.points.size();
  if (s.stop == StopReason::mask_exit && n > 0) --n;
  return {s.points.data(), n};
}

struct ChunkResult {
  std::vector<std::optional<Streamline>> streamlines;
  std::vector<std::size_t> stop_counts;
};

ChunkResult track_chunk(std::span<const Vec3> seeds, std::size_t first_index, const PropagationModel& model,
                        const Mask& wm_mask, const TrackerConfig& config, const Rng& master) {
  const std::size_t n = seeds.size();
  ChunkResult result;
  result.stop_counts.assign(5, 0);
  std::vector<Rng> rngs;
  std::vector<TrackState> fwd;
  for (std::size_t i = 0; i < n; ++i) {
    rngs.push_back(master.split(first_index + i));
    fwd.push_back(TrackState::start(seeds[i], model));
  }
  run_lockstep(fwd, rngs, model, wm_mask, config);

  std::vector<TrackState> bwd;
  std::vector<Rng> bwd_rngs;
  std::vector<std::size_t> bwd_owner;
  if (config.bidirectional) {
    for (std::size_t i = 0; i < n; ++i) {
      if (fwd[i].points.size() < 2) continue;
      TrackState s = TrackState::start(seeds[i], model);
      s.prev_dir = -(fwd[i].points[1] - fwd[i].points[0]).normalized();
      bwd.push_back(std::move(s));
      bwd_rngs.push_back(rngs[i]);
      bwd_owner.push_back(i);
    }
    run_lockstep(bwd, bwd_rngs, model, wm_mask, config);
  }

  result.streamlines.resize(n);
  std::vector<const TrackState*> back_of(n, nullptr);
  for (std::size_t j = 0; j < bwd.size(); ++j) back_of[bwd_owner[j]] = &bwd[j];
  for (std::size_t i = 0; i < n; ++i) {
    ++result.stop_counts[static_cast<std::size_t>(fwd[i].stop)];
    Streamline sl;
    if (back_of[i]) {
      ++result.stop_counts[static_cast<std::size_t>(back_of[i]->stop)];
      const auto back = emitted(*back_of[i]);
      // Reverse the backward half, skipping its copy of the seed.
      for (std::size_t k = back.size(); k > 1; --k) sl.push_back(back[k - 1]);
    }
    const auto front = emitted(fwd[i]);
    sl.insert(sl.end(), front.begin(), front.end());
    if (sl.size() >= 3) result.streamlines[i] = std::move(sl);
  }
  return result;
}

}  // namespace

void TrackerConfig::validate() const {
  if (!(step > 0.0)) throw InputError("track.step must be positive");
  if (seeds_per_voxel == 0) throw InputError("track.seeds_per_voxel must be positive");
  if (!(angle_threshold_deg > 0.0 && angle_threshold_deg < 180.0))
    throw InputError("track.angle must lie in (0, 180) degrees");
  if (max_steps == 0) throw InputError("track.max_steps must be positive");
  if (chunk_size == 0) throw InputError("track.chunk_size must be positive");
  sampler.validate();
}

const char* to_string(StopReason reason) {
  switch (reason) {
    case StopReason::none: return "none";
    case StopReason::mask_exit: return "mask_exit";
    case StopReason::angle: return "angle";
    case StopReason::max_steps: return "max_steps";
    case StopReason::degenerate: return "degenerate";
  }
  return "unknown";
}

DiffusionModel::DiffusionModel(const model::Parameters& params, const ShVolume& sh, diffusion::SamplerConfig sampler)
    : params_(params), sh_(sh), sampler_(sampler) {
  sampler_.validate();
  if (sh.coeffs_per_voxel != params.config.sh_coeffs)
    throw InputError("SH volume has " + std::to_string(sh.coeffs_per_voxel) + " coefficients per voxel, model expects " +
                     std::to_string(params.config.sh_coeffs));
}

std::vector<double> DiffusionModel::initial_memory() const {
  return std::vector<double>(params_.config.gru_layers * params_.config.context_dim, 0.0);
}

void DiffusionModel::predict(std::span<const Vec3> positions, std::span<std::vector<double>* const> memories,
                             std::span<Rng* const> rngs, std::span<std::optional<Vec3>> out) const {
  ad::NoGradGuard no_grad;
  const std::size_t n = positions.size();
  const auto& cfg = params_.config;
  std::vector<sh::NeighborhoodFeature> feats;
  feats.reserve(n);
  for (const Vec3& p : positions) feats.push_back(sh::sample_neighborhood(sh_, p));
  const auto emb = model::spatial_encode(params_, model::features_to_tensor(feats, cfg.sh_coeffs));

  const std::size_t width = cfg.context_dim;
  model::TemporalState state;
  for (std::size_t l = 0; l < cfg.gru_layers; ++l) {
    std::vector<double> h(n * width);
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(memories[i]->data() + l * width, width, h.data() + i * width);
    state.hidden.emplace_back(ad::Shape{n, width}, std::move(h));
  }
  const auto next = model::temporal_encode(params_, emb.z, state);
  for (std::size_t l = 0; l < cfg.gru_layers; ++l) {
    const auto h = next.hidden[l].data();
    for (std::size_t i = 0; i < n; ++i) std::copy_n(h.data() + i * width, width, memories[i]->data() + l * width);
  }

  const ad::Tensor& context = next.context();
  const diffusion::BatchDenoiser denoiser = [&](std::span<const Vec3> yk, double k, std::span<Vec3> h_out) {
    const std::vector<double> ks(n, k);
    std::vector<double> y(n * 3);
    for (std::size_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) y[3 * i + a] = yk[i][a];
    const auto h = model::denoise(params_, ad::Tensor({n, 3}, std::move(y)),
                                  model::global_condition(params_, context, ks), emb.v);
    for (std::size_t i = 0; i < n; ++i) h_out[i] = Vec3(h[3 * i], h[3 * i + 1], h[3 * i + 2]);
  };
  std::vector<Rng> local;
  local.reserve(n);
  for (Rng* r : rngs) local.push_back(*r);
  const auto result = diffusion::sample_orientations(denoiser, n, sampler_, local);
  for (std::size_t i = 0; i < n; ++i) {
    *rngs[i] = local[i];
    out[i] = result[i];
  }
}

void FieldModel::predict(std::span<const Vec3> positions, std::span<std::vector<double>* const>,
                         std::span<Rng* const>, std::span<std::optional<Vec3>> out) const {
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Vec3 d = field_(positions[i]);
    const double norm = d.norm();
    out[i] = norm > 0.0 && std::isfinite(norm) ? std::optional<Vec3>(d / norm) : std::nullopt;
  }
}

TrackState TrackState::start(const Vec3& seed, const PropagationModel& model) {
  TrackState s;
  s.points.push_back(seed);
  s.memory = model.initial_memory();
  return s;
}

std::vector<Vec3> seed_points(const Mask& wm_mask, std::size_t seeds_per_voxel, Rng& rng) {
  if (wm_mask.count() == 0) throw InputError("seed mask is empty");
  std::vector<Vec3> seeds;
  for (std::size_t v = 0; v < wm_mask.values.size(); ++v) {
    if (!wm_mask.values[v]) continue;
    const auto idx = wm_mask.grid.unlinear(v);
    for (std::size_t s = 0; s < seeds_per_voxel; ++s) {
      const double x = rng.uniform();
      const double y = rng.uniform();
      const double z = rng.uniform();
      seeds.emplace_back(idx[0] + x, idx[1] + y, idx[2] + z);
    }
  }
  return seeds;
}

StopReason check_stop(const TrackState& state, const Mask& wm_mask, const TrackerConfig& config) {
  if (!wm_mask.at_point(state.points.back())) return StopReason::mask_exit;
  if (state.last_turn_deg > config.angle_threshold_deg) return StopReason::angle;
  if (state.steps >= config.max_steps) return StopReason::max_steps;
  return StopReason::none;
}

void apply_prediction(TrackState& state, const std::optional<Vec3>& raw, const Mask& wm_mask,
                      const TrackerConfig& config) {
  if (!raw) {
    state.stop = StopReason::degenerate;
    return;
  }
  Vec3 dir = *raw;
  double turn = 0.0;
  if (state.prev_dir) {
    if (dir.dot(*state.prev_dir) < 0.0) dir = -dir;
    turn = turn_degrees(dir, *state.prev_dir);
    if (turn > config.angle_threshold_deg) {
      state.stop = StopReason::angle;
      return;
    }
  }
  state.points.push_back(state.points.back() + config.step * dir);
  state.prev_dir = dir;
  state.last_turn_deg = turn;
  ++state.steps;
  state.stop = check_stop(state, wm_mask, config);
}

void step(TrackState& state, const PropagationModel& model, const Mask& wm_mask, const TrackerConfig& config,
          Rng& rng) {
  if (state.stop != StopReason::none) throw InputError("step called on a stopped walker");
  std::vector<Vec3> pos{state.points.back()};
  std::vector<std::vector<double>*> mem{&state.memory};
  std::vector<Rng*> rngs{&rng};
  std::vector<std::optional<Vec3>> out(1);
  model.predict(pos, mem, rngs, out);
  apply_prediction(state, out[0], wm_mask, config);
}

TrackResult track(std::span<const Vec3> seeds, const PropagationModel& model, const Mask& wm_mask,
                  const TrackerConfig& config, const Rng& rng, std::size_t workers) {
  config.validate();
  const std::size_t chunks = (seeds.size() + config.chunk_size - 1) / config.chunk_size;
  std::vector<ChunkResult> results(chunks);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      try {
        const std::size_t begin = c * config.chunk_size;
        const std::size_t end = std::min(seeds.size(), begin + config.chunk_size);
        results[c] = track_chunk(seeds.subspan(begin, end - begin), begin, model, wm_mask, config, rng);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = chunks;
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, chunks));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  TrackResult out;
  out.seeds = seeds.size();
  out.stop_counts.assign(5, 0);
  for (auto& r : results) {
    for (std::size_t k = 0; k < 5; ++k) out.stop_counts[k] += r.stop_counts[k];
    for (auto& sl : r.streamlines) {
      if (sl)
        out.tractogram.streamlines.push_back(std::move(*sl));
      else
        ++out.discarded;
    }
  }
  return out;
}

}  // namespace ddtrack::tracker

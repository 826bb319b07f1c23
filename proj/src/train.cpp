// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "ddtrack/diffusion.hpp"
#include "ddtrack/error.hpp"
#include "ddtrack/ops.hpp"

namespace ddtrack::train {
namespace {

constexpr std::size_t kCells = sh::NeighborhoodFeature::kCells;

// Stream identifiers under the run seed.
constexpr std::uint64_t kSplitStream = 1;
constexpr std::uint64_t kValidationStream = 2;
constexpr std::uint64_t kModelInitStream = 3;
constexpr std::uint64_t kEpochStreamBase = 1000;

struct BatchOutputs {
  ad::Tensor h;
  ad::Tensor eps_pred;
  ad::Tensor loss;
};

BatchOutputs forward_batch(const model::Parameters& params, const Batch& batch, const NoiseDraw& noise,
                           const TrainConfig& config) {
  const std::size_t rows = batch.rows();
  const auto emb = model::spatial_encode(params, batch.features);

  auto state = model::TemporalState::zeros(params.config, batch.active.empty() ? 0 : batch.active[0]);
  std::vector<ad::Tensor> contexts;
  for (std::size_t t = 0; t < batch.active.size(); ++t) {
    const std::size_t a = batch.active[t];
    for (auto& h : state.hidden)
      if (h.dim(0) != a) h = ad::slice(h, 0, 0, a);
    const ad::Tensor z = ad::slice(emb.z, 0, batch.offsets[t], batch.offsets[t] + a);
    state = model::temporal_encode(params, z, state);
    contexts.push_back(state.context());
  }
  const ad::Tensor context = contexts.size() == 1 ? contexts[0] : ad::concat(contexts, 0);
  const ad::Tensor global = model::global_condition(params, context, noise.k);

  std::vector<double> yk(rows * 3), h_true(rows * 3), eps_true(rows * 3);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto s = diffusion::forward_sample(batch.targets[r], noise.k[r], noise.eps[r]);
    for (int i = 0; i < 3; ++i) {
      yk[3 * r + i] = s.yk[i];
      h_true[3 * r + i] = s.h[i];
      eps_true[3 * r + i] = s.eps[i];
    }
  }
  const ad::Tensor yk_t({rows, 3}, std::move(yk));
  BatchOutputs out;
  out.h = model::denoise(params, yk_t, global, emb.v);
  out.eps_pred = diffusion::derive_epsilon(yk_t, out.h, noise.k);
  out.loss = diffusion::training_loss(out.h, out.eps_pred, ad::Tensor({rows, 3}, std::move(h_true)),
                                      ad::Tensor({rows, 3}, std::move(eps_true)), noise.k, config.smooth_l1_beta);
  return out;
}

[[noreturn]] void report_non_finite(const Dataset& data, const Batch& batch, const NoiseDraw& noise,
                                    const BatchOutputs& out, std::size_t epoch) {
  std::size_t row = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    bool finite = true;
    for (int i = 0; i < 3; ++i) finite = finite && std::isfinite(out.h[3 * r + i]) && std::isfinite(out.eps_pred[3 * r + i]);
    if (!finite) {
      row = r;
      break;
    }
  }
  const auto& seq = data.sequences[batch.row_sequence[row]];
  throw InvariantError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ": k " +
                       std::to_string(noise.k[row]) + ", step " + std::to_string(batch.row_step[row]) +
                       ", streamline " + std::to_string(seq.source) + (seq.reversed ? " (reversed)" : ""));
}

std::vector<ad::Tensor> tensors_of(const model::Parameters& params) {
  std::vector<ad::Tensor> out;
  for (auto& [name, t] : params.named_parameters()) out.push_back(t);
  return out;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.next_u64() % i]);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw InputError("train.lr must be positive");
  if (!(weight_decay >= 0.0)) throw InputError("train.weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw InputError("train.beta1/beta2 must lie in [0, 1)");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw InputError("train.plateau_factor must lie in (0, 1)");
  if (!(min_lr >= 0.0)) throw InputError("train.min_lr must be non-negative");
  if (batch_streamlines == 0) throw InputError("train.batch_streamlines must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw InputError("train.val_fraction must lie in [0, 1)");
  if (!(k_min > 0.0 && k_min < k_max && k_max < 1.0)) throw InputError("train needs 0 < k_min < k_max < 1");
  if (!(smooth_l1_beta > 0.0)) throw InputError("train.smooth_l1_beta must be positive");
}

std::span<const double> Dataset::feature(const Sequence& seq, std::size_t step) const {
  const auto& src = sources[seq.source];
  const std::size_t point = seq.reversed ? src.points - 1 - step : step;
  const std::size_t width = kCells * coeffs;
  return {src.values.data() + point * width, width};
}

Vec3 choose_sign_reference(std::span<const Vec3> directions) {
  if (directions.empty()) return Vec3::UnitZ();
  auto score = [&](const Vec3& u) {
    double worst = 1.0;
    for (const Vec3& d : directions) worst = std::min(worst, std::abs(d.dot(u)));
    return worst;
  };
  // Fibonacci points on the upper hemisphere, then shrinking local search.
  constexpr int kCandidates = 2000;
  Vec3 best = Vec3::UnitZ();
  double best_score = score(best);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < kCandidates; ++i) {
    const double z = 1.0 - (i + 0.5) / kCandidates;
    const double r = std::sqrt(1.0 - z * z);
    const Vec3 u(r * std::cos(golden * i), r * std::sin(golden * i), z);
    const double s = score(u);
    if (s > best_score) {
      best_score = s;
      best = u;
    }
  }
  Rng rng(0);
  double radius = 0.05;
  for (int round = 0; round < 6; ++round, radius *= 0.4)
    for (int i = 0; i < 100; ++i) {
      const Vec3 u = (best + radius * Vec3(rng.normal(), rng.normal(), rng.normal())).normalized();
      const double s = score(u);
      if (s > best_score) {
        best_score = s;
        best = u;
      }
    }
  return best;
}

Dataset build_dataset(const Tractogram& tractogram, const ShVolume& sh, const TrainConfig& config,
                      std::optional<Vec3> sign_reference) {
  config.validate();
  Dataset data;
  data.coeffs = sh.coeffs_per_voxel;

  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < tractogram.size(); ++i)
    if (tractogram.streamlines[i].size() >= 2) chosen.push_back(i);
  if (config.max_streamlines > 0 && chosen.size() > config.max_streamlines) {
    // Round-robin over labels keeps every bundle represented.
    std::vector<std::vector<std::size_t>> by_label;
    std::vector<int> label_ids;
    for (std::size_t i : chosen) {
      const int label = tractogram.labels.empty() ? 0 : tractogram.labels[i];
      auto it = std::find(label_ids.begin(), label_ids.end(), label);
      if (it == label_ids.end()) {
        label_ids.push_back(label);
        by_label.emplace_back();
        it = label_ids.end() - 1;
      }
      by_label[static_cast<std::size_t>(it - label_ids.begin())].push_back(i);
    }
    std::vector<std::size_t> picked;
    for (std::size_t round = 0; picked.size() < config.max_streamlines; ++round)
      for (auto& group : by_label)
        if (round < group.size() && picked.size() < config.max_streamlines) picked.push_back(group[round]);
    std::sort(picked.begin(), picked.end());
    chosen = std::move(picked);
  }
  if (chosen.empty()) throw InputError("training set is empty (no streamline with at least 2 points)");

  std::vector<Vec3> all_targets;
  for (std::size_t i : chosen) {
    const auto& sl = tractogram.streamlines[i];
    SourceFeatures src;
    src.points = sl.size();
    src.label = tractogram.labels.empty() ? -1 : tractogram.labels[i];
    src.values.reserve(sl.size() * kCells * data.coeffs);
    for (const Vec3& p : sl) {
      const auto f = sh::sample_neighborhood(sh, p);
      src.values.insert(src.values.end(), f.values.begin(), f.values.end());
    }
    Sequence fwd{data.sources.size(), false, {}};
    for (std::size_t t = 0; t + 1 < sl.size(); ++t) {
      const Vec3 d = sl[t + 1] - sl[t];
      if (!(d.norm() > 0.0)) throw InputError("streamline " + std::to_string(i) + " repeats point " + std::to_string(t));
      fwd.targets.push_back(d.normalized());
    }
    all_targets.insert(all_targets.end(), fwd.targets.begin(), fwd.targets.end());
    data.sources.push_back(std::move(src));
    if (config.augment_reverse) {
      Sequence rev{fwd.source, true, {}};
      for (auto it = fwd.targets.rbegin(); it != fwd.targets.rend(); ++it) rev.targets.push_back(-*it);
      data.sequences.push_back(std::move(fwd));
      data.sequences.push_back(std::move(rev));
    } else {
      data.sequences.push_back(std::move(fwd));
    }
  }

  if (config.canonical_sign) {
    if (sign_reference) {
      // A stored unit reference is reused verbatim so resumed runs match uninterrupted ones.
      const double n = sign_reference->norm();
      if (!(n > 0.0)) throw InputError("sign reference must be non-zero");
      data.sign_reference = std::abs(n - 1.0) < 1e-12 ? *sign_reference : Vec3(*sign_reference / n);
    } else {
      data.sign_reference = choose_sign_reference(all_targets);
    }
    for (auto& seq : data.sequences)
      for (Vec3& y : seq.targets)
        if (y.dot(data.sign_reference) < 0.0) y = -y;
  }
  return data;
}

Split split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> sources(data.sources.size());
  std::iota(sources.begin(), sources.end(), 0);
  Rng rng = Rng(seed).split(kSplitStream);
  shuffle(sources, rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(sources.size())));
  if (val_fraction > 0.0 && n_val == 0 && sources.size() >= 2) n_val = 1;
  n_val = std::min(n_val, sources.size() - 1);
  std::vector<std::uint8_t> is_val(sources.size(), 0);
  for (std::size_t i = 0; i < n_val; ++i) is_val[sources[i]] = 1;
  Split split;
  for (std::size_t s = 0; s < data.sequences.size(); ++s)
    (is_val[data.sequences[s].source] ? split.val : split.train).push_back(s);
  return split;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> sequence_indices) {
  Batch b;
  b.sequences.assign(sequence_indices.begin(), sequence_indices.end());
  std::stable_sort(b.sequences.begin(), b.sequences.end(), [&](std::size_t x, std::size_t y) {
    return data.sequences[x].steps() > data.sequences[y].steps();
  });
  const std::size_t longest = b.sequences.empty() ? 0 : data.sequences[b.sequences[0]].steps();
  const std::size_t m = data.coeffs;
  std::vector<double> feats;
  for (std::size_t t = 0; t < longest; ++t) {
    std::size_t a = 0;
    while (a < b.sequences.size() && data.sequences[b.sequences[a]].steps() > t) ++a;
    b.active.push_back(a);
    b.offsets.push_back(b.rows());
    for (std::size_t i = 0; i < a; ++i) {
      const auto& seq = data.sequences[b.sequences[i]];
      const auto f = data.feature(seq, t);
      const std::size_t base = feats.size();
      feats.resize(base + f.size());
      for (std::size_t cell = 0; cell < kCells; ++cell)
        for (std::size_t j = 0; j < m; ++j) feats[base + j * kCells + cell] = f[cell * m + j];
      b.targets.push_back(seq.targets[t]);
      b.row_sequence.push_back(b.sequences[i]);
      b.row_step.push_back(t);
    }
  }
  b.features = ad::Tensor({b.rows(), m, 3, 3, 3}, std::move(feats));
  return b;
}

NoiseDraw draw_noise(std::size_t rows, const TrainConfig& config, Rng& rng) {
  NoiseDraw d;
  d.k.resize(rows);
  d.eps.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    d.k[r] = rng.uniform(config.k_min, config.k_max);
    const double a = rng.normal();
    const double b = rng.normal();
    d.eps[r] = Vec3(a, b, rng.normal());
  }
  return d;
}

ad::Tensor batch_loss(const model::Parameters& params, const Batch& batch, const NoiseDraw& noise,
                      const TrainConfig& config) {
  return forward_batch(params, batch, noise, config).loss;
}

TrainState init_state(const model::ModelConfig& model_config, const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  TrainState s;
  s.seed = seed;
  s.params = model::init_parameters(model_config, Rng(seed).split(kModelInitStream).next_u64());
  s.best = model::clone(s.params);
  for (const auto& [name, t] : s.params.named_parameters()) {
    s.adam_m.emplace_back(t.size(), 0.0);
    s.adam_v.emplace_back(t.size(), 0.0);
  }
  s.lr = config.lr;
  return s;
}

void adamw_step(TrainState& state, const std::vector<std::vector<double>>& grads, const TrainConfig& config) {
  ++state.adam_step;
  const double t = static_cast<double>(state.adam_step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  auto params = state.params.named_parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p].second.mutable_data();
    auto& m = state.adam_m[p];
    auto& v = state.adam_v[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= state.lr * config.weight_decay * w[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      w[i] -= state.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.adam_eps);
    }
  }
}

double evaluate(const model::Parameters& params, const Dataset& data, std::span<const std::size_t> sequences,
                const TrainConfig& config, std::uint64_t seed) {
  ad::NoGradGuard no_grad;
  const Rng master = Rng(seed).split(kValidationStream);
  double total = 0.0;
  std::size_t rows = 0;
  for (std::size_t start = 0, b = 0; start < sequences.size(); start += config.batch_streamlines, ++b) {
    const auto chunk = sequences.subspan(start, std::min(config.batch_streamlines, sequences.size() - start));
    const Batch batch = make_batch(data, chunk);
    Rng rng = master.split(b);
    const auto noise = draw_noise(batch.rows(), config, rng);
    total += batch_loss(params, batch, noise, config).item() * static_cast<double>(batch.rows());
    rows += batch.rows();
  }
  return rows == 0 ? 0.0 : total / static_cast<double>(rows);
}

void train(TrainState& state, const Dataset& data, const TrainConfig& config, std::size_t max_epochs,
           const std::function<void(const TrainState&)>& on_epoch) {
  config.validate();
  if (data.sequences.empty()) throw InputError("training set is empty");
  state.sign_reference = data.sign_reference;
  const Split split = split_dataset(data, config.val_fraction, state.seed);
  const auto tensors = tensors_of(state.params);

  while (!state.stopped && state.epoch < max_epochs) {
    const std::size_t epoch = state.epoch;
    Rng epoch_rng = Rng(state.seed).split(kEpochStreamBase + epoch);
    std::vector<std::size_t> order = split.train;
    shuffle(order, epoch_rng);

    double total = 0.0;
    std::size_t rows = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch_streamlines, ++b) {
      const std::span<const std::size_t> chunk(order.data() + start,
                                               std::min(config.batch_streamlines, order.size() - start));
      const Batch batch = make_batch(data, chunk);
      Rng rng = epoch_rng.split(b);
      const auto noise = draw_noise(batch.rows(), config, rng);
      const auto out = forward_batch(state.params, batch, noise, config);
      const double loss = out.loss.item();
      if (!std::isfinite(loss)) report_non_finite(data, batch, noise, out, epoch);
      const auto grads = ad::grad(out.loss, tensors);
      adamw_step(state, grads, config);
      total += loss * static_cast<double>(batch.rows());
      rows += batch.rows();
    }
    const double train_loss = total / static_cast<double>(rows);
    const double val_loss =
        split.val.empty() ? train_loss : evaluate(state.params, data, split.val, config, state.seed);
    if (!std::isfinite(val_loss)) throw InvariantError("non-finite validation loss at epoch " + std::to_string(epoch + 1));

    state.log.push_back({epoch + 1, train_loss, val_loss, state.lr});
    state.epoch = epoch + 1;

    if (val_loss < state.plateau_best * (1.0 - 1e-4)) {
      state.plateau_best = val_loss;
      state.plateau_bad = 0;
    } else if (++state.plateau_bad > config.plateau_patience) {
      state.lr = std::max(state.lr * config.plateau_factor, config.min_lr);
      state.plateau_bad = 0;
    }
    if (val_loss < state.best_val) {
      state.best_val = val_loss;
      state.best_epoch = state.epoch;
      model::copy_values(state.params, state.best);
    } else if (state.epoch - state.best_epoch >= config.early_stop_patience) {
      state.stopped = true;
      model::copy_values(state.best, state.params);
    }
    if (on_epoch) on_epoch(state);
  }
}

}  // namespace ddtrack::train

// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/model.hpp"

#include <cmath>
#include <string>

#include "ddtrack/error.hpp"
#include "ddtrack/ops.hpp"
#include "ddtrack/rng.hpp"

namespace ddtrack::model {
namespace {

using ad::Shape;
using ad::Tensor;

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor uniform(Shape shape, double bound) {
    std::vector<double> data(ad::numel(shape));
    for (double& x : data) x = rng_.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(data), true);
  }
  Linear linear(std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {uniform({in, out}, bound), uniform({out}, bound)};
  }
  Conv conv(Shape weight_shape, std::size_t fan_in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return {uniform(std::move(weight_shape), bound), uniform({out}, bound)};
  }
  static Conv norm(std::size_t channels) {
    return {Tensor(Shape{channels}, std::vector<double>(channels, 1.0), true), Tensor::zeros({channels}, true)};
  }
  static Linear film(std::size_t cond, std::size_t channels) {
    std::vector<double> bias(2 * channels, 0.0);
    std::fill(bias.begin(), bias.begin() + static_cast<std::ptrdiff_t>(channels), 1.0);
    return {Tensor::zeros({cond, 2 * channels}, true), Tensor(Shape{2 * channels}, std::move(bias), true)};
  }

 private:
  Rng rng_;
};

SpatialBranch make_branch(Initializer& init, const ModelConfig& c) {
  SpatialBranch b;
  b.conv1 = init.conv({c.spatial_channels1, c.sh_coeffs, 3, 3, 3}, c.sh_coeffs * 27, c.spatial_channels1);
  b.conv2 = init.conv({c.spatial_channels2, c.spatial_channels1, 3, 3, 3}, c.spatial_channels1 * 27,
                      c.spatial_channels2);
  b.proj = init.linear(c.spatial_channels2, c.embed_dim);
  return b;
}

ResBlock make_block(Initializer& init, std::size_t channels, std::size_t cond) {
  ResBlock b;
  b.conv1 = init.conv({channels, channels, 3}, channels * 3, channels);
  b.conv2 = init.conv({channels, channels, 3}, channels * 3, channels);
  b.norm1 = Initializer::norm(channels);
  b.norm2 = Initializer::norm(channels);
  b.film = Initializer::film(cond, channels);
  return b;
}

Tensor res_block(const ResBlock& b, const Tensor& x, const Tensor& cond, std::size_t groups) {
  const std::size_t channels = x.dim(1);
  Tensor y = ad::conv1d(x, b.conv1.weight, b.conv1.bias, 1, 1);
  y = ad::relu(ad::group_norm(y, groups, b.norm1.weight, b.norm1.bias));
  const Tensor mod = ad::linear(cond, b.film.weight, b.film.bias);
  y = ad::film(y, ad::slice(mod, 1, 0, channels), ad::slice(mod, 1, channels, 2 * channels));
  y = ad::conv1d(y, b.conv2.weight, b.conv2.bias, 1, 1);
  y = ad::relu(ad::group_norm(y, groups, b.norm2.weight, b.norm2.bias));
  return ad::add(x, y);
}

void add_named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

void add_named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const Conv& c) {
  out.emplace_back(prefix + ".weight", c.weight);
  out.emplace_back(prefix + ".bias", c.bias);
}

void add_named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const SpatialBranch& b) {
  add_named(out, prefix + ".conv1", b.conv1);
  add_named(out, prefix + ".conv2", b.conv2);
  add_named(out, prefix + ".proj", b.proj);
}

void add_named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const ResBlock& b) {
  add_named(out, prefix + ".conv1", b.conv1);
  add_named(out, prefix + ".norm1", b.norm1);
  add_named(out, prefix + ".film", b.film);
  add_named(out, prefix + ".conv2", b.conv2);
  add_named(out, prefix + ".norm2", b.norm2);
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw InputError(std::string("model.") + name + " must be positive");
  };
  positive(sh_coeffs, "sh_coeffs");
  positive(spatial_channels1, "spatial_channels1");
  positive(spatial_channels2, "spatial_channels2");
  positive(embed_dim, "embed_dim");
  positive(context_dim, "context_dim");
  positive(gru_layers, "gru_layers");
  positive(global_dim, "global_dim");
  positive(denoiser_channels, "denoiser_channels");
  positive(norm_groups, "norm_groups");
  if (step_embed_dim < 4 || step_embed_dim % 2 != 0) throw InputError("model.step_embed_dim must be even and >= 4");
  if (denoiser_channels % norm_groups != 0)
    throw InputError("model.denoiser_channels must be divisible by model.norm_groups");
}

std::vector<std::pair<std::string, Tensor>> Parameters::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  add_named(out, "spatial_a", branch_a);
  add_named(out, "spatial_b", branch_b);
  for (std::size_t l = 0; l < gru.size(); ++l) {
    const std::string p = "gru." + std::to_string(l);
    out.emplace_back(p + ".w_ih", gru[l].w_ih);
    out.emplace_back(p + ".w_hh", gru[l].w_hh);
    out.emplace_back(p + ".b_ih", gru[l].b_ih);
    out.emplace_back(p + ".b_hh", gru[l].b_hh);
  }
  add_named(out, "step_proj", step_proj);
  add_named(out, "global_proj", global_proj);
  add_named(out, "denoiser.in_conv", in_conv);
  for (std::size_t i = 0; i < down_blocks.size(); ++i)
    add_named(out, "denoiser.down_blocks." + std::to_string(i), down_blocks[i]);
  add_named(out, "denoiser.down", down);
  for (std::size_t i = 0; i < up_blocks.size(); ++i)
    add_named(out, "denoiser.up_blocks." + std::to_string(i), up_blocks[i]);
  add_named(out, "denoiser.up", up);
  add_named(out, "denoiser.head", head);
  return out;
}

std::size_t Parameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

Parameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  Parameters p;
  p.config = config;
  p.branch_a = make_branch(init, config);
  p.branch_b = make_branch(init, config);
  const std::size_t h = config.context_dim;
  const double gru_bound = 1.0 / std::sqrt(static_cast<double>(h));
  for (std::size_t l = 0; l < config.gru_layers; ++l) {
    const std::size_t in = l == 0 ? config.embed_dim : h;
    p.gru.push_back({init.uniform({in, 3 * h}, gru_bound), init.uniform({h, 3 * h}, gru_bound),
                     init.uniform({3 * h}, gru_bound), init.uniform({3 * h}, gru_bound)});
  }
  p.step_proj = init.linear(config.step_embed_dim, config.step_embed_dim);
  p.global_proj = init.linear(h + config.step_embed_dim, config.global_dim);

  const std::size_t c = config.denoiser_channels, c2 = 2 * c;
  const std::size_t cond = config.global_dim + config.embed_dim;
  p.in_conv = init.conv({c, 1, 3}, 3, c);
  p.down_blocks.push_back(make_block(init, c, cond));
  p.down = init.conv({c2, c, 3}, c * 3, c2);
  p.down_blocks.push_back(make_block(init, c2, cond));
  p.down_blocks.push_back(make_block(init, c2, cond));
  p.up_blocks.push_back(make_block(init, c2, cond));
  p.up = init.conv({c2, c, 3}, c * 3, c);
  p.up_blocks.push_back(make_block(init, c, cond));
  p.up_blocks.push_back(make_block(init, c, cond));
  p.head = init.conv({1, c, 3}, c * 3, 1);
  return p;
}

void copy_values(const Parameters& src, Parameters& dst) {
  if (!(src.config == dst.config)) throw InputError("copy_values: model configurations differ");
  const auto from = src.named_parameters();
  auto to = dst.named_parameters();
  for (std::size_t i = 0; i < from.size(); ++i)
    std::copy(from[i].second.data().begin(), from[i].second.data().end(), to[i].second.mutable_data().begin());
}

Parameters clone(const Parameters& params) {
  Parameters out = init_parameters(params.config, 0);
  copy_values(params, out);
  return out;
}

Tensor features_to_tensor(std::span<const sh::NeighborhoodFeature> features, std::size_t coeffs) {
  constexpr std::size_t cells = sh::NeighborhoodFeature::kCells;
  std::vector<double> data(features.size() * coeffs * cells);
  for (std::size_t n = 0; n < features.size(); ++n) {
    const auto& f = features[n];
    if (f.coeffs_per_cell != coeffs || f.values.size() != cells * coeffs)
      throw ShapeError("feature " + std::to_string(n) + " has " + std::to_string(f.coeffs_per_cell) +
                       " coefficients per cell, model expects " + std::to_string(coeffs));
    double* dst = data.data() + n * coeffs * cells;
    for (std::size_t cell = 0; cell < cells; ++cell)
      for (std::size_t j = 0; j < coeffs; ++j) dst[j * cells + cell] = f.values[cell * coeffs + j];
  }
  return Tensor({features.size(), coeffs, 3, 3, 3}, std::move(data));
}

Tensor spatial_branch(const SpatialBranch& b, const Tensor& features) {
  Tensor x = ad::relu(ad::conv3d(features, b.conv1.weight, b.conv1.bias, 1));
  x = ad::relu(ad::conv3d(x, b.conv2.weight, b.conv2.bias, 0));
  x = ad::reshape(x, {x.dim(0), x.dim(1)});
  return ad::linear(x, b.proj.weight, b.proj.bias);
}

SpatialEmbeddings spatial_encode(const Parameters& params, const Tensor& features) {
  const auto& c = params.config;
  if (features.rank() != 5 || features.dim(1) != c.sh_coeffs || features.dim(2) != 3 || features.dim(3) != 3 ||
      features.dim(4) != 3)
    throw ShapeError("spatial_encode: features " + ad::to_string(features.shape()) + ", expected [N," +
                     std::to_string(c.sh_coeffs) + ",3,3,3]");
  return {spatial_branch(params.branch_a, features), spatial_branch(params.branch_b, features)};
}

Tensor gru_cell(const GruLayer& layer, const Tensor& x, const Tensor& h) {
  const std::size_t width = h.dim(1);
  const Tensor gi = ad::linear(x, layer.w_ih, layer.b_ih);
  const Tensor gh = ad::linear(h, layer.w_hh, layer.b_hh);
  const Tensor r = ad::sigmoid(ad::add(ad::slice(gi, 1, 0, width), ad::slice(gh, 1, 0, width)));
  const Tensor u = ad::sigmoid(ad::add(ad::slice(gi, 1, width, 2 * width), ad::slice(gh, 1, width, 2 * width)));
  const Tensor n = ad::tanh(
      ad::add(ad::slice(gi, 1, 2 * width, 3 * width), ad::mul(r, ad::slice(gh, 1, 2 * width, 3 * width))));
  // (1 - u) n + u h
  return ad::add(n, ad::mul(u, ad::sub(h, n)));
}

TemporalState TemporalState::zeros(const ModelConfig& config, std::size_t batch) {
  TemporalState s;
  for (std::size_t l = 0; l < config.gru_layers; ++l) s.hidden.push_back(Tensor::zeros({batch, config.context_dim}));
  return s;
}

TemporalState temporal_encode(const Parameters& params, const Tensor& z, const TemporalState& state) {
  if (state.hidden.size() != params.gru.size())
    throw ShapeError("temporal_encode: state has " + std::to_string(state.hidden.size()) + " layers, model has " +
                     std::to_string(params.gru.size()));
  TemporalState next;
  Tensor x = z;
  for (std::size_t l = 0; l < params.gru.size(); ++l) {
    x = gru_cell(params.gru[l], x, state.hidden[l]);
    next.hidden.push_back(x);
  }
  return next;
}

Tensor sinusoidal_embedding(std::span<const double> k, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> freqs(half, 1.0);
  for (std::size_t i = 1; i < half; ++i)
    freqs[i] = std::pow(1000.0, static_cast<double>(i) / static_cast<double>(half - 1));
  std::vector<double> data(k.size() * dim);
  for (std::size_t n = 0; n < k.size(); ++n)
    for (std::size_t i = 0; i < half; ++i) {
      data[n * dim + i] = std::sin(k[n] * freqs[i]);
      data[n * dim + half + i] = std::cos(k[n] * freqs[i]);
    }
  return Tensor({k.size(), dim}, std::move(data));
}

Tensor embed_step(const Parameters& params, std::span<const double> k) {
  return ad::linear(sinusoidal_embedding(k, params.config.step_embed_dim), params.step_proj.weight,
                    params.step_proj.bias);
}

Tensor global_condition(const Parameters& params, const Tensor& context, std::span<const double> k) {
  if (context.rank() != 2 || context.dim(0) != k.size())
    throw ShapeError("global_condition: context " + ad::to_string(context.shape()) + " for " +
                     std::to_string(k.size()) + " steps");
  return ad::linear(ad::concat({context, embed_step(params, k)}, 1), params.global_proj.weight,
                    params.global_proj.bias);
}

Tensor denoise(const Parameters& params, const Tensor& yk, const Tensor& global, const Tensor& local) {
  const auto& c = params.config;
  if (yk.rank() != 2 || yk.dim(1) != 3) throw ShapeError("denoise: yk " + ad::to_string(yk.shape()) + ", expected [N,3]");
  const std::size_t n = yk.dim(0);
  if (global.shape() != Shape{n, c.global_dim} || local.shape() != Shape{n, c.embed_dim})
    throw ShapeError("denoise: conditions " + ad::to_string(global.shape()) + " and " + ad::to_string(local.shape()) +
                     " do not match yk " + ad::to_string(yk.shape()));
  const Tensor cond = ad::concat({global, local}, 1);
  const std::size_t g = c.norm_groups;

  Tensor x = ad::conv1d(ad::reshape(yk, {n, 1, 3}), params.in_conv.weight, params.in_conv.bias, 1, 1);
  x = res_block(params.down_blocks[0], x, cond, g);
  const Tensor skip = x;
  x = ad::conv1d(x, params.down.weight, params.down.bias, 2, 1);
  for (std::size_t i = 1; i < params.down_blocks.size(); ++i) x = res_block(params.down_blocks[i], x, cond, g);
  x = res_block(params.up_blocks[0], x, cond, g);
  x = ad::add(ad::conv_transpose1d(x, params.up.weight, params.up.bias, 2, 1), skip);
  for (std::size_t i = 1; i < params.up_blocks.size(); ++i) x = res_block(params.up_blocks[i], x, cond, g);
  x = ad::conv1d(x, params.head.weight, params.head.bias, 1, 1);
  return ad::reshape(x, {n, 3});
}

}  // namespace ddtrack::model

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ddtrack/sh.hpp"
#include "ddtrack/tensor.hpp"

namespace ddtrack::model {

/// Layer widths. The defaults are the desk-scale network; tests shrink them.
struct ModelConfig {
  std::size_t sh_coeffs = 28;
  std::size_t spatial_channels1 = 32;
  std::size_t spatial_channels2 = 64;
  std::size_t embed_dim = 192;  ///< z and v
  std::size_t context_dim = 512;  ///< GRU width, c
  std::size_t gru_layers = 2;
  std::size_t step_embed_dim = 64;  ///< even, >= 4
  std::size_t global_dim = 256;  ///< G
  std::size_t denoiser_channels = 64;  ///< doubled on the coarse level
  std::size_t norm_groups = 8;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct Linear {
  ad::Tensor weight;  ///< [in, out]
  ad::Tensor bias;  ///< [out]
};

struct Conv {
  ad::Tensor weight;
  ad::Tensor bias;
};

struct SpatialBranch {
  Conv conv1;  ///< m -> c1, kernel 3, padding 1
  Conv conv2;  ///< c1 -> c2, kernel 3, valid (3^3 -> 1)
  Linear proj;  ///< c2 -> embed_dim
};

/// PyTorch gate layout: columns of the [*, 3H] matrices are (reset, update, new).
struct GruLayer {
  ad::Tensor w_ih;
  ad::Tensor w_hh;
  ad::Tensor b_ih;
  ad::Tensor b_hh;
};

/// conv -> GroupNorm -> ReLU -> FiLM -> conv -> GroupNorm -> ReLU, plus identity.
struct ResBlock {
  Conv conv1, conv2;
  Conv norm1, norm2;  ///< GroupNorm affine (weight, bias)
  Linear film;  ///< concat(G, L) -> (gamma, beta)
};

struct Parameters {
  ModelConfig config;
  SpatialBranch branch_a;  ///< -> z, feeds the temporal encoder
  SpatialBranch branch_b;  ///< -> v, the local condition
  std::vector<GruLayer> gru;
  Linear step_proj;  ///< sinusoidal embedding -> step_embed_dim
  Linear global_proj;  ///< concat(c, step embedding) -> G
  Conv in_conv;
  std::vector<ResBlock> down_blocks;  ///< first at width C, the rest at 2C
  Conv down;  ///< C -> 2C, stride 2 (length 3 -> 2)
  std::vector<ResBlock> up_blocks;  ///< first at 2C, the rest at C
  Conv up;  ///< transposed, 2C -> C, stride 2 (length 2 -> 3)
  Conv head;  ///< C -> 1

  /// Every learnable tensor with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;
  std::size_t parameter_count() const;
};

/// Uniform(+-1/sqrt(fan_in)) weights and biases, unit/zero norm affines,
/// FiLM heads at identity (zero weight, gamma bias 1, beta bias 0).
Parameters init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Deep copy with fresh leaf tensors (no shared storage).
Parameters clone(const Parameters& params);
/// Overwrites dst's values with src's; configurations must match.
void copy_values(const Parameters& src, Parameters& dst);

/// [N, m, 3, 3, 3] network input; the (dz, dy, dx) cell order of the feature
/// maps onto the (D, H, W) axes.
ad::Tensor features_to_tensor(std::span<const sh::NeighborhoodFeature> features, std::size_t coeffs);

struct SpatialEmbeddings {
  ad::Tensor z;  ///< [N, embed_dim]
  ad::Tensor v;  ///< [N, embed_dim]
};

SpatialEmbeddings spatial_encode(const Parameters& params, const ad::Tensor& features);
ad::Tensor spatial_branch(const SpatialBranch& branch, const ad::Tensor& features);

/// One GRU cell update: x [N, in], h [N, H] -> [N, H].
ad::Tensor gru_cell(const GruLayer& layer, const ad::Tensor& x, const ad::Tensor& h);

/// Hidden state of each stacked layer, [N, context_dim] each.
struct TemporalState {
  std::vector<ad::Tensor> hidden;

  static TemporalState zeros(const ModelConfig& config, std::size_t batch);
  /// c: the top layer's hidden state.
  const ad::Tensor& context() const { return hidden.back(); }
};

TemporalState temporal_encode(const Parameters& params, const ad::Tensor& z, const TemporalState& state);

/// Sinusoidal features [N, dim]: sin(k w_i) then cos(k w_i), with w_i
/// geometric from 1 to 1000.
ad::Tensor sinusoidal_embedding(std::span<const double> k, std::size_t dim);
/// Learned projection of the sinusoidal features.
ad::Tensor embed_step(const Parameters& params, std::span<const double> k);

/// G = linear(concat(c, embed_step(k))).
ad::Tensor global_condition(const Parameters& params, const ad::Tensor& context, std::span<const double> k);

/// h prediction [N, 3] from noisy orientations yk [N, 3], G [N, global_dim] and L [N, embed_dim].
ad::Tensor denoise(const Parameters& params, const ad::Tensor& yk, const ad::Tensor& global, const ad::Tensor& local);

}  // namespace ddtrack::model

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ddtrack/error.hpp"
#include "ddtrack/rng.hpp"
#include "ddtrack/tensor.hpp"
#include "ddtrack/volume.hpp"

/// Decoupled diffusion over unit orientation vectors: the clean vector y0 is
/// attenuated to zero along h = -y0 while Gaussian noise of variance k is
/// injected, with k running from 0 (clean) to 1 (pure noise).
namespace ddtrack::diffusion {

struct ForwardSample {
  Vec3 y0;
  double k;
  Vec3 eps;
  Vec3 yk;
  Vec3 h;
};

/// yk = (1-k) y0 + sqrt(k) eps for k in (0, 1].
ForwardSample forward_sample(const Vec3& y0, double k, const Vec3& eps);

/// Noise implied by a predicted attenuation: (yk - (k-1) h) / sqrt(k).
Vec3 derive_epsilon(const Vec3& yk, const Vec3& h_pred, double k);

struct ReverseStepParams {
  double k;
  double dk;
  double sigma2;  ///< dk (k - dk) / k

  /// Requires 0 < dk <= k <= 1.
  static ReverseStepParams make(double k, double dk);
};

/// Mean ((k-dk)/k) yk - (dk/k) h plus sqrt(sigma2) * noise when noise is given.
Vec3 reverse_step(const Vec3& yk, const Vec3& h_pred, const ReverseStepParams& params,
                  const std::optional<Vec3>& noise = std::nullopt);

struct SamplerConfig {
  int num_steps = 4;
  /// Start from y = 0 and add no reverse noise.
  bool deterministic = true;

  void validate() const;
  /// k values visited, from 1 down to 1/num_steps; the step after the last one lands on 0.
  std::vector<double> grid() const;
};

class DegenerateOrientation : public Error {
 public:
  using Error::Error;
};

/// h prediction for one noisy vector at step k; conditions are bound by the caller.
using Denoiser = std::function<Vec3(const Vec3& yk, double k)>;
/// Batched form: h_out[i] for yk[i], all at the same k.
using BatchDenoiser = std::function<void(std::span<const Vec3> yk, double k, std::span<Vec3> h_out)>;

/// Runs the reverse chain and returns the unit final vector. Throws
/// DegenerateOrientation when the final vector has zero or non-finite norm.
Vec3 sample_orientation(const Denoiser& denoiser, const SamplerConfig& config, Rng& rng);

/// Lockstep reverse chains for a batch. Entry i draws its noise from rngs[i]
/// only, so results match sample_orientation run per element. Degenerate
/// results are empty.
std::vector<std::optional<Vec3>> sample_orientations(const BatchDenoiser& denoiser, std::size_t count,
                                                     const SamplerConfig& config, std::span<Rng> rngs);

struct LossWeights {
  double lambda1;  ///< (k^2 - k + 1) / k, on the attenuation term
  double lambda2;  ///< (k^2 - k + 1) / (1 - k)^2, on the noise term
};

/// Requires k in (0, 1).
LossWeights loss_weights(double k);

double smooth_l1(double residual, double beta = 1.0);

/// lambda1 SmoothL1(h) + lambda2 SmoothL1(eps), each summed over components.
double training_loss(const Vec3& h_pred, const Vec3& eps_pred, const Vec3& h_true, const Vec3& eps_true, double k,
                     double beta = 1.0);

/// Differentiable batch mean of the per-sample loss. Predictions and targets
/// are [N,3]; k holds the N diffusion steps.
ad::Tensor training_loss(const ad::Tensor& h_pred, const ad::Tensor& eps_pred, const ad::Tensor& h_true,
                         const ad::Tensor& eps_true, std::span<const double> k, double beta = 1.0);

/// Differentiable derive_epsilon for [N,3] rows.
ad::Tensor derive_epsilon(const ad::Tensor& yk, const ad::Tensor& h_pred, std::span<const double> k);

}  // namespace ddtrack::diffusion

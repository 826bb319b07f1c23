// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/diffusion.hpp"

#include <cmath>
#include <string>

#include "ddtrack/ops.hpp"

namespace ddtrack::diffusion {
namespace {

void require_step(double k, const char* where) {
  if (!(k > 0.0 && k <= 1.0)) throw InputError(std::string(where) + ": k must lie in (0, 1], got " + std::to_string(k));
}

Vec3 normal3(Rng& rng) {
  const double a = rng.normal();
  const double b = rng.normal();
  return {a, b, rng.normal()};
}

// Row i of the result is weights[i] repeated over 3 columns.
ad::Tensor row_weights(std::span<const double> weights) {
  std::vector<double> data(weights.size() * 3);
  for (std::size_t i = 0; i < weights.size(); ++i) data[3 * i] = data[3 * i + 1] = data[3 * i + 2] = weights[i];
  return ad::Tensor({weights.size(), 3}, std::move(data));
}

}  // namespace

ForwardSample forward_sample(const Vec3& y0, double k, const Vec3& eps) {
  require_step(k, "forward_sample");
  return {y0, k, eps, (1.0 - k) * y0 + std::sqrt(k) * eps, -y0};
}

Vec3 derive_epsilon(const Vec3& yk, const Vec3& h_pred, double k) {
  require_step(k, "derive_epsilon");
  return (yk - (k - 1.0) * h_pred) / std::sqrt(k);
}

ReverseStepParams ReverseStepParams::make(double k, double dk) {
  require_step(k, "reverse_step");
  if (!(dk > 0.0 && dk <= k))
    throw InputError("reverse_step: need 0 < dk <= k, got dk " + std::to_string(dk) + " at k " + std::to_string(k));
  return {k, dk, dk * (k - dk) / k};
}

Vec3 reverse_step(const Vec3& yk, const Vec3& h_pred, const ReverseStepParams& params,
                  const std::optional<Vec3>& noise) {
  Vec3 out = ((params.k - params.dk) / params.k) * yk - (params.dk / params.k) * h_pred;
  if (noise && params.sigma2 > 0.0) out += std::sqrt(params.sigma2) * *noise;
  return out;
}

void SamplerConfig::validate() const {
  if (num_steps < 1) throw InputError("sampler num_steps must be >= 1, got " + std::to_string(num_steps));
}

std::vector<double> SamplerConfig::grid() const {
  validate();
  std::vector<double> ks(static_cast<std::size_t>(num_steps));
  for (int i = 0; i < num_steps; ++i) ks[static_cast<std::size_t>(i)] = static_cast<double>(num_steps - i) / num_steps;
  return ks;
}

std::vector<std::optional<Vec3>> sample_orientations(const BatchDenoiser& denoiser, std::size_t count,
                                                     const SamplerConfig& config, std::span<Rng> rngs) {
  if (!config.deterministic && rngs.size() < count)
    throw InputError("sample_orientations: stochastic mode needs one rng per element");
  const auto ks = config.grid();
  std::vector<Vec3> y(count, Vec3::Zero()), h(count);
  if (!config.deterministic)
    for (std::size_t i = 0; i < count; ++i) y[i] = normal3(rngs[i]);
  for (std::size_t s = 0; s < ks.size(); ++s) {
    const double k = ks[s];
    const double next = s + 1 < ks.size() ? ks[s + 1] : 0.0;
    const auto params = ReverseStepParams::make(k, k - next);
    denoiser(y, k, h);
    for (std::size_t i = 0; i < count; ++i) {
      std::optional<Vec3> noise;
      if (!config.deterministic && params.sigma2 > 0.0) noise = normal3(rngs[i]);
      y[i] = reverse_step(y[i], h[i], params, noise);
    }
  }
  std::vector<std::optional<Vec3>> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double n = y[i].norm();
    if (n > 0.0 && std::isfinite(n)) out[i] = y[i] / n;
  }
  return out;
}

Vec3 sample_orientation(const Denoiser& denoiser, const SamplerConfig& config, Rng& rng) {
  const BatchDenoiser batch = [&](std::span<const Vec3> yk, double k, std::span<Vec3> h_out) {
    for (std::size_t i = 0; i < yk.size(); ++i) h_out[i] = denoiser(yk[i], k);
  };
  auto out = sample_orientations(batch, 1, config, std::span<Rng>(&rng, 1));
  if (!out[0]) throw DegenerateOrientation("sampled orientation has zero or non-finite norm");
  return *out[0];
}

LossWeights loss_weights(double k) {
  if (!(k > 0.0 && k < 1.0)) throw InputError("loss_weights: k must lie in (0, 1), got " + std::to_string(k));
  const double num = k * k - k + 1.0;
  return {num / k, num / ((1.0 - k) * (1.0 - k))};
}

double smooth_l1(double residual, double beta) {
  const double a = std::abs(residual);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

double training_loss(const Vec3& h_pred, const Vec3& eps_pred, const Vec3& h_true, const Vec3& eps_true, double k,
                     double beta) {
  const auto w = loss_weights(k);
  double lh = 0.0, le = 0.0;
  for (int i = 0; i < 3; ++i) {
    lh += smooth_l1(h_pred[i] - h_true[i], beta);
    le += smooth_l1(eps_pred[i] - eps_true[i], beta);
  }
  return w.lambda1 * lh + w.lambda2 * le;
}

ad::Tensor training_loss(const ad::Tensor& h_pred, const ad::Tensor& eps_pred, const ad::Tensor& h_true,
                         const ad::Tensor& eps_true, std::span<const double> k, double beta) {
  const std::size_t n = k.size();
  if (h_pred.shape() != ad::Shape{n, 3})
    throw ShapeError("training_loss: predictions " + ad::to_string(h_pred.shape()) + " do not match " +
                     std::to_string(n) + " steps");
  std::vector<double> w1(n), w2(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = loss_weights(k[i]);
    w1[i] = w.lambda1 / static_cast<double>(n);
    w2[i] = w.lambda2 / static_cast<double>(n);
  }
  const auto lh = ad::sum(ad::mul(row_weights(w1), ad::smooth_l1(h_pred, h_true, beta)));
  const auto le = ad::sum(ad::mul(row_weights(w2), ad::smooth_l1(eps_pred, eps_true, beta)));
  return ad::add(lh, le);
}

ad::Tensor derive_epsilon(const ad::Tensor& yk, const ad::Tensor& h_pred, std::span<const double> k) {
  const std::size_t n = k.size();
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    require_step(k[i], "derive_epsilon");
    a[i] = 1.0 / std::sqrt(k[i]);
    b[i] = -(k[i] - 1.0) / std::sqrt(k[i]);
  }
  return ad::add(ad::mul(row_weights(a), yk), ad::mul(row_weights(b), h_pred));
}

}  // namespace ddtrack::diffusion

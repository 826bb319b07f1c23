// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "ddtrack/diffusion.hpp"
#include "ddtrack/error.hpp"
#include "ddtrack/gradcheck.hpp"
#include "ddtrack/ops.hpp"
#include "support.hpp"

using namespace ddtrack;
using namespace ddtrack::diffusion;

TEST_CASE("forward sample closed form") {
  const auto s = forward_sample(Vec3::UnitX(), 0.5, Vec3::UnitY());
  CHECK(s.yk.x() == 0.5);
  CHECK(s.yk.y() == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(s.yk.z() == 0.0);
  CHECK(s.h == -Vec3::UnitX());

  const Vec3 e(0.3, -0.2, 0.9);
  CHECK(forward_sample(Vec3::UnitZ(), 1.0, e).yk == e);
  CHECK((forward_sample(Vec3::UnitZ(), 1e-14, Vec3::Zero()).yk - Vec3::UnitZ()).norm() < 1e-13);
  CHECK_THROWS_AS(forward_sample(Vec3::UnitZ(), 0.0, e), InputError);
  CHECK_THROWS_AS(forward_sample(Vec3::UnitZ(), 1.5, e), InputError);
}

TEST_CASE("derive_epsilon inverts the forward sample") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Vec3 y0 = testing::random_unit(rng);
    const Vec3 e(rng.normal(), rng.normal(), rng.normal());
    const double k = rng.uniform(0.05, 1.0);
    const auto s = forward_sample(y0, k, e);
    CHECK((derive_epsilon(s.yk, s.h, k) - e).norm() < 1e-12);
  }
  const Vec3 yk(0.1, 0.2, 0.3);
  CHECK(derive_epsilon(yk, Vec3(5, 5, 5), 1.0) == yk);
  CHECK(derive_epsilon(Vec3::Zero(), Vec3::Zero(), 0.3) == Vec3::Zero());
  CHECK_THROWS_AS(derive_epsilon(yk, yk, 0.0), InputError);
}

TEST_CASE("reverse step algebra") {
  const Vec3 e(0.2, -0.4, 0.6), y0 = Vec3(1, 2, 2) / 3.0;
  const auto half = ReverseStepParams::make(1.0, 0.5);
  CHECK(half.sigma2 == 0.25);
  const Vec3 mu = reverse_step(e, -y0, half);
  CHECK((mu - (0.5 * e + 0.5 * y0)).norm() < 1e-15);
  const Vec3 z(1.0, -2.0, 0.5);
  CHECK((reverse_step(e, -y0, half, z) - (mu + 0.5 * z)).norm() < 1e-15);

  const auto last = ReverseStepParams::make(0.25, 0.25);
  CHECK(last.sigma2 == 0.0);
  CHECK(reverse_step(Vec3(9, 9, 9), -y0, last, z) == y0);
  CHECK_THROWS_AS(ReverseStepParams::make(0.25, 0.5), InputError);
  CHECK_THROWS_AS(ReverseStepParams::make(0.25, 0.0), InputError);
}

TEST_CASE("sampler grid") {
  SamplerConfig c;
  c.num_steps = 4;
  CHECK(c.grid() == std::vector<double>{1.0, 0.75, 0.5, 0.25});
  c.num_steps = 0;
  CHECK_THROWS_AS(c.validate(), InputError);
}

TEST_CASE("oracle denoiser recovers the orientation exactly") {
  const Vec3 target = Vec3(0.3, -0.5, 0.8).normalized();
  const Denoiser oracle = [&](const Vec3&, double) -> Vec3 { return -target; };
  for (int steps : {1, 2, 4, 8, 16}) {
    for (bool deterministic : {true, false}) {
      SamplerConfig c{steps, deterministic};
      Rng rng(steps);
      const Vec3 y = sample_orientation(oracle, c, rng);
      CHECK(y == target.normalized());
    }
  }
  const Denoiser zero = [](const Vec3&, double) { return Vec3::Zero(); };
  Rng rng(3);
  CHECK_THROWS_AS(sample_orientation(zero, SamplerConfig{}, rng), DegenerateOrientation);
}

TEST_CASE("stochastic sampling is seeded and the batch form matches the scalar one") {
  const Denoiser blur = [](const Vec3& y, double k) -> Vec3 { return -(Vec3::UnitX() + 0.3 * k * y); };
  SamplerConfig c{4, false};
  Rng a(11), b(11);
  CHECK(sample_orientation(blur, c, a) == sample_orientation(blur, c, b));

  const BatchDenoiser batch = [&](std::span<const Vec3> yk, double k, std::span<Vec3> out) {
    for (std::size_t i = 0; i < yk.size(); ++i) out[i] = blur(yk[i], k);
  };
  std::vector<Rng> rngs;
  for (std::uint64_t i = 0; i < 5; ++i) rngs.push_back(Rng(21).split(i));
  std::vector<Rng> copies = rngs;
  const auto many = sample_orientations(batch, 5, c, rngs);
  for (std::size_t i = 0; i < 5; ++i) {
    REQUIRE(many[i].has_value());
    CHECK(*many[i] == sample_orientation(blur, c, copies[i]));
  }
}

TEST_CASE("forward noise statistics") {
  const Vec3 y0 = Vec3(1, 2, -2) / 3.0;
  for (double k : {0.25, 0.5, 0.75}) {
    Rng rng(static_cast<std::uint64_t>(k * 100));
    constexpr int n = 100000;
    Vec3 sum = Vec3::Zero(), sq = Vec3::Zero();
    for (int i = 0; i < n; ++i) {
      const Vec3 yk = forward_sample(y0, k, Vec3(rng.normal(), rng.normal(), rng.normal())).yk;
      sum += yk;
      sq += yk.cwiseProduct(yk);
    }
    const Vec3 mean = sum / n;
    const Vec3 var = sq / n - mean.cwiseProduct(mean);
    for (int a = 0; a < 3; ++a) {
      const double expect = (1.0 - k) * y0[a];
      // 2% of |(1-k) y0|; the sampling noise is sqrt(k/n), about 1.1% of it at k = 0.75.
      CHECK(std::abs(mean[a] - expect) <= 0.02 * (1.0 - k));
      CHECK(std::abs(mean[a] - expect) <= 5.0 * std::sqrt(k / n));
      CHECK(std::abs(var[a] - k) <= 0.02 * k);
    }
  }
}

TEST_CASE("loss weights and loss values") {
  const auto w = loss_weights(0.5);
  CHECK(w.lambda1 == 1.5);
  CHECK(w.lambda2 == 3.0);
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const double k = rng.uniform(0.01, 0.99);
    const auto v = loss_weights(k);
    CHECK(v.lambda1 * k == doctest::Approx(v.lambda2 * (1 - k) * (1 - k)).epsilon(1e-13));
  }
  CHECK_THROWS_AS(loss_weights(0.0), InputError);
  CHECK_THROWS_AS(loss_weights(1.0), InputError);

  CHECK(smooth_l1(0.0) == 0.0);
  CHECK(smooth_l1(2.0) == 1.5);
  CHECK(smooth_l1(-0.5) == 0.125);

  const Vec3 h(0.1, 0.2, 0.3), e(1.0, -1.0, 0.5);
  CHECK(training_loss(h, e, h, e, 0.4) == 0.0);
  CHECK(training_loss(h + Vec3(0.5, 0, 0), e, h, e, 0.5) == doctest::Approx(0.1875).epsilon(1e-15));
  const Vec3 h2(0.7, -0.2, 2.0), e2(0.1, 0.1, -3.0);
  CHECK(training_loss(h, e, h2, e2, 0.3) == training_loss(h2, e2, h, e, 0.3));
}

TEST_CASE("batched loss agrees with the scalar loss and differentiates cleanly") {
  Rng rng(5);
  const std::size_t n = 4;
  const auto hp = testing::random_tensor({n, 3}, rng, true, 2.0);
  const auto ep = testing::random_tensor({n, 3}, rng, true, 2.0);
  const auto ht = testing::random_tensor({n, 3}, rng, false, 2.0);
  const auto et = testing::random_tensor({n, 3}, rng, false, 2.0);
  const std::vector<double> k{0.1, 0.35, 0.6, 0.9};
  const double batched = training_loss(hp, ep, ht, et, k).item();
  double expect = 0.0;
  auto row = [](const ad::Tensor& t, std::size_t i) { return Vec3(t[3 * i], t[3 * i + 1], t[3 * i + 2]); };
  for (std::size_t i = 0; i < n; ++i) expect += training_loss(row(hp, i), row(ep, i), row(ht, i), row(et, i), k[i]);
  CHECK(batched == doctest::Approx(expect / n).epsilon(1e-14));

  const auto yk = testing::random_tensor({n, 3}, rng, false);
  const auto eps = derive_epsilon(yk, hp, k);
  for (std::size_t i = 0; i < n; ++i)
    CHECK((row(eps, i) - derive_epsilon(row(yk, i), row(hp, i), k[i])).norm() < 1e-14);

  const auto report = ad::gradient_check(
      [&] { return training_loss(hp, derive_epsilon(yk, hp, k), ht, et, k); }, {{"h", hp}});
  CHECK(report.max_rel_error < 1e-4);
}

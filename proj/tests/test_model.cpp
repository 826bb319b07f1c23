// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "ddtrack/error.hpp"
#include "ddtrack/gradcheck.hpp"
#include "ddtrack/model.hpp"
#include "ddtrack/ops.hpp"
#include "support.hpp"

using namespace ddtrack;
using namespace ddtrack::model;
using ddtrack::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.sh_coeffs = 2;
  c.spatial_channels1 = 3;
  c.spatial_channels2 = 4;
  c.embed_dim = 5;
  c.context_dim = 6;
  c.gru_layers = 2;
  c.step_embed_dim = 4;
  c.global_dim = 5;
  c.denoiser_channels = 4;
  c.norm_groups = 2;
  return c;
}

void randomise(const ad::Tensor& t, Rng& rng, double scale) {
  for (double& v : ad::Tensor(t).mutable_data()) v = scale * rng.uniform(-1.0, 1.0);
}

// Perturbs every parameter, including the identity-initialised FiLM heads and
// norm affines, so checks see generic weights.
void randomise_all(Parameters& p, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, t] : p.named_parameters()) randomise(t, rng, 0.5);
}

std::vector<std::pair<std::string, ad::Tensor>> select(const Parameters& p, const std::string& prefix) {
  std::vector<std::pair<std::string, ad::Tensor>> out;
  for (auto& [name, t] : p.named_parameters())
    if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
  return out;
}

bool bitwise_equal(const ad::Tensor& a, const ad::Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("default network size") {
  const auto p = init_parameters(ModelConfig{}, 1);
  CHECK(p.parameter_count() == 3935489);
  CHECK(p.down_blocks.size() == 3);
  CHECK(p.up_blocks.size() == 3);
  CHECK(p.gru.size() == 2);
  CHECK(p.gru[0].w_ih.shape() == ad::Shape{192, 1536});
  CHECK(p.gru[1].w_ih.shape() == ad::Shape{512, 1536});
}

TEST_CASE("configuration validation and deterministic initialisation") {
  ModelConfig c = small_config();
  c.norm_groups = 3;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = small_config();
  c.step_embed_dim = 3;
  CHECK_THROWS_AS(c.validate(), InputError);
  const auto a = init_parameters(small_config(), 7), b = init_parameters(small_config(), 7);
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(pa[i].second, pb[i].second));
  const auto copy = clone(a);
  CHECK(copy.named_parameters()[0].second.node() != pa[0].second.node());
}

TEST_CASE("spatial encoders") {
  const ModelConfig cfg = small_config();
  Rng rng(2);
  const ad::Tensor x = random_tensor({3, cfg.sh_coeffs, 3, 3, 3}, rng, false);

  SUBCASE("zero features and zero biases give zero embeddings") {
    auto p = init_parameters(cfg, 3);
    for (auto& [name, t] : p.named_parameters())
      if (name.find("spatial") == 0 && name.find("bias") != std::string::npos)
        for (double& v : ad::Tensor(t).mutable_data()) v = 0.0;
    const auto e = spatial_encode(p, ad::Tensor::zeros({2, cfg.sh_coeffs, 3, 3, 3}));
    for (double v : e.z.data()) CHECK(v == 0.0);
    for (double v : e.v.data()) CHECK(v == 0.0);
  }
  SUBCASE("branches are independent") {
    auto p = init_parameters(cfg, 4);
    const auto before = spatial_encode(p, x);
    Rng r(5);
    for (auto& [name, t] : select(p, "spatial_b")) randomise(t, r, 1.0);
    const auto after = spatial_encode(p, x);
    CHECK(bitwise_equal(before.z, after.z));
    CHECK_FALSE(bitwise_equal(before.v, after.v));

    std::vector<ad::Tensor> a_params;
    for (auto& [name, t] : select(p, "spatial_a")) a_params.push_back(t);
    const auto g = ad::grad(ad::sum(ad::mul(after.v, after.v)), a_params);
    for (const auto& gi : g)
      for (double v : gi) CHECK(v == 0.0);
  }
  SUBCASE("gradient check through both branches") {
    auto p = init_parameters(cfg, 6);
    const ad::Tensor w = random_tensor({3, cfg.embed_dim}, rng, false);
    auto params = select(p, "spatial");
    const auto r = ad::gradient_check(
        [&] {
          const auto e = spatial_encode(p, x);
          return ad::sum(ad::add(ad::mul(e.z, w), ad::mul(ad::tanh(e.v), w)));
        },
        params);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("GRU cell") {
  SUBCASE("zero everything gives zero context") {
    ModelConfig cfg = small_config();
    auto p = init_parameters(cfg, 1);
    for (auto& [name, t] : select(p, "gru"))
      for (double& v : ad::Tensor(t).mutable_data()) v = 0.0;
    const auto s = temporal_encode(p, ad::Tensor::zeros({2, cfg.embed_dim}), TemporalState::zeros(cfg, 2));
    for (double v : s.context().data()) CHECK(v == 0.0);
  }
  SUBCASE("one-dimensional cell matches the gate algebra") {
    // Columns are (reset, update, new).
    GruLayer g{ad::Tensor({1, 3}, {0.5, -0.3, 0.8}, true), ad::Tensor({1, 3}, {0.2, 0.7, -0.6}, true),
               ad::Tensor({3}, {0.1, 0.05, -0.2}, true), ad::Tensor({3}, {-0.1, 0.3, 0.4}, true)};
    const double x = 0.9, h = -0.4;
    const auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double r = sig(0.5 * x + 0.1 + 0.2 * h - 0.1);
    const double u = sig(-0.3 * x + 0.05 + 0.7 * h + 0.3);
    const double n = std::tanh(0.8 * x - 0.2 + r * (-0.6 * h + 0.4));
    const double expect = (1.0 - u) * n + u * h;
    const auto out = gru_cell(g, ad::Tensor({1, 1}, {x}), ad::Tensor({1, 1}, {h}));
    CHECK(std::abs(out.item() - expect) < 1e-12);
  }
  SUBCASE("three unrolled steps pass the gradient check") {
    const ModelConfig cfg = small_config();
    auto p = init_parameters(cfg, 8);
    Rng rng(9);
    std::vector<ad::Tensor> xs;
    for (int t = 0; t < 3; ++t) xs.push_back(random_tensor({2, cfg.embed_dim}, rng));
    auto params = select(p, "gru");
    for (const auto& x : xs) params.emplace_back("x", x);
    const auto r = ad::gradient_check(
        [&] {
          auto s = TemporalState::zeros(cfg, 2);
          ad::Tensor acc = ad::Tensor::scalar(0.0);
          for (const auto& x : xs) {
            s = temporal_encode(p, x, s);
            acc = ad::add(acc, ad::sum(ad::mul(s.context(), s.context())));
          }
          return acc;
        },
        params);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("context at step t ignores later inputs") {
    const ModelConfig cfg = small_config();
    auto p = init_parameters(cfg, 10);
    Rng rng(11);
    const auto z0 = random_tensor({1, cfg.embed_dim}, rng, false);
    const auto z1 = random_tensor({1, cfg.embed_dim}, rng, false);
    const auto z1b = random_tensor({1, cfg.embed_dim}, rng, false);
    const auto s0 = temporal_encode(p, z0, TemporalState::zeros(cfg, 1));
    const auto s1 = temporal_encode(p, z1, s0);
    const auto s1b = temporal_encode(p, z1b, s0);
    CHECK(bitwise_equal(s0.context(), temporal_encode(p, z0, TemporalState::zeros(cfg, 1)).context()));
    CHECK_FALSE(bitwise_equal(s1.context(), s1b.context()));
  }
}

TEST_CASE("step embedding") {
  const double zero[] = {0.0};
  const auto e0 = sinusoidal_embedding(zero, 64);
  for (std::size_t i = 0; i < 32; ++i) {
    CHECK(e0[i] == 0.0);
    CHECK(e0[32 + i] == 1.0);
  }
  std::vector<double> grid;
  for (int i = 20; i <= 980; ++i) grid.push_back(i * 1e-3);
  const auto e = sinusoidal_embedding(grid, 64);
  const auto again = sinusoidal_embedding(grid, 64);
  CHECK(std::equal(e.data().begin(), e.data().end(), again.data().begin()));
  double min_gap = 1e9;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < 64; ++j) d2 += std::pow(e[i * 64 + j] - e[(i - 1) * 64 + j], 2);
    min_gap = std::min(min_gap, std::sqrt(d2));
  }
  CHECK(min_gap > 1e-3);
}

TEST_CASE("denoiser conditioning") {
  const ModelConfig cfg = small_config();
  Rng rng(12);
  const std::size_t n = 3;
  const auto yk = random_tensor({n, 3}, rng, false);
  const auto g1 = random_tensor({n, cfg.global_dim}, rng, false), g2 = random_tensor({n, cfg.global_dim}, rng, false);
  const auto l1 = random_tensor({n, cfg.embed_dim}, rng, false), l2 = random_tensor({n, cfg.embed_dim}, rng, false);

  SUBCASE("FiLM heads start as the identity") {
    const auto p = init_parameters(cfg, 13);
    for (const auto& block : p.down_blocks) {
      for (double v : block.film.weight.data()) CHECK(v == 0.0);
      const auto b = block.film.bias.data();
      const std::size_t c = b.size() / 2;
      for (std::size_t i = 0; i < c; ++i) {
        CHECK(b[i] == 1.0);
        CHECK(b[c + i] == 0.0);
      }
    }
    // With identity modulation the conditions cannot reach the output.
    CHECK(bitwise_equal(denoise(p, yk, g1, l1), denoise(p, yk, g2, l2)));
    CHECK(denoise(p, yk, g1, l1).shape() == ad::Shape{n, 3});
  }
  SUBCASE("trained-like weights respond to the local condition") {
    auto p = init_parameters(cfg, 14);
    randomise_all(p, 15);
    const auto a = denoise(p, yk, g1, l1), b = denoise(p, yk, g1, l2);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    CHECK(diff > 1e-6);
  }
  SUBCASE("gradient check over every denoiser parameter") {
    auto p = init_parameters(cfg, 16);
    randomise_all(p, 17);
    const auto w = random_tensor({n, 3}, rng, false);
    auto params = select(p, "denoiser");
    const auto g = random_tensor({n, cfg.global_dim}, rng), l = random_tensor({n, cfg.embed_dim}, rng);
    params.emplace_back("G", g);
    params.emplace_back("L", l);
    const auto r = ad::gradient_check([&] { return ad::sum(ad::mul(denoise(p, yk, g, l), w)); }, params);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("global condition gradient check") {
    auto p = init_parameters(cfg, 18);
    const auto c = random_tensor({n, cfg.context_dim}, rng);
    const std::vector<double> k{0.1, 0.5, 0.9};
    auto params = select(p, "step_proj");
    for (auto& e : select(p, "global_proj")) params.push_back(e);
    params.emplace_back("c", c);
    const auto w = random_tensor({n, cfg.global_dim}, rng, false);
    const auto r = ad::gradient_check([&] { return ad::sum(ad::mul(global_condition(p, c, k), w)); }, params);
    CHECK(r.max_rel_error < 1e-4);
  }
}

// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Geometry>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "ddtrack/error.hpp"
#include "ddtrack/metrics.hpp"
#include "ddtrack/model.hpp"
#include "ddtrack/phantom.hpp"
#include "ddtrack/tracker.hpp"
#include "support.hpp"

using namespace ddtrack;
using namespace ddtrack::tracker;

namespace {

Mask box_mask(std::array<std::size_t, 3> dims, Index3 lo, Index3 hi) {
  Grid g;
  g.dims = dims;
  Mask m(g);
  for (auto z = lo[2]; z < hi[2]; ++z)
    for (auto y = lo[1]; y < hi[1]; ++y)
      for (auto x = lo[0]; x < hi[0]; ++x) m.values[g.linear({x, y, z})] = 1;
  return m;
}

double turn_deg(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

// Orientation field of the phantom: the fibre direction of the dominant
// compartment of the containing voxel, or nothing outside white matter.
FieldModel oracle_field(const phantom::PhantomDataset& ph) {
  return FieldModel([&ph](const Vec3& p) -> Vec3 {
    const Index3 v = Grid::voxel_of(p);
    if (!ph.grid.contains(v)) return Vec3::Zero();
    const auto& comps = ph.compartments[ph.grid.linear(v)];
    if (comps.empty()) return Vec3::Zero();
    return comps.front().orientation;
  });
}

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.sh_coeffs = 1;
  c.spatial_channels1 = 3;
  c.spatial_channels2 = 4;
  c.embed_dim = 5;
  c.context_dim = 6;
  c.step_embed_dim = 4;
  c.global_dim = 5;
  c.denoiser_channels = 4;
  c.norm_groups = 2;
  return c;
}

}  // namespace

TEST_CASE("seeding") {
  Mask ten_voxels = box_mask({10, 3, 3}, {0, 1, 1}, {10, 2, 2});
  REQUIRE(ten_voxels.count() == 10);
  Rng a(1), b(1);
  const auto seeds = seed_points(ten_voxels, 5, a);
  CHECK(seeds.size() == 50);
  CHECK(seeds == seed_points(ten_voxels, 5, b));
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    CHECK(ten_voxels.at_point(seeds[i]));
    CHECK(Grid::voxel_of(seeds[i])[0] == static_cast<std::ptrdiff_t>(i / 5));
  }
  Rng c(1);
  CHECK_THROWS_AS(seed_points(Mask(ten_voxels.grid), 5, c), InputError);
}

TEST_CASE("single steps") {
  const Mask m = box_mask({12, 12, 12}, {0, 0, 0}, {8, 12, 12});
  TrackerConfig cfg;
  Rng rng(0);

  SUBCASE("constant field moves one step along x") {
    const FieldModel model([](const Vec3&) { return Vec3::UnitX(); });
    auto s = TrackState::start(Vec3(5, 5, 5), model);
    step(s, model, m, cfg, rng);
    CHECK(s.points.back() == Vec3(6, 5, 5));
    CHECK(s.stop == StopReason::none);
  }
  SUBCASE("reversed prediction is aligned to the previous direction") {
    auto s = TrackState::start(Vec3(2, 5, 5), FieldModel([](const Vec3&) { return Vec3::UnitX(); }));
    s.prev_dir = Vec3::UnitX();
    apply_prediction(s, Vec3(-1, 0, 0), m, cfg);
    CHECK(s.points.back() == Vec3(3, 5, 5));
    CHECK(s.last_turn_deg == 0.0);
    CHECK(s.stop == StopReason::none);
  }
  SUBCASE("a 60 degree turn stops without appending") {
    auto s = TrackState::start(Vec3(2, 5, 5), FieldModel([](const Vec3&) { return Vec3::UnitX(); }));
    s.prev_dir = Vec3::UnitX();
    apply_prediction(s, Vec3(0.5, std::sqrt(3.0) / 2, 0), m, cfg);
    CHECK(s.stop == StopReason::angle);
    CHECK(s.points.size() == 1);
  }
  SUBCASE("a 10 degree turn inside the mask continues") {
    auto s = TrackState::start(Vec3(2, 5, 5), FieldModel([](const Vec3&) { return Vec3::UnitX(); }));
    s.prev_dir = Vec3::UnitX();
    const double a = 10.0 * std::numbers::pi / 180.0;
    apply_prediction(s, Vec3(std::cos(a), std::sin(a), 0), m, cfg);
    CHECK(s.stop == StopReason::none);
    CHECK(s.last_turn_deg == doctest::Approx(10.0));
  }
  SUBCASE("leaving the mask keeps the final point in the walker") {
    auto s = TrackState::start(Vec3(7.5, 5, 5), FieldModel([](const Vec3&) { return Vec3::UnitX(); }));
    apply_prediction(s, Vec3::UnitX(), m, cfg);
    CHECK(s.stop == StopReason::mask_exit);
    CHECK(s.points.back() == Vec3(8.5, 5, 5));
  }
  SUBCASE("step budget") {
    cfg.max_steps = 3;
    const FieldModel model([](const Vec3&) { return Vec3::UnitY(); });
    auto s = TrackState::start(Vec3(2, 1, 5), model);
    for (int i = 0; i < 3; ++i) step(s, model, m, cfg, rng);
    CHECK(s.stop == StopReason::max_steps);
    CHECK(s.points.size() == 4);
    CHECK_THROWS_AS(step(s, model, m, cfg, rng), InputError);
  }
  SUBCASE("zero prediction is degenerate") {
    auto s = TrackState::start(Vec3(2, 5, 5), FieldModel([](const Vec3&) { return Vec3::Zero(); }));
    step(s, FieldModel([](const Vec3&) { return Vec3::Zero(); }), m, cfg, rng);
    CHECK(s.stop == StopReason::degenerate);
  }
}

TEST_CASE("unidirectional tracks start at the seed") {
  const Mask m = box_mask({12, 12, 12}, {1, 1, 1}, {11, 11, 11});
  TrackerConfig cfg;
  cfg.bidirectional = false;
  const FieldModel model([](const Vec3&) { return Vec3(1, 1, 0); });
  const Vec3 seeds[] = {Vec3(2.3, 2.1, 5.5)};
  const auto r = track(seeds, model, m, cfg, Rng(1));
  REQUIRE(r.tractogram.size() == 1);
  CHECK(r.tractogram.streamlines[0].front() == seeds[0]);
}

TEST_CASE("bidirectional tracks join both rays and drop short results") {
  const Mask m = box_mask({20, 5, 5}, {2, 1, 1}, {18, 4, 4});
  TrackerConfig cfg;
  const FieldModel model([](const Vec3&) { return Vec3::UnitX(); });
  const Vec3 seeds[] = {Vec3(10.5, 2.5, 2.5), Vec3(2.2, 2.5, 2.5)};
  const auto r = track(seeds, model, m, cfg, Rng(2));
  REQUIRE(r.tractogram.size() == 2);
  const auto& s = r.tractogram.streamlines[0];
  // Backward ray first, reversed, so the result runs along the seed direction.
  CHECK(s.front().x() == doctest::Approx(2.5));
  CHECK(s.back().x() == doctest::Approx(17.5));
  CHECK(s.size() == 16);
  for (const auto& p : s) CHECK(m.at_point(p));
  CHECK(r.stop_counts[static_cast<int>(StopReason::mask_exit)] == 4);

  const Mask thin = box_mask({20, 5, 5}, {2, 1, 1}, {3, 4, 4});
  const Vec3 lone[] = {Vec3(2.5, 2.5, 2.5)};
  const auto short_result = track(lone, model, thin, cfg, Rng(2));
  CHECK(short_result.tractogram.empty());
  CHECK(short_result.discarded == 1);
}

TEST_CASE("oracle tracking on the straight bundle spans head to tail") {
  const auto ph = phantom::build_phantom({phantom::default_bundles()[0]}, {40, 40, 40}, {2.0, 2.0, 2.0});
  const auto model = oracle_field(ph);
  TrackerConfig cfg;
  Rng seed_rng(3);
  const auto seeds = seed_points(ph.bundle_masks[0], 1, seed_rng);
  const auto r = track(seeds, model, ph.bundle_masks[0], cfg, Rng(4));
  REQUIRE(r.tractogram.size() > 0);
  CHECK(r.discarded == 0);
  metrics::RoiSet rois{{"straight"}, {ph.head_rois[0]}, {ph.tail_rois[0]}};
  const auto conn = metrics::classify_connections(r.tractogram, rois);
  CHECK(conn.valid == r.tractogram.size());
}

TEST_CASE("emitted geometry respects step size and angle threshold") {
  const auto ph = phantom::build_phantom(phantom::default_bundles(), {40, 40, 40}, {2.0, 2.0, 2.0});
  // Oracle field plus a deterministic wobble so some turns approach the threshold.
  const FieldModel wobbly([&ph](const Vec3& p) -> Vec3 {
    const Index3 v = Grid::voxel_of(p);
    if (!ph.grid.contains(v) || ph.compartments[ph.grid.linear(v)].empty()) return Vec3::Zero();
    const Vec3 o = ph.compartments[ph.grid.linear(v)].front().orientation;
    const Vec3 side = o.cross(Vec3::UnitZ()).normalized();
    return o + 0.9 * std::sin(3.1 * p.x() + 1.7 * p.y()) * side;
  });
  TrackerConfig cfg;
  cfg.step = 0.7;
  Rng seed_rng(5);
  const auto seeds = seed_points(ph.wm_mask, 1, seed_rng);
  const auto r = track(seeds, wobbly, ph.wm_mask, cfg, Rng(6));
  REQUIRE(r.tractogram.size() > 100);
  CHECK(r.stop_counts[static_cast<int>(StopReason::angle)] > 0);
  double worst_spacing = 0.0, worst_turn = 0.0;
  for (const auto& s : r.tractogram.streamlines)
    for (std::size_t i = 1; i < s.size(); ++i) {
      worst_spacing = std::max(worst_spacing, std::abs((s[i] - s[i - 1]).norm() - cfg.step));
      if (i >= 2) worst_turn = std::max(worst_turn, turn_deg(s[i - 1] - s[i - 2], s[i] - s[i - 1]));
    }
  CHECK(worst_spacing < 1e-9);
  CHECK(worst_turn <= cfg.angle_threshold_deg);
}

TEST_CASE("tracking is independent of the worker count") {
  ShVolume sh;
  sh.grid.dims = {12, 12, 12};
  sh.coeffs_per_voxel = 1;
  Rng rng(7);
  for (std::size_t v = 0; v < sh.grid.voxel_count(); ++v) sh.coeffs.push_back(rng.uniform(0.0, 1.0));
  const auto params = model::init_parameters(tiny_model(), 8);
  const Mask m = box_mask({12, 12, 12}, {1, 1, 1}, {11, 11, 11});
  Rng seed_rng(9);
  const auto seeds = seed_points(box_mask({12, 12, 12}, {4, 4, 4}, {8, 8, 8}), 1, seed_rng);
  for (bool deterministic : {true, false}) {
    TrackerConfig cfg;
    cfg.chunk_size = 7;
    cfg.max_steps = 20;
    cfg.angle_threshold_deg = 90.0;
    cfg.sampler.deterministic = deterministic;
    const DiffusionModel model(params, sh, cfg.sampler);
    const auto one = track(seeds, model, m, cfg, Rng(10), 1);
    const auto three = track(seeds, model, m, cfg, Rng(10), 3);
    const auto again = track(seeds, model, m, cfg, Rng(10), 1);
    CHECK(one.tractogram.streamlines == three.tractogram.streamlines);
    CHECK(one.tractogram.streamlines == again.tractogram.streamlines);
    CHECK(one.stop_counts == three.stop_counts);
    CHECK(one.tractogram.size() + one.discarded == seeds.size());
  }
}

TEST_CASE("configuration validation") {
  TrackerConfig c;
  c.step = 0.0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = TrackerConfig{};
  c.chunk_size = 0;
  CHECK_THROWS_AS(c.validate(), InputError);
  CHECK(std::string(to_string(StopReason::mask_exit)) == "mask_exit");
}

// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "ddtrack/error.hpp"
#include "ddtrack/phantom.hpp"
#include "support.hpp"

using namespace ddtrack;
using namespace ddtrack::phantom;

namespace {

const std::array<double, 3> kUnitVoxels{1.0, 1.0, 1.0};

double angle_deg(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

}  // namespace

TEST_CASE("straight bundle along x has a single x-oriented compartment everywhere") {
  const auto ph = build_phantom({{"x", {Vec3(4, 8, 8), Vec3(16, 8, 8)}, 2.5, 1.0}}, {20, 16, 16}, kUnitVoxels);
  REQUIRE(ph.wm_mask.count() > 0);
  for (std::size_t v = 0; v < ph.grid.voxel_count(); ++v) {
    if (!ph.wm_mask.values[v]) {
      CHECK(ph.compartments[v].empty());
      continue;
    }
    REQUIRE(ph.compartments[v].size() == 1);
    CHECK(ph.compartments[v][0].fraction == 1.0);
    CHECK((ph.compartments[v][0].orientation - Vec3::UnitX()).norm() < 1e-12);
  }
}

TEST_CASE("perpendicular crossing splits overlap voxels evenly") {
  const auto ph = build_phantom({{"x", {Vec3(4, 10, 10), Vec3(16, 10, 10)}, 2.5, 1.0},
                                 {"y", {Vec3(10, 4, 10), Vec3(10, 16, 10)}, 2.5, 1.0}},
                                {20, 20, 20}, kUnitVoxels);
  std::size_t overlap = 0;
  for (const auto& comps : ph.compartments) {
    if (comps.size() != 2) continue;
    ++overlap;
    CHECK(comps[0].fraction == 0.5);
    CHECK(comps[1].fraction == 0.5);
    CHECK(std::abs(comps[0].orientation.dot(comps[1].orientation)) < 1e-12);
  }
  CHECK(overlap > 0);
}

TEST_CASE("arc orientations follow the analytic circle tangent") {
  const auto bundles = default_bundles();
  const auto ph = build_phantom(bundles, {40, 40, 40}, {2.0, 2.0, 2.0});
  const int arc = 3;
  REQUIRE(ph.bundles[arc].name == "arc");
  const Vec3 centre(6, 6, 32);
  std::size_t checked = 0;
  for (std::size_t v = 0; v < ph.grid.voxel_count(); ++v)
    for (const auto& c : ph.compartments[v]) {
      if (c.bundle != arc) continue;
      const Vec3 p = Grid::center_of(ph.grid.unlinear(v));
      const double theta = std::atan2(p.y() - centre.y(), p.x() - centre.x());
      if (theta <= 0.0 || theta >= std::numbers::pi / 2) continue;  // beyond the end caps
      const Vec3 tangent(-std::sin(theta), std::cos(theta), 0.0);
      CHECK((c.orientation - tangent).norm() < 1e-3);
      ++checked;
    }
  CHECK(checked > 500);
}

TEST_CASE("default phantom layout") {
  const auto ph = build_phantom(default_bundles(), {40, 40, 40}, {2.0, 2.0, 2.0});
  CHECK(ph.bundles.size() == 4);
  for (std::size_t b = 0; b < 4; ++b) {
    CHECK(ph.head_rois[b].count() > 0);
    CHECK(ph.tail_rois[b].count() > 0);
    std::size_t violations = 0;
    for (std::size_t v = 0; v < ph.grid.voxel_count(); ++v) {
      if (ph.head_rois[b].values[v] && ph.tail_rois[b].values[v]) ++violations;
      if ((ph.head_rois[b].values[v] || ph.tail_rois[b].values[v]) && !ph.bundle_masks[b].values[v]) ++violations;
      if (ph.bundle_masks[b].values[v] && !ph.wm_mask.values[v]) ++violations;
    }
    CHECK(violations == 0);
  }
  // Cross arms meet at 60 degrees.
  const Vec3 a = ph.centerlines[1].tangent_at(1.0), b = ph.centerlines[2].tangent_at(1.0);
  CHECK(angle_deg(a, b) == doctest::Approx(60.0).epsilon(1e-9));
  // Regression values for the shipped layout.
  CHECK(ph.wm_mask.count() == 4180);
  CHECK(ph.bundle_masks[0].count() == 1160);
}

TEST_CASE("invalid bundle specifications are rejected by name") {
  try {
    (void)build_phantom({{"runaway", {Vec3(5, 5, 5), Vec3(5, 5, 30)}, 2.0, 1.0}}, {10, 10, 10}, kUnitVoxels);
    FAIL("bundle leaving the volume accepted");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("runaway") != std::string::npos);
  }
  CHECK_THROWS_AS(build_phantom({{"a", {Vec3(5, 5, 2), Vec3(5, 5, 8)}, 1.0, 1.0},
                                 {"a", {Vec3(3, 3, 2), Vec3(3, 3, 8)}, 1.0, 1.0}},
                                {10, 10, 10}, kUnitVoxels),
                  InputError);
  CHECK_THROWS_AS(Centerline({Vec3(1, 1, 1)}), InputError);
  CHECK_THROWS_AS(Centerline({Vec3(1, 1, 1), Vec3(1, 1, 1)}), InputError);
}

TEST_CASE("tensor signal point values") {
  const TensorModelParams p;
  const std::vector<Compartment> along_x{{Vec3::UnitX(), 1.0, 0}};
  CHECK(attenuation(along_x, Vec3::UnitX(), 1000.0, p) == doctest::Approx(std::exp(-1.7)).epsilon(1e-14));
  CHECK(attenuation(along_x, Vec3::UnitY(), 1000.0, p) == doctest::Approx(std::exp(-0.3)).epsilon(1e-14));
  CHECK(attenuation(along_x, Vec3::UnitY(), 0.0, p) == 1.0);
  CHECK(std::exp(-1.7) == doctest::Approx(0.1827).epsilon(1e-3));
  CHECK(std::exp(-0.3) == doctest::Approx(0.7408).epsilon(1e-4));
}

TEST_CASE("simulated signal properties") {
  const auto ph = build_phantom(default_bundles(), {40, 40, 40}, {2.0, 2.0, 2.0});
  const auto scheme = GradientScheme::default_scheme();
  const TensorModelParams params;
  const auto clean = simulate_dwi(ph, scheme, params, std::nullopt, 1);
  const auto clean2 = simulate_dwi(ph, scheme, params, std::nullopt, 99);
  CHECK(clean.signal == clean2.signal);

  SUBCASE("antipodal symmetry") {
    Rng rng(2);
    for (std::size_t v = 0; v < ph.grid.voxel_count(); v += 97) {
      const Vec3 g = testing::random_unit(rng);
      CHECK(attenuation(ph.compartments[v], g, 1000.0, params) ==
            doctest::Approx(attenuation(ph.compartments[v], -g, 1000.0, params)).epsilon(1e-15));
    }
  }
  SUBCASE("single-compartment voxels attenuate most along their fibre") {
    const auto dw = scheme.dw_indices();
    std::size_t checked = 0;
    for (std::size_t v = 0; v < ph.grid.voxel_count(); ++v) {
      if (ph.compartments[v].size() != 1) continue;
      const Vec3 o = ph.compartments[v][0].orientation;
      std::size_t arg_min = dw[0], arg_align = dw[0];
      for (auto i : dw) {
        if (clean.voxel(v)[i] < clean.voxel(v)[arg_min]) arg_min = i;
        if (std::abs(scheme.bvecs[i].dot(o)) > std::abs(scheme.bvecs[arg_align].dot(o))) arg_align = i;
      }
      CHECK(arg_min == arg_align);
      ++checked;
    }
    CHECK(checked > 1000);
  }
  SUBCASE("b0 volumes hold S0 and background is isotropic") {
    const auto b0 = scheme.b0_indices();
    CHECK(clean.voxel(ph.grid.linear({20, 20, 8}))[b0[0]] == params.s0);
    const double* bg = clean.voxel(0);
    for (auto i : scheme.dw_indices()) CHECK(bg[i] == doctest::Approx(bg[scheme.dw_indices()[0]]));
  }
  SUBCASE("Rician noise is seeded") {
    const auto a = simulate_dwi(ph, scheme, params, 20.0, 5);
    const auto b = simulate_dwi(ph, scheme, params, 20.0, 5);
    const auto c = simulate_dwi(ph, scheme, params, 20.0, 6);
    CHECK(a.signal == b.signal);
    CHECK(a.signal != c.signal);
    double mean_dev = 0.0;
    CHECK(*std::min_element(a.signal.begin(), a.signal.end()) >= 0.0);
    for (std::size_t i = 0; i < a.signal.size(); ++i) mean_dev += std::abs(a.signal[i] - clean.signal[i]);
    mean_dev /= static_cast<double>(a.signal.size());
    CHECK(mean_dev > 10.0);
    CHECK(mean_dev < 100.0);
  }
}

TEST_CASE("ground-truth streamlines") {
  const auto ph = build_phantom(default_bundles(), {40, 40, 40}, {2.0, 2.0, 2.0});
  SUBCASE("straight bundle from the head centre is an evenly spaced segment") {
    const auto s = trace_bundle(ph, 0, ph.centerlines[0].point_at(0.5), 1.0);
    REQUIRE(s.has_value());
    for (std::size_t i = 1; i < s->size(); ++i) {
      CHECK(std::abs(((*s)[i] - (*s)[i - 1]).norm() - 1.0) < 1e-9);
      CHECK(std::abs((*s)[i].x() - 20.0) < 1e-12);
    }
  }
  SUBCASE("bookkeeping, mask containment and smooth arcs") {
    const auto gt = generate_gt_tractogram(ph, 1.0, 25, 3);
    std::array<std::size_t, 4> per_bundle{};
    for (int l : gt.tractogram.labels) ++per_bundle.at(static_cast<std::size_t>(l));
    for (std::size_t b = 0; b < 4; ++b) CHECK(per_bundle[b] + gt.discarded >= 25);
    CHECK(gt.tractogram.size() + gt.discarded >= 100);
    for (std::size_t i = 0; i < gt.tractogram.size(); ++i) {
      const auto& s = gt.tractogram.streamlines[i];
      const auto b = static_cast<std::size_t>(gt.tractogram.labels[i]);
      CHECK(ph.head_rois[b].at_point(s.front()));
      CHECK(ph.tail_rois[b].at_point(s.back()));
      double max_turn = 0.0;
      bool inside = true;
      for (std::size_t j = 0; j < s.size(); ++j) {
        inside = inside && ph.wm_mask.at_point(s[j]);
        if (j >= 2) max_turn = std::max(max_turn, angle_deg(s[j - 1] - s[j - 2], s[j] - s[j - 1]));
      }
      CHECK(inside);
      CHECK(max_turn < 45.0);
    }
    const auto again = generate_gt_tractogram(ph, 1.0, 25, 3);
    CHECK(again.tractogram.streamlines == gt.tractogram.streamlines);
  }
}

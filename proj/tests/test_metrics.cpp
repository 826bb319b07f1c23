// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "doctest.h"
#include "ddtrack/error.hpp"
#include "ddtrack/io.hpp"
#include "ddtrack/metrics.hpp"
#include "ddtrack/phantom.hpp"
#include "ddtrack/rng.hpp"

using namespace ddtrack;
using namespace ddtrack::metrics;

namespace {

Grid line_grid(std::size_t n) {
  Grid g;
  g.dims = {n, 1, 1};
  return g;
}

Streamline through(std::initializer_list<int> voxels) {
  Streamline s;
  for (int x : voxels) s.push_back(Vec3(x + 0.5, 0.5, 0.5));
  return s;
}

Mask voxels(const Grid& g, std::initializer_list<int> xs) {
  Mask m(g);
  for (int x : xs) m.values[static_cast<std::size_t>(x)] = 1;
  return m;
}

// Two bundles along a 12-voxel line: A joins 0 and 4, B joins 7 and 11.
RoiSet two_bundles() {
  const Grid g = line_grid(12);
  return RoiSet{{"a", "b"}, {voxels(g, {0}), voxels(g, {7})}, {voxels(g, {4}), voxels(g, {11})}};
}

}  // namespace

TEST_CASE("connection classification") {
  const RoiSet rois = two_bundles();
  Tractogram t;
  t.streamlines = {
      through({0, 1, 2, 3, 4}),  // valid, bundle a
      through({11, 10, 9, 8, 7}),  // valid, reversed bundle b
      through({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}),  // head of a to tail of b
      through({0, 1, 2}),  // ends mid-mask
      through({5, 6}),  // touches no ROI
      through({0, 1, 2, 3, 4, 5, 6, 7}),  // two heads
  };
  const auto r = classify_connections(t, rois);
  CHECK(r.labels == std::vector{Connection::valid, Connection::valid, Connection::invalid, Connection::none,
                                Connection::none, Connection::invalid});
  CHECK(r.bundle_of == std::vector{0, 1, -1, -1, -1, -1});
  CHECK(r.valid_by_bundle == std::vector<std::vector<std::size_t>>{{0}, {1}});
  CHECK(r.vc_fraction() + r.ic_fraction() + r.nc_fraction() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.vc_fraction() == doctest::Approx(2.0 / 6.0));

  Tractogram empty;
  const auto e = classify_connections(empty, rois);
  CHECK(e.vc_fraction() == 0.0);
  CHECK(e.nc_fraction() == 0.0);

  RoiSet bad = rois;
  bad.tails[0] = bad.heads[0];
  CHECK_THROWS_WITH_AS(classify_connections(t, bad), doctest::Contains("overlap"), InputError);
}

TEST_CASE("voxel overlap scores") {
  const Grid g = line_grid(8);
  SUBCASE("identical sets") {
    const auto s = score_voxels(voxels(g, {1, 2, 3}), voxels(g, {1, 2, 3}));
    CHECK(s.overlap == 1.0);
    CHECK(s.overreach == 0.0);
    CHECK(s.f1 == 1.0);
  }
  SUBCASE("half coverage without overreach") {
    const auto s = score_voxels(voxels(g, {1, 2}), voxels(g, {1, 2, 3, 4}));
    CHECK(s.overlap == 0.5);
    CHECK(s.overreach == 0.0);
    CHECK(s.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("overreach can exceed one") {
    const auto s = score_voxels(voxels(g, {0, 1, 5, 6, 7}), voxels(g, {1, 2}));
    CHECK(s.overlap == 0.5);
    CHECK(s.overreach == 2.0);
  }
  SUBCASE("disjoint sets") {
    const auto s = score_voxels(voxels(g, {5, 6}), voxels(g, {1, 2}));
    CHECK(s.overlap == 0.0);
    CHECK(s.overreach == 1.0);
    CHECK(s.f1 == 0.0);
  }
  SUBCASE("empty reconstruction") {
    const auto s = score_voxels(Mask(g), voxels(g, {1}));
    CHECK(s.overlap == 0.0);
    CHECK(s.f1 == 0.0);
  }
  CHECK_THROWS_AS(score_voxels(Mask(g), Mask(g)), InputError);
  CHECK_THROWS_AS(score_voxels(Mask(g), Mask(line_grid(9))), InputError);
}

TEST_CASE("weighted dice") {
  const Grid g = line_grid(6);
  Tractogram a, b;
  a.streamlines = {through({0, 1})};
  b.streamlines = {through({1, 2, 3, 4})};
  // Weights 1/2,1/2 against 1/4 x4; shared voxel 1 gives (1/2 + 1/4) / 2.
  CHECK(weighted_dice(a, b, g).value == doctest::Approx(0.375).epsilon(1e-15));
  CHECK(weighted_dice(b, a, g).value == weighted_dice(a, b, g).value);
  CHECK(weighted_dice(a, a, g).value == doctest::Approx(1.0).epsilon(1e-15));

  Tractogram far;
  far.streamlines = {through({4, 5})};
  CHECK(weighted_dice(a, far, g).value == 0.0);
  CHECK_FALSE(weighted_dice(a, far, g).empty);

  SUBCASE("duplicating every streamline changes nothing") {
    Tractogram b2 = b;
    b2.streamlines.insert(b2.streamlines.end(), b.streamlines.begin(), b.streamlines.end());
    CHECK(weighted_dice(a, b2, g).value == doctest::Approx(0.375).epsilon(1e-15));
  }
  SUBCASE("revisits within one streamline count once") {
    Tractogram loop;
    loop.streamlines = {through({0, 1, 0, 1, 1})};
    CHECK(weighted_dice(loop, b, g).value == doctest::Approx(0.375).epsilon(1e-15));
  }
  SUBCASE("streamline order is irrelevant") {
    Tractogram m1, m2;
    m1.streamlines = {through({0, 1}), through({1, 2, 3}), through({5})};
    m2.streamlines = {through({5}), through({0, 1}), through({1, 2, 3})};
    CHECK(weighted_dice(m1, b, g).value == weighted_dice(m2, b, g).value);
  }
  SUBCASE("empty tracts are flagged") {
    Tractogram none;
    CHECK(weighted_dice(none, b, g).empty);
    Tractogram outside;
    outside.streamlines = {{Vec3(-3, 0.5, 0.5)}};
    CHECK(weighted_dice(outside, b, g).empty);
  }
}

TEST_CASE("ground truth scores perfectly against itself") {
  const auto ph = phantom::build_phantom(phantom::default_bundles(), {40, 40, 40}, {2.0, 2.0, 2.0});
  const auto gt = phantom::generate_gt_tractogram(ph, 0.5, 40, 5);
  const Tractogram stored = io::quantize_like_tck(gt.tractogram, ph.grid.voxel_size);
  RoiSet rois{{}, ph.head_rois, ph.tail_rois};
  std::vector<Mask> gt_masks;
  for (std::size_t b = 0; b < ph.bundles.size(); ++b) {
    rois.names.push_back(ph.bundles[b].name);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < stored.size(); ++i)
      if (stored.labels[i] == static_cast<int>(b)) members.push_back(i);
    gt_masks.push_back(coverage(stored, members, ph.grid));
  }
  const auto rep = evaluate(stored, rois, gt_masks);
  CHECK(rep.connections.vc_fraction() == 1.0);
  CHECK(rep.warnings.empty());
  for (std::size_t b = 0; b < rep.volume.bundles.size(); ++b) {
    CAPTURE(b);
    CHECK(rep.volume.bundles[b].overlap == 1.0);
    CHECK(rep.volume.bundles[b].overreach == 0.0);
    CHECK(rep.volume.bundles[b].f1 == 1.0);
    // Valid connections land in the bundle the streamline was generated for.
    for (std::size_t i : rep.connections.valid_by_bundle[b]) CHECK(stored.labels[i] == static_cast<int>(b));
  }
  CHECK(rep.volume.mean_overlap == 1.0);
}

TEST_CASE("empty tractogram evaluates to zeros with a warning") {
  const RoiSet rois = two_bundles();
  const Grid g = line_grid(12);
  const auto rep = evaluate(Tractogram{}, rois, {voxels(g, {0, 1, 2, 3, 4}), voxels(g, {7, 8, 9, 10, 11})});
  CHECK(rep.connections.total == 0);
  CHECK(rep.volume.mean_overlap == 0.0);
  CHECK(rep.volume.mean_overreach == 0.0);
  REQUIRE(rep.warnings.size() == 1);
  CHECK(rep.warnings[0].find("empty") != std::string::npos);
  CHECK(to_json(rep).find("\"vc\": 0.0") != std::string::npos);
  CHECK(to_csv(rep) == "bundle,valid_streamlines,vc_fraction,ol,or,f1\na,0,0,0,0,0\nb,0,0,0,0,0\nmean,0,0,0,0,0\n");

  CHECK_THROWS_WITH_AS(evaluate(Tractogram{}, rois, {voxels(g, {1}), Mask(g)}), doctest::Contains("'b'"),
                       InputError);
  CHECK_THROWS_AS(evaluate(Tractogram{}, rois, {voxels(g, {1})}), InputError);
}

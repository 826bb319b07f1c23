// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <algorithm>
#include <sstream>

#include "ddtrack/error.hpp"
#include "json.hpp"

namespace ddtrack::metrics {
namespace {

double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

void mark(Mask& m, const Streamline& sl) {
  for (const Vec3& p : sl) {
    const auto v = Grid::voxel_of(p);
    if (m.grid.contains(v)) m.values[m.grid.linear(v)] = 1;
  }
}

// Visit counts per voxel, each streamline counted once per voxel.
std::map<std::size_t, double> visits(const Tractogram& t, const Grid& grid) {
  std::map<std::size_t, double> counts;
  std::vector<std::size_t> seen;
  for (const auto& sl : t.streamlines) {
    seen.clear();
    for (const Vec3& p : sl) {
      const auto v = Grid::voxel_of(p);
      if (grid.contains(v)) seen.push_back(grid.linear(v));
    }
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    for (std::size_t v : seen) counts[v] += 1.0;
  }
  return counts;
}

}  // namespace

void RoiSet::validate() const {
  if (heads.size() != names.size() || tails.size() != names.size())
    throw InputError("ROI set: " + std::to_string(names.size()) + " names, " + std::to_string(heads.size()) +
                     " heads, " + std::to_string(tails.size()) + " tails");
  for (std::size_t b = 0; b < names.size(); ++b) {
    if (!(heads[b].grid == heads[0].grid) || !(tails[b].grid == heads[0].grid))
      throw InputError("ROI set: bundle '" + names[b] + "' is on a different grid");
    for (std::size_t v = 0; v < heads[b].values.size(); ++v)
      if (heads[b].values[v] && tails[b].values[v])
        throw InputError("ROI set: head and tail of bundle '" + names[b] + "' overlap");
  }
}

double ConnectionReport::vc_fraction() const { return ratio(valid, total); }
double ConnectionReport::ic_fraction() const { return ratio(invalid, total); }
double ConnectionReport::nc_fraction() const { return ratio(none, total); }

ConnectionReport classify_connections(const Tractogram& tractogram, const RoiSet& rois) {
  rois.validate();
  ConnectionReport r;
  r.total = tractogram.size();
  r.valid_by_bundle.assign(rois.size(), {});
  for (std::size_t i = 0; i < tractogram.size(); ++i) {
    const auto& sl = tractogram.streamlines[i];
    Connection label = Connection::none;
    int bundle = -1;
    if (!sl.empty()) {
      const Vec3& a = sl.front();
      const Vec3& b = sl.back();
      bool a_in_roi = false, b_in_roi = false;
      for (std::size_t k = 0; k < rois.size(); ++k) {
        const bool ah = rois.heads[k].at_point(a), at = rois.tails[k].at_point(a);
        const bool bh = rois.heads[k].at_point(b), bt = rois.tails[k].at_point(b);
        a_in_roi = a_in_roi || ah || at;
        b_in_roi = b_in_roi || bh || bt;
        if (bundle < 0 && ((ah && bt) || (at && bh))) bundle = static_cast<int>(k);
      }
      if (bundle >= 0)
        label = Connection::valid;
      else if (a_in_roi && b_in_roi)
        label = Connection::invalid;
    }
    r.labels.push_back(label);
    r.bundle_of.push_back(bundle);
    switch (label) {
      case Connection::valid:
        ++r.valid;
        r.valid_by_bundle[static_cast<std::size_t>(bundle)].push_back(i);
        break;
      case Connection::invalid: ++r.invalid; break;
      case Connection::none: ++r.none; break;
    }
  }
  return r;
}

Mask coverage(const Tractogram& tractogram, const std::vector<std::size_t>& selection, const Grid& grid) {
  Mask m(grid);
  for (std::size_t i : selection) mark(m, tractogram.streamlines.at(i));
  return m;
}

Mask coverage(const Tractogram& tractogram, const Grid& grid) {
  Mask m(grid);
  for (const auto& sl : tractogram.streamlines) mark(m, sl);
  return m;
}

BundleScores score_voxels(const Mask& recon, const Mask& gt) {
  if (!(recon.grid == gt.grid)) throw InputError("score_voxels: grids differ");
  BundleScores s;
  std::size_t both = 0, extra = 0;
  for (std::size_t v = 0; v < gt.values.size(); ++v) {
    const bool r = recon.values[v] != 0, g = gt.values[v] != 0;
    s.gt_voxels += g;
    s.recon_voxels += r;
    both += r && g;
    extra += r && !g;
  }
  if (s.gt_voxels == 0) throw InputError("score_voxels: ground-truth mask is empty");
  s.overlap = ratio(both, s.gt_voxels);
  s.overreach = ratio(extra, s.gt_voxels);
  const double precision = ratio(both, s.recon_voxels);
  s.f1 = precision + s.overlap > 0.0 ? 2.0 * precision * s.overlap / (precision + s.overlap) : 0.0;
  return s;
}

VolumeReport volume_scores(const Tractogram& tractogram, const ConnectionReport& connections,
                           const std::vector<Mask>& gt_masks, const std::vector<std::string>& names) {
  if (gt_masks.size() != connections.valid_by_bundle.size() || names.size() != gt_masks.size())
    throw InputError("volume_scores: " + std::to_string(gt_masks.size()) + " ground-truth masks for " +
                     std::to_string(connections.valid_by_bundle.size()) + " bundles");
  VolumeReport rep;
  for (std::size_t b = 0; b < gt_masks.size(); ++b) {
    if (gt_masks[b].count() == 0) throw InputError("volume_scores: ground-truth mask of '" + names[b] + "' is empty");
    auto s = score_voxels(coverage(tractogram, connections.valid_by_bundle[b], gt_masks[b].grid), gt_masks[b]);
    s.name = names[b];
    s.valid_streamlines = connections.valid_by_bundle[b].size();
    rep.mean_overlap += s.overlap;
    rep.mean_overreach += s.overreach;
    rep.mean_f1 += s.f1;
    rep.bundles.push_back(std::move(s));
  }
  if (!rep.bundles.empty()) {
    const auto n = static_cast<double>(rep.bundles.size());
    rep.mean_overlap /= n;
    rep.mean_overreach /= n;
    rep.mean_f1 /= n;
  }
  return rep;
}

WeightedDice weighted_dice(const Tractogram& t1, const Tractogram& t2, const Grid& grid) {
  const auto c1 = visits(t1, grid), c2 = visits(t2, grid);
  WeightedDice out;
  if (c1.empty() || c2.empty()) {
    out.empty = true;
    return out;
  }
  double s1 = 0.0, s2 = 0.0;
  for (const auto& [v, c] : c1) s1 += c;
  for (const auto& [v, c] : c2) s2 += c;
  double shared = 0.0;
  for (const auto& [v, c] : c1) {
    const auto it = c2.find(v);
    if (it != c2.end()) shared += c / s1 + it->second / s2;
  }
  // Both normalised weight sets sum to 1.
  out.value = shared / 2.0;
  return out;
}

EvalReport evaluate(const Tractogram& tractogram, const RoiSet& rois, const std::vector<Mask>& gt_masks) {
  EvalReport rep;
  rep.connections = classify_connections(tractogram, rois);
  rep.volume = volume_scores(tractogram, rep.connections, gt_masks, rois.names);
  if (tractogram.empty()) rep.warnings.push_back("tractogram is empty");
  return rep;
}

std::string to_json(const EvalReport& report) {
  using nlohmann::json;
  const auto& c = report.connections;
  json bundles = json::array();
  for (const auto& b : report.volume.bundles)
    bundles.push_back({{"name", b.name},
                       {"valid_streamlines", b.valid_streamlines},
                       {"vc_fraction", ratio(b.valid_streamlines, c.total)},
                       {"gt_voxels", b.gt_voxels},
                       {"recon_voxels", b.recon_voxels},
                       {"ol", b.overlap},
                       {"or", b.overreach},
                       {"f1", b.f1}});
  json doc = {{"streamlines", c.total},
              {"vc", c.vc_fraction()},
              {"ic", c.ic_fraction()},
              {"nc", c.nc_fraction()},
              {"mean", {{"ol", report.volume.mean_overlap}, {"or", report.volume.mean_overreach}, {"f1", report.volume.mean_f1}}},
              {"bundles", bundles},
              {"warnings", report.warnings}};
  return doc.dump(2) + "\n";
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto& c = report.connections;
  os << "bundle,valid_streamlines,vc_fraction,ol,or,f1\n";
  for (const auto& b : report.volume.bundles)
    os << b.name << ',' << b.valid_streamlines << ',' << ratio(b.valid_streamlines, c.total) << ',' << b.overlap << ','
       << b.overreach << ',' << b.f1 << '\n';
  os << "mean," << c.valid << ',' << c.vc_fraction() << ',' << report.volume.mean_overlap << ','
     << report.volume.mean_overreach << ',' << report.volume.mean_f1 << '\n';
  return os.str();
}

}  // namespace ddtrack::metrics

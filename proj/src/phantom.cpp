// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/phantom.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <string>

#include "ddtrack/error.hpp"
#include "ddtrack/rng.hpp"

namespace ddtrack::phantom {
namespace {

std::string fmt(const Vec3& p) {
  return "(" + std::to_string(p.x()) + "," + std::to_string(p.y()) + "," + std::to_string(p.z()) + ")";
}

// Unit vectors spanning the plane orthogonal to t.
std::pair<Vec3, Vec3> normal_basis(const Vec3& t) {
  const Vec3 helper = std::abs(t.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 a = t.cross(helper).normalized();
  return {a, t.cross(a)};
}

}  // namespace

Centerline::Centerline(std::vector<Vec3> points) : points_(std::move(points)) {
  if (points_.size() < 2) throw InputError("centreline needs at least 2 points");
  cumulative_.assign(points_.size(), 0.0);
  std::vector<Vec3> seg_dirs;
  for (std::size_t i = 0; i + 1 < points_.size(); ++i) {
    const Vec3 d = points_[i + 1] - points_[i];
    const double len = d.norm();
    if (!(len > 0.0)) throw InputError("centreline has repeated point at index " + std::to_string(i + 1));
    cumulative_[i + 1] = cumulative_[i] + len;
    seg_dirs.push_back(d / len);
  }
  vertex_tangents_.resize(points_.size());
  vertex_tangents_.front() = seg_dirs.front();
  vertex_tangents_.back() = seg_dirs.back();
  for (std::size_t i = 1; i + 1 < points_.size(); ++i) {
    const Vec3 bisector = seg_dirs[i - 1] + seg_dirs[i];
    if (bisector.norm() < 1e-12) throw InputError("centreline reverses at index " + std::to_string(i));
    vertex_tangents_[i] = bisector.normalized();
  }
}

Vec3 Centerline::blend(std::size_t segment, double u) const {
  return ((1.0 - u) * vertex_tangents_[segment] + u * vertex_tangents_[segment + 1]).normalized();
}

std::pair<std::size_t, double> Centerline::locate(double arc_length) const {
  const double s = std::clamp(arc_length, 0.0, length());
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  std::size_t seg = it == cumulative_.begin() ? 0 : static_cast<std::size_t>(it - cumulative_.begin()) - 1;
  seg = std::min(seg, points_.size() - 2);
  const double seg_len = cumulative_[seg + 1] - cumulative_[seg];
  return {seg, std::clamp((s - cumulative_[seg]) / seg_len, 0.0, 1.0)};
}

Vec3 Centerline::point_at(double arc_length) const {
  const auto [seg, u] = locate(arc_length);
  return points_[seg] + u * (points_[seg + 1] - points_[seg]);
}

Vec3 Centerline::tangent_at(double arc_length) const {
  const auto [seg, u] = locate(arc_length);
  return blend(seg, u);
}

Centerline::Closest Centerline::closest(const Vec3& p) const {
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_seg = 0;
  double best_u = 0.0;
  for (std::size_t i = 0; i + 1 < points_.size(); ++i) {
    const Vec3 d = points_[i + 1] - points_[i];
    const double u = std::clamp((p - points_[i]).dot(d) / d.squaredNorm(), 0.0, 1.0);
    const double dist2 = (points_[i] + u * d - p).squaredNorm();
    if (dist2 < best) {
      best = dist2;
      best_seg = i;
      best_u = u;
    }
  }
  const double seg_len = cumulative_[best_seg + 1] - cumulative_[best_seg];
  return {cumulative_[best_seg] + best_u * seg_len, std::sqrt(best), blend(best_seg, best_u)};
}

PhantomDataset build_phantom(const std::vector<BundleSpec>& specs, const std::array<std::size_t, 3>& dims,
                             const std::array<double, 3>& voxel_size, double roi_length) {
  if (specs.empty()) throw InputError("phantom needs at least one bundle");
  for (int a = 0; a < 3; ++a) {
    if (dims[a] == 0) throw InputError("phantom dims must be positive");
    if (!(voxel_size[a] > 0.0)) throw InputError("phantom voxel_size must be positive");
  }
  if (!(roi_length > 0.0)) throw InputError("phantom roi_length must be positive");

  PhantomDataset ph;
  ph.grid = Grid{dims, voxel_size};
  ph.bundles = specs;
  ph.roi_length = roi_length;

  std::set<std::string> names;
  for (const auto& b : specs) {
    const std::string label = "bundle '" + b.name + "'";
    if (b.name.empty()) throw InputError("bundle name must be non-empty");
    if (!names.insert(b.name).second) throw InputError("duplicate " + label);
    if (!(b.radius > 0.0)) throw InputError(label + ": radius must be positive");
    if (!(b.weight > 0.0)) throw InputError(label + ": weight must be positive");
    if (b.centerline.size() < 2) throw InputError(label + ": centreline needs at least 2 points");
    for (const Vec3& p : b.centerline)
      for (int a = 0; a < 3; ++a)
        if (!std::isfinite(p[a]) || p[a] - b.radius < 0.0 || p[a] + b.radius > static_cast<double>(dims[a]))
          throw InputError(label + " exits the volume near centreline point " + fmt(p));
    ph.centerlines.emplace_back(b.centerline);
    if (ph.centerlines.back().length() <= 2.0 * roi_length)
      throw InputError(label + " is too short for disjoint head and tail ROIs");
  }

  const std::size_t nvox = ph.grid.voxel_count();
  ph.compartments.assign(nvox, {});
  ph.wm_mask = Mask(ph.grid);
  for (std::size_t b = 0; b < specs.size(); ++b) {
    ph.bundle_masks.emplace_back(ph.grid);
    ph.head_rois.emplace_back(ph.grid);
    ph.tail_rois.emplace_back(ph.grid);
  }

  for (std::size_t v = 0; v < nvox; ++v) {
    const Vec3 c = Grid::center_of(ph.grid.unlinear(v));
    double total = 0.0;
    for (std::size_t b = 0; b < specs.size(); ++b) {
      const auto hit = ph.centerlines[b].closest(c);
      if (hit.distance > specs[b].radius) continue;
      ph.bundle_masks[b].values[v] = 1;
      if (hit.arc_length <= roi_length) ph.head_rois[b].values[v] = 1;
      if (hit.arc_length >= ph.centerlines[b].length() - roi_length) ph.tail_rois[b].values[v] = 1;
      ph.compartments[v].push_back({hit.tangent, specs[b].weight, static_cast<int>(b)});
      total += specs[b].weight;
    }
    if (total > 0.0) {
      ph.wm_mask.values[v] = 1;
      for (auto& comp : ph.compartments[v]) comp.fraction /= total;
    }
  }
  return ph;
}

std::vector<BundleSpec> default_bundles() {
  std::vector<BundleSpec> out;
  out.push_back({"straight", {Vec3(20, 4, 8), Vec3(20, 36, 8)}, 3.0, 1.0});
  // Each arm is 30 degrees off the x axis, so the pair crosses at 60 degrees.
  const double half_span = 15.0 / std::tan(std::numbers::pi / 6.0);
  out.push_back({"cross_a", {Vec3(20 - half_span / 2, 12.5, 20), Vec3(20 + half_span / 2, 27.5, 20)}, 3.0, 1.0});
  out.push_back({"cross_b", {Vec3(20 - half_span / 2, 27.5, 20), Vec3(20 + half_span / 2, 12.5, 20)}, 3.0, 1.0});
  BundleSpec arc{"arc", {}, 3.0, 1.0};
  constexpr int kArcSegments = 256;
  for (int i = 0; i <= kArcSegments; ++i) {
    const double theta = 0.5 * std::numbers::pi * i / kArcSegments;
    arc.centerline.emplace_back(6.0 + 24.0 * std::cos(theta), 6.0 + 24.0 * std::sin(theta), 32.0);
  }
  out.push_back(std::move(arc));
  return out;
}

void TensorModelParams::validate() const {
  if (!(lambda_perp > 0.0 && lambda_parallel > lambda_perp))
    throw InputError("tensor model needs lambda_parallel > lambda_perp > 0");
  if (!(s0 > 0.0)) throw InputError("tensor model needs s0 > 0");
}

double attenuation(const std::vector<Compartment>& compartments, const Vec3& g, double bval,
                   const TensorModelParams& params) {
  if (compartments.empty()) {
    const double md = (params.lambda_parallel + 2.0 * params.lambda_perp) / 3.0;
    return std::exp(-bval * md);
  }
  double s = 0.0;
  for (const auto& c : compartments) {
    const double cos_g = g.dot(c.orientation);
    const double adc = params.lambda_perp + (params.lambda_parallel - params.lambda_perp) * cos_g * cos_g;
    s += c.fraction * std::exp(-bval * adc);
  }
  return s;
}

DwiVolume simulate_dwi(const PhantomDataset& phantom, const GradientScheme& scheme, const TensorModelParams& params,
                       std::optional<double> snr, std::uint64_t seed) {
  scheme.validate();
  params.validate();
  if (snr && !(*snr > 0.0)) throw InputError("snr must be positive");

  DwiVolume dwi;
  dwi.grid = phantom.grid;
  dwi.scheme = scheme;
  const std::size_t nvol = scheme.size(), nvox = phantom.grid.voxel_count();
  dwi.signal.assign(nvox * nvol, 0.0);
  const Rng master(seed);
  const double sigma = snr ? params.s0 / *snr : 0.0;
  for (std::size_t v = 0; v < nvox; ++v) {
    Rng rng = master.split(v);
    for (std::size_t i = 0; i < nvol; ++i) {
      const double bval = scheme.bvals[i] <= GradientScheme::kB0Threshold ? 0.0 : scheme.bvals[i];
      double s = params.s0 * attenuation(phantom.compartments[v], scheme.bvecs[i], bval, params);
      if (snr) {
        const double n1 = sigma * rng.normal();
        const double n2 = sigma * rng.normal();
        s = std::sqrt((s + n1) * (s + n1) + n2 * n2);
      }
      dwi.signal[v * nvol + i] = s;
    }
  }
  return dwi;
}

std::optional<Streamline> trace_bundle(const PhantomDataset& phantom, std::size_t bundle, const Vec3& seed,
                                       double step) {
  if (!(step > 0.0)) throw InputError("trace step must be positive");
  if (bundle >= phantom.bundles.size()) throw InputError("bundle index out of range");
  const Centerline& line = phantom.centerlines[bundle];
  const Mask& mask = phantom.bundle_masks[bundle];
  const double stop_at = line.length() - std::min(1.0, 0.5 * phantom.roi_length);
  const auto budget = static_cast<std::size_t>(std::ceil(2.0 * line.length() / step)) + 10;

  Streamline pts{seed};
  if (!mask.at_point(seed) || !phantom.head_rois[bundle].at_point(seed)) return std::nullopt;
  Vec3 p = seed;
  for (std::size_t n = 0; n < budget; ++n) {
    if (line.closest(p).arc_length >= stop_at) {
      if (!phantom.tail_rois[bundle].at_point(p)) return std::nullopt;
      return pts;
    }
    const Vec3 mid = p + 0.5 * step * line.closest(p).tangent;
    p = p + step * line.closest(mid).tangent;
    if (!mask.at_point(p)) return std::nullopt;
    pts.push_back(p);
  }
  return std::nullopt;
}

GtTractogram generate_gt_tractogram(const PhantomDataset& phantom, double step, std::size_t per_bundle,
                                    std::uint64_t seed) {
  if (!(step > 0.0)) throw InputError("ground-truth step must be positive");
  GtTractogram out;
  const Rng master(seed);
  for (std::size_t b = 0; b < phantom.bundles.size(); ++b) {
    Rng rng = master.split(b);
    const Centerline& line = phantom.centerlines[b];
    // Keeps every point's containing voxel centre within the bundle radius.
    const double max_offset = std::max(0.0, phantom.bundles[b].radius - std::sqrt(3.0) / 2.0 - 1e-6);
    const double s_hi = std::min(1.0, 0.5 * phantom.roi_length);
    std::size_t accepted = 0, attempts = 0;
    while (accepted < per_bundle && attempts < 4 * per_bundle) {
      ++attempts;
      const double s0 = rng.uniform(0.25 * s_hi, s_hi);
      const double rho = max_offset * std::sqrt(rng.uniform());
      const double phi = 2.0 * std::numbers::pi * rng.uniform();
      const auto [e1, e2] = normal_basis(line.tangent_at(s0));
      const Vec3 start = line.point_at(s0) + rho * (std::cos(phi) * e1 + std::sin(phi) * e2);
      auto sl = trace_bundle(phantom, b, start, step);
      if (!sl) {
        ++out.discarded;
        continue;
      }
      out.tractogram.streamlines.push_back(std::move(*sl));
      out.tractogram.labels.push_back(static_cast<int>(b));
      ++accepted;
    }
  }
  return out;
}

}  // namespace ddtrack::phantom

// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/sh.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ddtrack/error.hpp"

namespace ddtrack::sh {
namespace {

// Normalised associated Legendre N_l^m P_l^m(x) for 0 <= m <= l, including
// the Condon-Shortley phase. Returned as table[l][m].
std::vector<std::vector<double>> normalized_legendre(int l_max, double x) {
  std::vector<std::vector<double>> p(l_max + 1);
  for (int l = 0; l <= l_max; ++l) p[l].assign(l + 1, 0.0);
  const double s = std::sqrt(std::max(0.0, 1.0 - x * x));
  double pmm = 1.0;
  for (int m = 0; m <= l_max; ++m) {
    if (m > 0) pmm *= -(2.0 * m - 1.0) * s;
    p[m][m] = pmm;
    if (m + 1 <= l_max) p[m + 1][m] = x * (2.0 * m + 1.0) * pmm;
    for (int l = m + 2; l <= l_max; ++l)
      p[l][m] = ((2.0 * l - 1.0) * x * p[l - 1][m] - (l + m - 1.0) * p[l - 2][m]) / (l - m);
  }
  for (int l = 0; l <= l_max; ++l)
    for (int m = 0; m <= l; ++m) {
      double ratio = 1.0;  // (l-m)! / (l+m)!
      for (int k = l - m + 1; k <= l + m; ++k) ratio /= k;
      p[l][m] *= std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi) * ratio);
    }
  return p;
}

}  // namespace

std::size_t ShBasisConfig::coeff_count() const {
  validate();
  return static_cast<std::size_t>((l_max + 1) * (l_max + 2) / 2);
}

void ShBasisConfig::validate() const {
  if (l_max < 0 || l_max % 2 != 0)
    throw InputError("SH order l_max must be even and non-negative, got " + std::to_string(l_max));
}

std::vector<int> column_degrees(int l_max) {
  ShBasisConfig{l_max}.validate();
  std::vector<int> out;
  for (int l = 0; l <= l_max; l += 2)
    for (int m = -l; m <= l; ++m) out.push_back(l);
  return out;
}

Eigen::MatrixXd basis_matrix(std::span<const Vec3> directions, const ShBasisConfig& config) {
  const std::size_t m_count = config.coeff_count();
  Eigen::MatrixXd b(static_cast<Eigen::Index>(directions.size()), static_cast<Eigen::Index>(m_count));
  for (std::size_t r = 0; r < directions.size(); ++r) {
    const Vec3& d = directions[r];
    if (std::abs(d.norm() - 1.0) > 1e-6) throw InputError("basis_matrix: direction " + std::to_string(r) + " is not unit");
    const double cos_theta = std::clamp(d.z(), -1.0, 1.0);
    const double phi = std::atan2(d.y(), d.x());
    const auto p = normalized_legendre(config.l_max, cos_theta);
    Eigen::Index col = 0;
    for (int l = 0; l <= config.l_max; l += 2)
      for (int m = -l; m <= l; ++m, ++col) {
        const int am = std::abs(m);
        double v = p[l][am];
        if (m < 0)
          v *= std::numbers::sqrt2 * std::cos(am * phi);
        else if (m > 0)
          v *= std::numbers::sqrt2 * std::sin(am * phi);
        b(static_cast<Eigen::Index>(r), col) = v;
      }
  }
  return b;
}

NormalizedDwi normalize_dwi(const DwiVolume& dwi, double floor_fraction) {
  const auto b0 = dwi.scheme.b0_indices();
  if (b0.empty()) throw InputError("normalize_dwi: volume has no b0 image");
  const std::size_t nvox = dwi.grid.voxel_count(), nvol = dwi.volumes();
  if (dwi.signal.size() != nvox * nvol) throw InputError("normalize_dwi: signal length does not match grid x volumes");

  NormalizedDwi out;
  out.grid = dwi.grid;
  out.dw_indices = dwi.scheme.dw_indices();
  const std::size_t ndw = out.dw_indices.size();

  std::vector<double> b0_mean(nvox);
  double max_b0 = 0.0;
  for (std::size_t v = 0; v < nvox; ++v) {
    const double* s = dwi.voxel(v);
    double acc = 0.0;
    for (std::size_t i : b0) acc += s[i];
    b0_mean[v] = acc / static_cast<double>(b0.size());
    max_b0 = std::max(max_b0, b0_mean[v]);
  }
  out.b0_floor = floor_fraction * max_b0;
  out.signal.assign(nvox * ndw, 0.0);
  out.flagged.assign(nvox, 0);
  for (std::size_t v = 0; v < nvox; ++v) {
    if (!(b0_mean[v] > out.b0_floor)) {
      out.flagged[v] = 1;
      continue;
    }
    const double* s = dwi.voxel(v);
    for (std::size_t j = 0; j < ndw; ++j) out.signal[v * ndw + j] = s[out.dw_indices[j]] / b0_mean[v];
  }
  return out;
}

ShVolume fit_sh(const DwiVolume& dwi, const ShBasisConfig& config, double reg, double floor_fraction) {
  if (!(reg >= 0.0)) throw InputError("fit_sh: regularisation weight must be non-negative");
  const std::size_t m = config.coeff_count();
  const auto norm = normalize_dwi(dwi, floor_fraction);
  const std::size_t ndw = norm.dw_indices.size();

  std::vector<Vec3> dirs;
  for (std::size_t i : norm.dw_indices) dirs.push_back(dwi.scheme.bvecs[i]);
  const Eigen::MatrixXd basis = basis_matrix(dirs, config);

  // Stacked least squares [B; sqrt(reg) L] c = [s; 0]; the solve operator is
  // shared by all voxels.
  const auto degrees = column_degrees(config.l_max);
  const Eigen::Index rows = static_cast<Eigen::Index>(ndw + (reg > 0.0 ? m : 0));
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(m));
  system.topRows(static_cast<Eigen::Index>(ndw)) = basis;
  if (reg > 0.0)
    for (std::size_t j = 0; j < m; ++j)
      system(static_cast<Eigen::Index>(ndw + j), static_cast<Eigen::Index>(j)) =
          std::sqrt(reg) * degrees[j] * (degrees[j] + 1.0);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(system);
  qr.setThreshold(1e-10);

  ShVolume out;
  out.grid = dwi.grid;
  out.l_max = config.l_max;
  out.coeffs_per_voxel = m;
  out.coeffs.assign(dwi.grid.voxel_count() * m, 0.0);

  const bool any_signal = std::any_of(norm.flagged.begin(), norm.flagged.end(), [](auto f) { return f == 0; });
  if (any_signal && qr.rank() < static_cast<Eigen::Index>(m)) {
    const auto first = static_cast<std::size_t>(std::find(norm.flagged.begin(), norm.flagged.end(), 0) - norm.flagged.begin());
    const auto at = dwi.grid.unlinear(first);
    throw InputError("fit_sh: normal equations are rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                     std::to_string(m) + " with " + std::to_string(ndw) + " DW directions, reg " +
                     std::to_string(reg) + ") at voxel (" + std::to_string(at[0]) + "," + std::to_string(at[1]) +
                     "," + std::to_string(at[2]) + ")");
  }
  const Eigen::MatrixXd solve = qr.solve(Eigen::MatrixXd::Identity(rows, rows)).leftCols(static_cast<Eigen::Index>(ndw));

  for (std::size_t v = 0; v < dwi.grid.voxel_count(); ++v) {
    if (norm.flagged[v]) continue;
    Eigen::Map<const Eigen::VectorXd> s(norm.signal.data() + v * ndw, static_cast<Eigen::Index>(ndw));
    Eigen::Map<Eigen::VectorXd>(out.coeffs.data() + v * m, static_cast<Eigen::Index>(m)).noalias() = solve * s;
  }
  return out;
}

bool interpolate(const ShVolume& sh, const Vec3& p, std::span<double> out) {
  const std::size_t m = sh.coeffs_per_voxel;
  std::fill(out.begin(), out.end(), 0.0);
  std::array<std::size_t, 3> lo{}, hi{};
  std::array<double, 3> t{};
  for (int a = 0; a < 3; ++a) {
    const auto n = static_cast<double>(sh.grid.dims[a]);
    if (!(p[a] >= 0.0 && p[a] < n)) return false;
    const double u = std::clamp(p[a] - 0.5, 0.0, n - 1.0);
    const auto i0 = std::min(static_cast<std::size_t>(u), sh.grid.dims[a] > 1 ? sh.grid.dims[a] - 2 : 0);
    lo[a] = i0;
    hi[a] = sh.grid.dims[a] > 1 ? i0 + 1 : 0;
    t[a] = sh.grid.dims[a] > 1 ? u - static_cast<double>(i0) : 0.0;
  }
  for (int corner = 0; corner < 8; ++corner) {
    const bool bx = corner & 1, by = corner & 2, bz = corner & 4;
    const double w = (bx ? t[0] : 1.0 - t[0]) * (by ? t[1] : 1.0 - t[1]) * (bz ? t[2] : 1.0 - t[2]);
    if (w == 0.0) continue;
    const Index3 v{static_cast<std::ptrdiff_t>(bx ? hi[0] : lo[0]), static_cast<std::ptrdiff_t>(by ? hi[1] : lo[1]),
                   static_cast<std::ptrdiff_t>(bz ? hi[2] : lo[2])};
    const double* c = sh.voxel(sh.grid.linear(v));
    for (std::size_t j = 0; j < m; ++j) out[j] += w * c[j];
  }
  return true;
}

NeighborhoodFeature sample_neighborhood(const ShVolume& sh, const Vec3& p) {
  NeighborhoodFeature f;
  f.coeffs_per_cell = sh.coeffs_per_voxel;
  f.values.assign(NeighborhoodFeature::kCells * f.coeffs_per_cell, 0.0);
  std::size_t cell = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx, ++cell) {
        std::span<double> dst(f.values.data() + cell * f.coeffs_per_cell, f.coeffs_per_cell);
        if (!interpolate(sh, p + Vec3(dx, dy, dz), dst)) f.out_of_bounds = true;
      }
  return f;
}

}  // namespace ddtrack::sh

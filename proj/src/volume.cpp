// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ddtrack/error.hpp"

namespace ddtrack {

Index3 Grid::voxel_of(const Vec3& p) {
  return {static_cast<std::ptrdiff_t>(std::floor(p.x())), static_cast<std::ptrdiff_t>(std::floor(p.y())),
          static_cast<std::ptrdiff_t>(std::floor(p.z()))};
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

std::vector<std::size_t> GradientScheme::b0_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bvals.size(); ++i)
    if (bvals[i] <= kB0Threshold) out.push_back(i);
  return out;
}

std::vector<std::size_t> GradientScheme::dw_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bvals.size(); ++i)
    if (bvals[i] > kB0Threshold) out.push_back(i);
  return out;
}

void GradientScheme::validate() const {
  if (bvals.size() != bvecs.size())
    throw InputError("gradient scheme: " + std::to_string(bvals.size()) + " b-values but " +
                     std::to_string(bvecs.size()) + " b-vectors");
  if (b0_indices().empty()) throw InputError("gradient scheme: no b0 volume");
  for (std::size_t i : dw_indices())
    if (std::abs(bvecs[i].norm() - 1.0) > 1e-6)
      throw InputError("gradient scheme: b-vector " + std::to_string(i) + " is not unit length");
}

GradientScheme GradientScheme::default_scheme() {
  // Antipodally-symmetric electrostatic repulsion, 32 points, upper hemisphere.
  static const double kDirs[32][3] = {
      {0.99405528550820998, -0.10771120123889603, 0.015886676205709518},
      {0.20581889601312933, 0.34205566298205953, 0.9168623154355513},
      {0.54008787557811744, -0.48681660773696878, 0.6865236172812893},
      {0.40720773136769811, -0.1206979359351715, 0.90532528506352994},
      {0.61801194958732542, 0.24056234171694557, 0.74845907698078762},
      {-0.87018492359615673, 0.051419204943286376, 0.49003496212918457},
      {0.51845959764924776, -0.77243179152522845, 0.36680890535332744},
      {-0.29730739060057043, -0.73448096379431294, 0.61003772778251775},
      {0.80160457455404943, 0.5945862202424812, 0.062428621254847085},
      {-0.14714158398592089, 0.66805086535260227, 0.72942264535984458},
      {-0.9349515751129085, -0.28812988306023107, 0.20699449915780163},
      {0.92410294917947378, 0.21311051886051507, 0.31720284688003808},
      {-0.70177112058833324, -0.41616171693740783, 0.57820992698491769},
      {0.28612962759540167, 0.7077104752843979, 0.64596882230092834},
      {0.11281863090450911, -0.52594572160159214, 0.84300240477107347},
      {-0.57655985985058555, -0.0077739540622002636, 0.81701792737204493},
      {0.43896794259470234, 0.87835755044909947, 0.18919608596171256},
      {-0.85710706197326703, 0.43937976492393821, 0.26891059200213585},
      {-0.33190112573422592, -0.37526643954418243, 0.86545753338230635},
      {0.85286838798610609, -0.45253586771381071, 0.26043579094757585},
      {0.81003455915800204, -0.13536615423557338, 0.57054361556078448},
      {0.11944278113473392, -0.84977549225543536, 0.51343454772427666},
      {-0.26102312860081872, 0.28667023896518068, 0.92178473649062265},
      {-0.18715410681753403, -0.96662340072332642, 0.17496440059452834},
      {0.66250968691061929, 0.57377480193540931, 0.48152195320003321},
      {-0.65746838958311571, 0.75166377827476727, 0.052315209343801621},
      {-0.59397057834139666, -0.75362789380456841, 0.28150301906813852},
      {0.24104995283330077, -0.96998746590365681, 0.031925479305187049},
      {-0.42714154315262243, 0.80379507224579583, 0.41408161507916802},
      {-0.025044512903399447, -0.082085017865304061, 0.99631060529108306},
      {0.017149135616392037, 0.94125276716594042, 0.33726715738427687},
      {-0.60887838485586621, 0.45179732365900771, 0.65203243078076245},
  };
  GradientScheme s;
  for (int i = 0; i < 2; ++i) {
    s.bvals.push_back(0.0);
    s.bvecs.emplace_back(0.0, 0.0, 0.0);
  }
  for (const auto& d : kDirs) {
    s.bvals.push_back(1000.0);
    s.bvecs.push_back(Vec3(d[0], d[1], d[2]).normalized());
  }
  return s;
}

}  // namespace ddtrack

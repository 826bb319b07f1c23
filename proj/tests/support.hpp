// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ddtrack/rng.hpp"
#include "ddtrack/tensor.hpp"
#include "ddtrack/volume.hpp"

namespace ddtrack::testing {

inline ad::Tensor random_tensor(ad::Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = scale * rng.uniform(-1.0, 1.0);
  return ad::Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Vec3 random_unit(Rng& rng) {
  Vec3 v;
  do v = Vec3(rng.normal(), rng.normal(), rng.normal());
  while (v.norm() < 1e-6);
  return v.normalized();
}

/// Fresh scratch directory under the system temp path, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("ddtrack_test_" + tag)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace ddtrack::testing

// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddtrack/error.hpp"

namespace ddtrack::ad {

GradCheckReport gradient_check(const std::function<Tensor()>& loss_fn,
                               const std::vector<std::pair<std::string, Tensor>>& params,
                               const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw InputError("gradient_check: step must be positive");

  std::vector<Tensor> tensors;
  for (const auto& [name, t] : params) tensors.push_back(t);
  const auto analytic = grad(loss_fn(), tensors);

  Rng rng(options.seed);
  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor leaf = params[p].second;
    auto values = leaf.mutable_data();

    std::vector<std::size_t> picks(values.size());
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    if (options.max_entries > 0 && picks.size() > options.max_entries) {
      for (std::size_t i = 0; i < options.max_entries; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform() * static_cast<double>(picks.size() - i));
        std::swap(picks[i], picks[std::min(j, picks.size() - 1)]);
      }
      picks.resize(options.max_entries);
    }

    GradCheckEntry entry{params[p].first, picks.size(), 0.0, 0.0};
    for (std::size_t i : picks) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double up = loss_fn().item();
      values[i] = saved - options.step;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[p][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.scale_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace ddtrack::ad

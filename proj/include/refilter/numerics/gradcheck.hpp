#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "refilter/numerics/optim.hpp"

namespace refilter::nn {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor). The floor keeps
  // vanishing gradients from dividing round-off by ~0.
  double abs_floor = 1e-6;
  // Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  bool trainable_only = true;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

// Compares the analytic gradient of loss_fn (one backward pass) against
// central differences. loss_fn must be deterministic; it is called 2x per
// checked coordinate plus once for the analytic pass.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, ParameterSet& params,
                                  const GradCheckOptions& options = {});

}  // namespace refilter::nn

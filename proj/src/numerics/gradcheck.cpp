#include "refilter/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "refilter/errors.hpp"

namespace refilter::nn {
namespace {

double eval_loss(const std::function<Tensor()>& loss_fn) {
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw NumericError("gradient check: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, ParameterSet& params,
                                  const GradCheckOptions& options) {
  params.zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("gradient check: loss is not finite");
  loss.backward();

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (Parameter& p : params.items()) {
    if (options.trainable_only && !p.trainable) continue;
    const std::size_t n = p.tensor.numel();
    std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_param > 0 && n > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    auto values = p.tensor.mutable_values();
    for (std::size_t idx : coords) {
      const double orig = values[idx];
      values[idx] = orig + options.eps;
      const double up = eval_loss(loss_fn);
      values[idx] = orig - options.eps;
      const double down = eval_loss(loss_fn);
      values[idx] = orig;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        if (rel >= report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_param = p.name;
          report.worst_index = idx;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

}  // namespace refilter::nn

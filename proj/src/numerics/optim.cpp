#include "refilter/numerics/optim.hpp"

#include <algorithm>
#include <cmath>

#include "refilter/errors.hpp"

namespace refilter::nn {

Tensor& ParameterSet::add(const std::string& name, Tensor tensor, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  tensor.set_requires_grad(trainable);
  index_[name] = params_.size();
  params_.push_back({name, std::move(tensor), trainable});
  return params_.back().tensor;
}

void ParameterSet::append(const ParameterSet& other) {
  for (const Parameter& p : other.params_) {
    if (index_.count(p.name)) throw ConfigError("duplicate parameter name: " + p.name);
    index_[p.name] = params_.size();
    params_.push_back(p);
  }
}

bool ParameterSet::contains(const std::string& name) const { return index_.count(name) > 0; }

Parameter& ParameterSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second];
}

void ParameterSet::set_trainable_prefix(const std::string& prefix, bool trainable) {
  for (Parameter& p : params_) {
    if (p.name.rfind(prefix, 0) == 0) {
      p.trainable = trainable;
      p.tensor.set_requires_grad(trainable);
    }
  }
}

void ParameterSet::set_trainable_all(bool trainable) { set_trainable_prefix("", trainable); }

void ParameterSet::zero_grad() {
  for (Parameter& p : params_) p.tensor.clear_grad();
}

std::size_t ParameterSet::count_values(bool trainable_only) const {
  std::size_t n = 0;
  for (const Parameter& p : params_) {
    if (!trainable_only || p.trainable) n += p.tensor.numel();
  }
  return n;
}

double warmup_lr(const AdamWConfig& config, std::uint64_t step) {
  const double warm = config.warmup_fraction * static_cast<double>(config.total_steps);
  if (warm <= 0.0) return config.lr;
  return config.lr * std::min(1.0, static_cast<double>(step) / warm);
}

void adamw_step(ParameterSet& params, OptimizerState& state) {
  const AdamWConfig& c = state.config;
  for (const Parameter& p : params.items()) {
    if (p.trainable && !p.tensor.has_grad()) {
      throw TrainingError("trainable parameter '" + p.name + "' has no gradient");
    }
  }
  state.step += 1;
  const double lr = warmup_lr(c, state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (Parameter& p : params.items()) {
    if (!p.trainable) continue;
    auto values = p.tensor.mutable_values();
    const auto grad = p.tensor.grad();
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    if (m.size() != values.size()) m.assign(values.size(), 0.0);
    if (v.size() != values.size()) v.assign(values.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      values[i] -= lr * (mhat / (std::sqrt(vhat) + c.epsilon) + c.weight_decay * values[i]);
    }
  }
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter& p : params.items()) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter& p : params.items()) {
      if (!p.trainable || !p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace refilter::nn

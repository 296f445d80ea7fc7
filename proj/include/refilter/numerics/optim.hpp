#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "refilter/numerics/tensor.hpp"

namespace refilter::nn {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

// Ordered, name-unique collection of parameters. Frozen parameters keep
// requires_grad=false so forward passes through them record no tape.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor tensor, bool trainable = true);
  void append(const ParameterSet& other);  // shares tensors, names must stay unique

  const std::deque<Parameter>& items() const { return params_; }
  std::deque<Parameter>& items() { return params_; }
  std::size_t size() const { return params_.size(); }

  bool contains(const std::string& name) const;
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;

  // Marks every parameter whose name starts with prefix.
  void set_trainable_prefix(const std::string& prefix, bool trainable);
  void set_trainable_all(bool trainable);
  void zero_grad();
  std::size_t count_values(bool trainable_only) const;

 private:
  std::deque<Parameter> params_;  // stable references across add()
  std::map<std::string, std::size_t> index_;
};

struct AdamWConfig {
  double lr = 3e-4;
  double warmup_fraction = 0.05;
  std::size_t total_steps = 1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

// lr(t) = base * min(1, t / (warmup_fraction * total_steps)), t counted from 1.
double warmup_lr(const AdamWConfig& config, std::uint64_t step);

// One decoupled-weight-decay Adam step over trainable parameters. Throws
// TrainingError when a trainable parameter has no gradient.
void adamw_step(ParameterSet& params, OptimizerState& state);

// Scales trainable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

}  // namespace refilter::nn

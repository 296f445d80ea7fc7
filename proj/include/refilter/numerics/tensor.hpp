#pragma once

// Reverse-mode autodiff over a recorded operation graph. Each op result keeps
// shared handles to its inputs plus a backward closure; calling backward() on a
// scalar walks the graph in reverse topological order. A new graph is recorded
// on every forward pass. Ops whose inputs do not require gradients record
// nothing, so frozen computation costs no tape.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace refilter::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Allocates (zeroed) grad storage on first use and returns it.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  // Direct write access. Only valid on leaves (parameters, inputs) between passes.
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled span of numel() when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  // Sets the accumulator to zeros (present, all zero).
  void zero_grad();
  // Drops the accumulator entirely (has_grad() becomes false).
  void clear_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1 (self must hold one element) and propagates.
  void backward() const;

  // Value copy with no graph history.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

// Builds a result node; records parents and the backward closure only when one
// of the parents requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> parents,
                   std::function<void(Node&)> backward_fn);
Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                   std::function<void(Node&)> backward_fn);

}  // namespace refilter::nn

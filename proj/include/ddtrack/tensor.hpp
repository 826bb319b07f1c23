// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ddtrack::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;

/// Accumulates dL/d(input_i) into grad_in[i] given dL/d(output). Entries of
/// grad_in are null for inputs that do not take part in differentiation. The
/// node itself is passed in so rules can read their inputs and output.
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

/// One recorded operation. Leaves have no inputs and no backward rule.
struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<std::shared_ptr<const Node>> inputs;
  BackwardFn backward;
  const char* op = "leaf";
};

/// Dense row-major f64 tensor with optional gradient tracking.
///
/// A Tensor is a cheap handle; copies share the underlying node. Results of
/// operations are immutable. Only leaves (parameters) may be updated in place,
/// and only while no graph built from them is still being differentiated.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  /// In-place access for leaf tensors (optimizer steps, initialisation).
  std::span<double> mutable_data();

  /// Same values, cut from the graph.
  Tensor detach() const;

  const std::shared_ptr<const Node>& node() const { return node_; }

  /// Builds an op result. The node keeps its inputs and backward rule only when
  /// gradient recording is enabled and at least one input requires grad.
  static Tensor from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward,
                        const char* op);

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

/// Gradient recording is on by default; this guard turns it off for its scope
/// on the current thread (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse-mode gradients of a scalar `loss` with respect to `params`.
///
/// Returns one buffer per parameter, zero-filled when the loss does not reach
/// it. The graph is left intact, so calling this twice gives identical
/// results; nothing accumulates across calls.
std::vector<std::vector<double>> grad(const Tensor& loss, std::span<const Tensor> params);

}  // namespace ddtrack::ad

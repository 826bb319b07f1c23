// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "ddtrack/error.hpp"

namespace ddtrack::ad {
namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) shape = {1};
  for (auto extent : shape)
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  if (numel(shape) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node_ = std::move(node);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor of shape " + to_string(shape()));
  return node_->data[0];
}

std::span<double> Tensor::mutable_data() {
  if (!node_->inputs.empty()) throw InputError("mutable_data() is only allowed on leaf tensors");
  return const_cast<Node&>(*node_).data;
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward,
                       const char* op) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool track = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                       return t.defined() && t.requires_grad();
                     });
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

std::vector<std::vector<double>> grad(const Tensor& loss, std::span<const Tensor> params) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " + (loss.defined() ? to_string(loss.shape()) : "[]"));

  // Post-order DFS gives a topological order with inputs before consumers.
  std::vector<const Node*> order;
  std::unordered_map<const Node*, std::size_t> index;
  if (loss.requires_grad()) {
    std::vector<std::pair<const Node*, std::size_t>> stack{{loss.node().get(), 0}};
    index.emplace(loss.node().get(), SIZE_MAX);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const Node* child = node->inputs[next++].get();
        if (child->requires_grad && index.emplace(child, SIZE_MAX).second) stack.emplace_back(child, 0);
      } else {
        index[node] = order.size();
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::vector<bool> keep(order.size(), false);
  for (const auto& p : params) {
    auto it = index.find(p.node().get());
    if (it != index.end()) keep[it->second] = true;
  }

  std::vector<std::vector<double>> grads(order.size());
  if (!order.empty()) grads.back().assign(1, 1.0);
  std::vector<std::vector<double>*> sinks;
  for (std::size_t i = order.size(); i-- > 0;) {
    const Node* node = order[i];
    if (!node->backward || grads[i].empty()) continue;
    sinks.assign(node->inputs.size(), nullptr);
    for (std::size_t j = 0; j < node->inputs.size(); ++j) {
      const Node* in = node->inputs[j].get();
      if (!in->requires_grad) continue;
      auto& g = grads[index.at(in)];
      if (g.empty()) g.assign(in->data.size(), 0.0);
      sinks[j] = &g;
    }
    node->backward(*node, grads[i], sinks);
    if (!keep[i]) std::vector<double>().swap(grads[i]);
  }

  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    auto it = index.find(p.node().get());
    if (it == index.end() || grads[it->second].empty())
      out.emplace_back(p.size(), 0.0);
    else
      out.push_back(grads[it->second]);
  }
  return out;
}

}  // namespace ddtrack::ad

#pragma once

// Minimal reverse-mode autograd over dense float32 tensors.
//
// A Tensor is a shared handle to a Node. Operations in ops.hpp create new
// nodes and, while gradient recording is enabled and some input requires a
// gradient, remember their inputs and a backward closure. Tensor::backward()
// runs the closures in reverse topological order and then releases the graph.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bvit::nn {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  // Allocates (zeroed) gradient storage on demand.
  std::span<float> ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<float> values() { return node_->value; }
  std::span<const float> values() const { return node_->value; }
  float* data() { return node_->value.data(); }
  const float* data() const { return node_->value.data(); }
  float item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1 (self must hold one element) and propagates.
  void backward();

  // Same values, no graph history, new storage.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Gradient recording switch (thread local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Creates the result node of an operation. When recording, the node keeps
// `inputs` alive and runs `backward` during Tensor::backward().
Tensor make_result(Shape shape, std::vector<float> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward);
Tensor make_result(Shape shape, std::vector<float> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

}  // namespace bvit::nn

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace uwseg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

/// Backward closure of a recorded op: receives the output value and the
/// gradient flowing into it, and accumulates into the op's inputs.
using BackwardFn = std::function<void(std::span<const float> out, std::span<const float> grad_out)>;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves
};

struct Node {
  const char* op = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major float32 tensor with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage, which is how
/// modules and the parameter store refer to one weight. Ops that record
/// provenance create a node holding their inputs; the graph is released when
/// the last handle to its output goes away.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  /// Size of dimension `axis`; negative counts from the back.
  int64_t dim(int axis) const;
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }
  float* ptr() { return impl_->data.data(); }
  const float* ptr() const { return impl_->data.data(); }
  float at(int64_t flat) const { return impl_->data[static_cast<size_t>(flat)]; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first use.
  std::span<float> grad_accumulator();
  void zero_grad();

  /// Same values, no history, no gradient requirement.
  Tensor detach() const;
  /// Deep copy of values; the copy is a leaf.
  Tensor clone() const;

  /// Differentiable reshape (copies storage).
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(Shape shape, std::initializer_list<Tensor> inputs);
  friend Tensor make_result(Shape shape, const std::vector<Tensor>& inputs);
};

/// Global switch for recording provenance. Disabled during evaluation and
/// finite-difference probing.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Allocates an op output. It requires grad iff grad mode is on and any
/// input requires grad.
Tensor make_result(Shape shape, std::initializer_list<Tensor> inputs);
Tensor make_result(Shape shape, const std::vector<Tensor>& inputs);

/// Records `fn` as the backward of `out` if `out` requires grad.
void record(Tensor& out, const char* op, std::vector<Tensor> inputs, BackwardFn fn);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable tensor that requires grad.
void backward(const Tensor& loss);

}  // namespace uwseg

#include "uwseg/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "uwseg/errors.hpp"

namespace uwseg {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

thread_local bool grad_mode_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  validate_shape(shape);
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[static_cast<size_t>(a)];
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

std::span<float> Tensor::grad_accumulator() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::reshape(Shape shape) const {
  validate_shape(shape);
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  Tensor out = make_result(std::move(shape), {*this});
  std::copy(impl_->data.begin(), impl_->data.end(), out.impl_->data.begin());
  Tensor self = *this;
  record(out, "reshape", {self}, [self](std::span<const float>, std::span<const float> g) mutable {
    auto gx = self.grad_accumulator();
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
NoGradGuard::~NoGradGuard() { GradMode::set_enabled(previous_); }

Tensor make_result(Shape shape, std::initializer_list<Tensor> inputs) {
  return make_result(std::move(shape), std::vector<Tensor>(inputs));
}

Tensor make_result(Shape shape, const std::vector<Tensor>& inputs) {
  validate_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  impl->shape = std::move(shape);
  if (GradMode::enabled()) {
    for (const Tensor& t : inputs) {
      if (t.defined() && t.requires_grad()) {
        impl->requires_grad = true;
        break;
      }
    }
  }
  return Tensor(std::move(impl));
}

void record(Tensor& out, const char* op, std::vector<Tensor> inputs, BackwardFn fn) {
#ifndef NDEBUG
  for (float v : out.data()) {
    assert(std::isfinite(v) && "non-finite value produced by a forward op");
    (void)v;
  }
#endif
  if (!out.requires_grad()) return;
  auto node = std::make_shared<detail::Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(fn);
  out.impl()->node = std::move(node);
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not depend on any tensor requiring grad");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(loss.impl());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      detail::TensorImpl* child = impl->node->inputs[next++].impl();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  Tensor root = loss;
  root.grad_accumulator()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* impl = *it;
    if (!impl->node || impl->grad.empty()) continue;
    impl->node->backward(impl->data, impl->grad);
  }
}

}  // namespace uwseg

#include "uwseg/nn.hpp"

#include <cmath>

#include "uwseg/errors.hpp"
#include "uwseg/ops.hpp"

namespace uwseg::nn {

void ParameterStore::check_unique(const std::string& name) const {
  if (params_.count(name) || buffers_.count(name)) throw ContractError("duplicate parameter name: " + name);
}

Tensor ParameterStore::add_parameter(const std::string& name, Tensor value, bool decay) {
  check_unique(name);
  value.set_requires_grad(true);
  params_.emplace(name, value);
  decay_[name] = decay;
  return value;
}

Tensor ParameterStore::add_buffer(const std::string& name, Tensor value) {
  check_unique(name);
  buffers_.emplace(name, value);
  return value;
}

bool ParameterStore::decays(const std::string& name) const {
  auto it = decay_.find(name);
  return it != decay_.end() && it->second;
}

Tensor ParameterStore::parameter(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

bool ParameterStore::contains(const std::string& name) const { return params_.count(name) || buffers_.count(name); }

std::map<std::string, Tensor> ParameterStore::state() const {
  std::map<std::string, Tensor> out = params_;
  out.insert(buffers_.begin(), buffers_.end());
  return out;
}

int64_t ParameterStore::parameter_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

Tensor trunc_normal(Shape shape, float stddev, Rng& rng) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (float& x : v) x = static_cast<float>(rng.truncated_normal(stddev));
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor fan_out_normal(Shape shape, int64_t fan_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_out));
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (float& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::from(std::move(shape), std::move(v));
}

Linear::Linear(ParameterStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng, bool with_bias) {
  weight = store.add_parameter(name + ".weight", trunc_normal({out, in}, 0.02f, rng), true);
  if (with_bias) bias = store.add_parameter(name + ".bias", Tensor::zeros({out}), false);
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

Conv2d::Conv2d(ParameterStore& store, const std::string& name, int64_t in, int64_t out, int kernel, int stride_,
               int padding_, Rng& rng, bool with_bias, int64_t groups)
    : stride(stride_), padding(padding_) {
  if (groups != 1 && !(groups == in && in == out)) {
    throw ContractError("Conv2d " + name + ": only dense or depthwise grouping is supported");
  }
  depthwise = groups != 1;
  const int64_t fan_out = static_cast<int64_t>(kernel) * kernel * out / groups;
  Shape shape = depthwise ? Shape{out, 1, kernel, kernel} : Shape{out, in, kernel, kernel};
  weight = store.add_parameter(name + ".weight", fan_out_normal(std::move(shape), fan_out, rng), true);
  if (with_bias) bias = store.add_parameter(name + ".bias", Tensor::zeros({out}), false);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return depthwise ? ops::depthwise_conv2d(x, weight, bias, stride, padding)
                   : ops::conv2d(x, weight, bias, stride, padding);
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, int64_t channels) {
  gamma = store.add_parameter(name + ".weight", Tensor::full({channels}, 1.0f), false);
  beta = store.add_parameter(name + ".bias", Tensor::zeros({channels}), false);
}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

BatchNorm2d::BatchNorm2d(ParameterStore& store, const std::string& name, int64_t channels) {
  gamma = store.add_parameter(name + ".weight", Tensor::full({channels}, 1.0f), false);
  beta = store.add_parameter(name + ".bias", Tensor::zeros({channels}), false);
  running_mean = store.add_buffer(name + ".running_mean", Tensor::zeros({channels}));
  running_var = store.add_buffer(name + ".running_var", Tensor::full({channels}, 1.0f));
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) const {
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, training, momentum);
}

}  // namespace uwseg::nn

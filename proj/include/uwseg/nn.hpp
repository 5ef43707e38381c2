#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uwseg/random.hpp"
#include "uwseg/tensor.hpp"

namespace uwseg::nn {

/// Owns every named parameter and buffer of a model. Names are unique and
/// iterate in lexicographic order, which fixes the serialization layout.
class ParameterStore {
 public:
  /// Registers a trainable tensor. `decay` marks it for weight decay.
  Tensor add_parameter(const std::string& name, Tensor value, bool decay);
  /// Registers non-trainable state (batch-norm running statistics).
  Tensor add_buffer(const std::string& name, Tensor value);

  const std::map<std::string, Tensor>& parameters() const { return params_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  bool decays(const std::string& name) const;

  Tensor parameter(const std::string& name) const;
  bool contains(const std::string& name) const;

  /// Parameters followed by buffers, by name.
  std::map<std::string, Tensor> state() const;

  int64_t parameter_count() const;
  void zero_grad();

 private:
  void check_unique(const std::string& name) const;

  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> buffers_;
  std::map<std::string, bool> decay_;
};

/// Truncated normal (two sigma) with the given stddev.
Tensor trunc_normal(Shape shape, float stddev, Rng& rng);
/// Normal with stddev sqrt(2 / fan_out), fan_out = k*k*out/groups.
Tensor fan_out_normal(Shape shape, int64_t fan_out, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;

  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined
};

class Conv2d {
 public:
  Conv2d() = default;
  /// groups == in gives a depthwise convolution.
  Conv2d(ParameterStore& store, const std::string& name, int64_t in, int64_t out, int kernel, int stride, int padding,
         Rng& rng, bool bias = true, int64_t groups = 1);
  Tensor forward(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;
  bool depthwise = false;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, int64_t channels);
  Tensor forward(const Tensor& x) const;

  Tensor gamma;
  Tensor beta;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore& store, const std::string& name, int64_t channels);
  Tensor forward(const Tensor& x, bool training) const;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
};

}  // namespace uwseg::nn

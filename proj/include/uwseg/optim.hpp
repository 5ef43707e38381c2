#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "uwseg/nn.hpp"

namespace uwseg {

struct AdamWConfig {
  float lr = 6e-6f;
  float weight_decay = 0.01f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  /// Global gradient-norm clip; 0 disables clipping.
  float grad_clip = 0.0f;
};

/// base_lr * (1 - iter / max_iters)^power. Iterations past max_iters give 0
/// and print a warning to stderr. max_iters must be >= 1.
float poly_lr(int64_t iter, float base_lr, int64_t max_iters, float power = 1.0f);

/// AdamW with decoupled weight decay over every parameter of a store.
/// Parameters the store marks as non-decaying (norms, biases) skip the decay.
class AdamW {
 public:
  AdamW(nn::ParameterStore& store, const AdamWConfig& cfg);

  /// One update at learning rate `lr`. Throws ContractError naming the first
  /// trainable parameter that has no gradient.
  void step(float lr);

  int64_t steps() const { return steps_; }
  void set_steps(int64_t steps) { steps_ = steps; }
  const AdamWConfig& config() const { return cfg_; }

  /// Moment buffers keyed by parameter name.
  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }

  /// L2 norm of the gradient that the most recent step consumed (before clipping).
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  nn::ParameterStore& store_;
  AdamWConfig cfg_;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
  int64_t steps_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace uwseg

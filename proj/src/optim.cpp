#include "uwseg/optim.hpp"

#include <cmath>
#include <iostream>

#include "uwseg/errors.hpp"

namespace uwseg {

float poly_lr(int64_t iter, float base_lr, int64_t max_iters, float power) {
  if (max_iters < 1) throw ConfigError("schedule.max_iters must be >= 1");
  if (iter < 0) throw ContractError("poly_lr: negative iteration " + std::to_string(iter));
  if (iter > max_iters) {
    std::cerr << "warning: poly_lr iteration " << iter << " is past max_iters " << max_iters << ", using lr 0\n";
    return 0.0f;
  }
  if (iter == max_iters) return 0.0f;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iters);
  return static_cast<float>(static_cast<double>(base_lr) * std::pow(frac, static_cast<double>(power)));
}

AdamW::AdamW(nn::ParameterStore& store, const AdamWConfig& cfg) : store_(store), cfg_(cfg) {
  for (const auto& [name, p] : store_.parameters()) {
    m_.emplace(name, Tensor::zeros(p.shape()));
    v_.emplace(name, Tensor::zeros(p.shape()));
  }
}

void AdamW::step(float lr) {
  double sq = 0.0;
  for (const auto& [name, p] : store_.parameters()) {
    if (!p.requires_grad()) continue;
    if (!p.has_grad()) throw ContractError("AdamW: parameter " + name + " has no gradient");
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  last_grad_norm_ = std::sqrt(sq);
  float clip_scale = 1.0f;
  if (cfg_.grad_clip > 0.0f && last_grad_norm_ > cfg_.grad_clip) {
    clip_scale = static_cast<float>(cfg_.grad_clip / last_grad_norm_);
  }

  ++steps_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(steps_));
  const float b1 = cfg_.beta1, b2 = cfg_.beta2;
  for (const auto& [name, param] : store_.parameters()) {
    if (!param.requires_grad()) continue;
    Tensor p = param;
    float* w = p.ptr();
    const auto g = p.grad();
    float* m = m_.at(name).ptr();
    float* v = v_.at(name).ptr();
    const float decay = store_.decays(name) ? 1.0f - lr * cfg_.weight_decay : 1.0f;
    const float step_size = static_cast<float>(static_cast<double>(lr) / bc1);
    const float inv_bc2_sqrt = static_cast<float>(1.0 / std::sqrt(bc2));
    for (int64_t i = 0; i < p.numel(); ++i) {
      const float gi = g[static_cast<size_t>(i)] * clip_scale;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      w[i] *= decay;
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_bc2_sqrt + cfg_.eps);
    }
  }
}

}  // namespace uwseg

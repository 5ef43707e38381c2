#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "uwseg/data.hpp"
#include "uwseg/metrics.hpp"
#include "uwseg/model.hpp"

namespace uwseg {

/// Eval-mode confusion over a dataset, batched, without recording gradients.
/// With `band_radius` > 0 only pixels inside the ground-truth boundary band count.
ConfusionMatrix evaluate(Model& model, const Dataset& data, int64_t batch_size = 4, int band_radius = 0);

/// Eval-mode logits for normalized images, without recording gradients.
Tensor predict(Model& model, const Tensor& images);

/// Like predict, but any H, W: reflect-pads to the model's size multiple and
/// crops the logits back.
Tensor predict_padded(Model& model, const Tensor& images);

struct CostReport {
  int64_t params = 0;
  /// Parameter counts keyed by top-level module ("encoder", "uiqa", "decoder").
  std::map<std::string, int64_t> params_by_module;
  int64_t flops = 0;
  /// FLOPs keyed by scope path truncated to the requested depth.
  std::map<std::string, int64_t> flops_by_module;
  int64_t height = 0;
  int64_t width = 0;
  int64_t batch = 1;
};

/// Sum of parameter element counts, with a per-module breakdown.
CostReport count_params(const nn::ParameterStore& store);

/// Analytic FLOPs of one eval-mode forward at [batch, 3, h, w], plus the
/// parameter count. `depth` selects how many scope levels the breakdown keeps.
CostReport count_flops(Model& model, int64_t h, int64_t w, int64_t batch = 1, int depth = 1);

struct FpsReport {
  double images_per_second = 0.0;  // median over trials
  std::vector<double> trials;
  std::string hardware;
};

/// Median throughput of `fn`, which processes `images_per_call` images per call.
FpsReport measure_fps(const std::function<void()>& fn, int64_t images_per_call, int warmup = 1, int trials = 5);
/// Eval-mode model throughput at [batch, 3, h, w].
FpsReport measure_fps(Model& model, int64_t h, int64_t w, int64_t batch = 1, int warmup = 1, int trials = 5);

/// CPU model name and thread count, for reports.
std::string hardware_string();

}  // namespace uwseg

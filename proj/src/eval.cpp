#include "uwseg/eval.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <thread>

#include "uwseg/errors.hpp"
#include "uwseg/flops.hpp"

namespace uwseg {

namespace {

class EvalModeGuard {
 public:
  explicit EvalModeGuard(Model& m) : model_(m), previous_(m.training()) { model_.set_training(false); }
  ~EvalModeGuard() { model_.set_training(previous_); }

 private:
  Model& model_;
  bool previous_;
};

}  // namespace

Tensor predict(Model& model, const Tensor& images) {
  EvalModeGuard mode(model);
  NoGradGuard no_grad;
  return model.forward(images);
}

Tensor predict_padded(Model& model, const Tensor& images) {
  if (images.rank() != 4) throw ShapeError("predict_padded: expected [B, 3, H, W], got " + shape_str(images.shape()));
  const int64_t m = model.config().size_multiple();
  const int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const int64_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  if (ph == h && pw == w) return predict(model, images);
  if (ph - h >= h || pw - w >= w) {
    throw ShapeError("predict_padded: " + std::to_string(h) + "x" + std::to_string(w) +
                     " is too small to reflect-pad to a multiple of " + std::to_string(m));
  }
  // Reflection without repeating the edge pixel: index h maps to h - 2.
  auto reflect = [](int64_t i, int64_t n) { return i < n ? i : 2 * (n - 1) - i; };
  Tensor padded = Tensor::zeros({b, c, ph, pw});
  float* dst = padded.ptr();
  const float* src = images.ptr();
  for (int64_t p = 0; p < b * c; ++p)
    for (int64_t y = 0; y < ph; ++y)
      for (int64_t x = 0; x < pw; ++x) dst[(p * ph + y) * pw + x] = src[(p * h + reflect(y, h)) * w + reflect(x, w)];
  const Tensor logits = predict(model, padded);
  const int64_t k = logits.dim(1);
  Tensor out = Tensor::zeros({b, k, h, w});
  for (int64_t p = 0; p < b * k; ++p)
    for (int64_t y = 0; y < h; ++y)
      std::copy_n(logits.ptr() + (p * ph + y) * pw, w, out.ptr() + (p * h + y) * w);
  return out;
}

ConfusionMatrix evaluate(Model& model, const Dataset& data, int64_t batch_size, int band_radius) {
  if (data.n_cls() != model.config().n_cls) {
    throw ConfigError("dataset has " + std::to_string(data.n_cls()) + " classes but the model predicts " +
                      std::to_string(model.config().n_cls));
  }
  ConfusionMatrix cm(model.config().n_cls);
  for (int64_t start = 0; start < data.size(); start += batch_size) {
    std::vector<Sample> chunk;
    for (int64_t i = start; i < std::min(data.size(), start + batch_size); ++i) chunk.push_back(data[i]);
    const Batch batch = make_batch(chunk);
    const std::vector<LabelMap> pred = argmax(predict(model, batch.images));
    for (size_t i = 0; i < pred.size(); ++i) {
      const LabelMap& gt = batch.labels[i];
      cm.accumulate(pred[i], band_radius > 0 ? boundary_band(gt, cm.n_cls(), band_radius) : gt);
    }
  }
  return cm;
}

CostReport count_params(const nn::ParameterStore& store) {
  CostReport r;
  for (const auto& [name, t] : store.parameters()) {
    r.params += t.numel();
    r.params_by_module[name.substr(0, name.find('.'))] += t.numel();
  }
  return r;
}

CostReport count_flops(Model& model, int64_t h, int64_t w, int64_t batch, int depth) {
  CostReport r = count_params(model.store());
  r.height = h;
  r.width = w;
  r.batch = batch;
  flops::Counter counter;
  predict(model, Tensor::zeros({batch, 3, h, w}));
  r.flops = counter.total();
  r.flops_by_module = counter.aggregated(depth);
  return r;
}

FpsReport measure_fps(const std::function<void()>& fn, int64_t images_per_call, int warmup, int trials) {
  if (trials < 1) throw ContractError("measure_fps: trials must be >= 1");
  for (int i = 0; i < warmup; ++i) fn();
  FpsReport r;
  r.hardware = hardware_string();
  for (int i = 0; i < trials; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.trials.push_back(static_cast<double>(images_per_call) / std::max(s, 1e-9));
  }
  std::vector<double> sorted = r.trials;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  r.images_per_second = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return r;
}

FpsReport measure_fps(Model& model, int64_t h, int64_t w, int64_t batch, int warmup, int trials) {
  const Tensor input = Tensor::zeros({batch, 3, h, w});
  return measure_fps([&] { predict(model, input); }, batch, warmup, trials);
}

std::string hardware_string() {
  std::string cpu = "unknown CPU";
  std::ifstream info("/proc/cpuinfo");
  std::string line;
  while (std::getline(info, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads";
}

}  // namespace uwseg

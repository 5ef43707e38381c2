#include "uwseg/metrics.hpp"

#include <cmath>
#include <limits>

#include "uwseg/errors.hpp"
#include "uwseg/loss.hpp"

namespace uwseg {

ConfusionMatrix::ConfusionMatrix(int64_t n_cls) : n_cls_(n_cls) {
  if (n_cls < 1) throw ContractError("ConfusionMatrix: n_cls must be >= 1");
  counts_.assign(static_cast<size_t>(n_cls * n_cls), 0);
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt, int32_t ignore_index) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("confusion: prediction is " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     ", ground truth is " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  const auto bad = [](const char* what, int32_t v, int64_t y, int64_t x) {
    return ContractError(std::string("confusion: ") + what + " label " + std::to_string(v) + " out of range at (x=" +
                         std::to_string(x) + ", y=" + std::to_string(y) + ")");
  };
  for (int64_t y = 0; y < gt.height; ++y) {
    for (int64_t x = 0; x < gt.width; ++x) {
      const int32_t g = gt.at(y, x);
      if (g == ignore_index) continue;
      const int32_t p = pred.at(y, x);
      if (g < 0 || g >= n_cls_) throw bad("ground-truth", g, y, x);
      if (p < 0 || p >= n_cls_) throw bad("predicted", p, y, x);
      ++counts_[static_cast<size_t>(g * n_cls_ + p)];
    }
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_cls_ != n_cls_) throw ContractError("confusion merge: class counts differ");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (int64_t c : counts_) t += c;
  return t;
}

IouReport miou(const ConfusionMatrix& cm) {
  const int64_t k = cm.n_cls();
  IouReport r;
  r.per_class.assign(static_cast<size_t>(k), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int64_t counted = 0;
  for (int64_t c = 0; c < k; ++c) {
    int64_t row = 0, col = 0;
    for (int64_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const int64_t diag = cm.at(c, c);
    const int64_t uni = row + col - diag;
    if (uni == 0) continue;
    r.per_class[static_cast<size_t>(c)] = static_cast<double>(diag) / static_cast<double>(uni);
    sum += r.per_class[static_cast<size_t>(c)];
    ++counted;
  }
  if (counted == 0) throw MetricError("mIoU undefined: no class appears in prediction or ground truth");
  r.mean = sum / static_cast<double>(counted);
  return r;
}

std::vector<LabelMap> argmax(const Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax: expected [B, K, H, W], got " + shape_str(logits.shape()));
  const int64_t b = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const float* p = logits.ptr();
  std::vector<LabelMap> out;
  for (int64_t n = 0; n < b; ++n) {
    LabelMap m(h, w);
    for (int64_t i = 0; i < h * w; ++i) {
      int32_t best = 0;
      float best_v = p[(n * k) * h * w + i];
      for (int64_t c = 1; c < k; ++c) {
        const float v = p[(n * k + c) * h * w + i];
        if (v > best_v) {
          best_v = v;
          best = static_cast<int32_t>(c);
        }
      }
      m.values[static_cast<size_t>(i)] = best;
    }
    out.push_back(std::move(m));
  }
  return out;
}

LabelMap boundary_band(const LabelMap& gt, int64_t n_cls, int radius) {
  const OneHot oh = one_hot({gt}, n_cls);
  const Tensor edges = morph_edge_gt(oh.planes, radius);
  LabelMap out = gt;
  const int64_t plane = gt.size();
  for (int64_t i = 0; i < plane; ++i) {
    bool in_band = false;
    for (int64_t c = 0; c < n_cls && !in_band; ++c) in_band = edges.at(c * plane + i) > 0.5f;
    if (!in_band) out.values[static_cast<size_t>(i)] = kIgnoreIndex;
  }
  return out;
}

}  // namespace uwseg

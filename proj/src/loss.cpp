#include "uwseg/loss.hpp"

#include <algorithm>
#include <cmath>

#include "uwseg/errors.hpp"
#include "uwseg/ops.hpp"

namespace uwseg {

OneHot one_hot(const std::vector<LabelMap>& labels, int64_t n_cls) {
  if (labels.empty()) throw ContractError("one_hot: empty batch");
  const int64_t h = labels[0].height, w = labels[0].width;
  const int64_t b = static_cast<int64_t>(labels.size());
  OneHot out;
  out.planes = Tensor::zeros({b, n_cls, h, w});
  bool any_ignored = false;
  float* p = out.planes.ptr();
  for (int64_t n = 0; n < b; ++n) {
    const LabelMap& lm = labels[static_cast<size_t>(n)];
    if (lm.height != h || lm.width != w) throw ShapeError("one_hot: label maps in a batch differ in size");
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const int32_t c = lm.at(y, x);
        if (c == kIgnoreIndex) {
          any_ignored = true;
          continue;
        }
        if (c < 0 || c >= n_cls) {
          throw ContractError("one_hot: label " + std::to_string(c) + " at (x=" + std::to_string(x) + ", y=" +
                              std::to_string(y) + ") outside [0, " + std::to_string(n_cls) + ")");
        }
        p[((n * n_cls + c) * h + y) * w + x] = 1.0f;
      }
    }
  }
  if (any_ignored) {
    out.valid = Tensor::full({b, n_cls, h, w}, 1.0f);
    float* v = out.valid.ptr();
    for (int64_t n = 0; n < b; ++n) {
      const LabelMap& lm = labels[static_cast<size_t>(n)];
      for (int64_t i = 0; i < h * w; ++i) {
        if (lm.values[static_cast<size_t>(i)] != kIgnoreIndex) continue;
        for (int64_t c = 0; c < n_cls; ++c) v[(n * n_cls + c) * h * w + i] = 0.0f;
      }
    }
  }
  return out;
}

Tensor scharr_edges(const Tensor& probs) {
  static const float kNorm = static_cast<float>(1.0 / (16.0 * std::sqrt(2.0)));
  auto [gx, gy] = ops::scharr(probs);
  Tensor magnitude = ops::sqrt(ops::add(ops::square(gx), ops::square(gy)), "scharr_edges");
  return ops::clamp(ops::scale(magnitude, kNorm), 0.0f, std::nextafter(1.0f, 0.0f));
}

namespace {

// One 3x3-cross step over a binary plane. Dilation ignores outside pixels;
// erosion treats them as equal to the centre.
void cross_step(const std::vector<uint8_t>& in, std::vector<uint8_t>& out, int64_t h, int64_t w, bool dilate) {
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const uint8_t c = in[static_cast<size_t>(y * w + x)];
      uint8_t v = c;
      const int64_t ny[4] = {y - 1, y + 1, y, y};
      const int64_t nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
        const uint8_t n = in[static_cast<size_t>(ny[k] * w + nx[k])];
        v = dilate ? std::max(v, n) : std::min(v, n);
      }
      out[static_cast<size_t>(y * w + x)] = v;
    }
  }
}

}  // namespace

Tensor morph_edge_gt(const Tensor& onehot, int radius) {
  if (onehot.rank() < 2) throw ShapeError("morph_edge_gt: expected [..., H, W], got " + shape_str(onehot.shape()));
  if (radius < 0) throw ContractError("morph_edge_gt: radius must be >= 0");
  for (float v : onehot.data()) {
    if (v != 0.0f && v != 1.0f) throw ContractError("morph_edge_gt: input is not binary (value " + std::to_string(v) + ")");
  }
  const int64_t h = onehot.dim(-2), w = onehot.dim(-1);
  const int64_t planes = onehot.numel() / (h * w);
  Tensor out = Tensor::zeros(onehot.shape());
  std::vector<uint8_t> base(static_cast<size_t>(h * w)), dil, ero, tmp(static_cast<size_t>(h * w));
  for (int64_t p = 0; p < planes; ++p) {
    const float* src = onehot.ptr() + p * h * w;
    for (int64_t i = 0; i < h * w; ++i) base[static_cast<size_t>(i)] = src[i] != 0.0f;
    dil = base;
    ero = base;
    for (int r = 0; r < radius; ++r) {
      cross_step(dil, tmp, h, w, true);
      dil.swap(tmp);
      cross_step(ero, tmp, h, w, false);
      ero.swap(tmp);
    }
    float* dst = out.ptr() + p * h * w;
    for (int64_t i = 0; i < h * w; ++i) dst[i] = static_cast<float>(dil[static_cast<size_t>(i)] - ero[static_cast<size_t>(i)]);
  }
  return out;
}

LossParts total_loss(const Tensor& logits, const OneHot& target, const LossWeights& w, int radius) {
  if (logits.rank() != 4 || target.planes.rank() != 4) {
    throw ShapeError("total_loss: expected [B, K, H, W] logits and targets");
  }
  if (logits.dim(1) != target.planes.dim(1)) {
    throw ConfigError("total_loss: prediction has " + std::to_string(logits.dim(1)) + " classes, ground truth has " +
                      std::to_string(target.planes.dim(1)));
  }
  if (logits.shape() != target.planes.shape()) {
    throw ShapeError("total_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(target.planes.shape()));
  }
  if (w.lambda1 < 0.0f || w.lambda2 < 0.0f) throw ConfigError("total_loss: loss weights must be nonnegative");
  Tensor probs = ops::sigmoid(logits);
  Tensor edge_gt = morph_edge_gt(target.planes, radius);
  LossParts parts;
  parts.edge = ops::bce(scharr_edges(probs), edge_gt, 1e-7f, target.valid);
  parts.mask = ops::bce(probs, target.planes, 1e-7f, target.valid);
  parts.total = ops::add(ops::scale(parts.edge, w.lambda1), ops::scale(parts.mask, w.lambda2));
  return parts;
}

}  // namespace uwseg

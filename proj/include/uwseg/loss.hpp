#pragma once

#include <vector>

#include "uwseg/labels.hpp"
#include "uwseg/tensor.hpp"

namespace uwseg {

struct LossWeights {
  float lambda1 = 1.0f;  // edge term
  float lambda2 = 3.0f;  // mask term
};

struct LossParts {
  Tensor total;
  Tensor edge;
  Tensor mask;
};

/// One-hot planes [B, n_cls, H, W] of a label batch, with a validity mask of
/// the same shape (undefined when no pixel carries kIgnoreIndex).
struct OneHot {
  Tensor planes;
  Tensor valid;
};

/// Throws ContractError for labels outside [0, n_cls) other than kIgnoreIndex,
/// ShapeError when maps in the batch differ in size.
OneHot one_hot(const std::vector<LabelMap>& labels, int64_t n_cls);

/// Normalized Scharr edge magnitude of probability maps [B, K, H, W]:
/// sqrt(gx^2 + gy^2) / (16 sqrt 2), clamped to [0, 1). Replicate padding.
Tensor scharr_edges(const Tensor& probs);

/// Morphological gradient (dilation minus erosion) per class plane with a 3x3
/// cross applied `radius` times. Input must be binary (ContractError otherwise).
/// Erosion treats out-of-image neighbours as equal to the centre, so constant
/// planes have no edges.
Tensor morph_edge_gt(const Tensor& onehot, int radius = 1);

/// L = lambda1 * BCE(E, G_e) + lambda2 * BCE(sigmoid(logits), G).
/// ConfigError when the class counts differ, ShapeError on spatial mismatch.
LossParts total_loss(const Tensor& logits, const OneHot& target, const LossWeights& w = {}, int radius = 1);

}  // namespace uwseg

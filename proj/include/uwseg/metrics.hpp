#pragma once

#include <cstdint>
#include <vector>

#include "uwseg/labels.hpp"
#include "uwseg/tensor.hpp"

namespace uwseg {

/// Pixel confusion counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int64_t n_cls);

  /// Adds every pixel pair. Ground-truth pixels equal to `ignore_index` are
  /// skipped. Other values outside [0, n_cls) raise ContractError with the
  /// coordinate; ShapeError when the maps differ in size.
  void accumulate(const LabelMap& pred, const LabelMap& gt, int32_t ignore_index = kIgnoreIndex);
  /// Adds another matrix of the same size (parallel shards).
  void merge(const ConfusionMatrix& other);

  int64_t n_cls() const { return n_cls_; }
  int64_t at(int64_t gt, int64_t pred) const { return counts_[static_cast<size_t>(gt * n_cls_ + pred)]; }
  int64_t total() const;

 private:
  int64_t n_cls_;
  std::vector<int64_t> counts_;
};

struct IouReport {
  /// NaN for classes absent from both prediction and ground truth.
  std::vector<double> per_class;
  /// Mean over classes with a non-empty union.
  double mean = 0.0;
};

/// IoU_c = diag / (row + col - diag). Throws MetricError when every union is empty.
IouReport miou(const ConfusionMatrix& cm);

/// Per-pixel argmax over axis 1 of [B, K, H, W] logits; ties go to the lower class.
std::vector<LabelMap> argmax(const Tensor& logits);

/// Copy of `gt` with every pixel outside the morphological-gradient band of
/// its class planes (3x3 cross applied `radius` times) set to ignore.
LabelMap boundary_band(const LabelMap& gt, int64_t n_cls, int radius = 2);

}  // namespace uwseg

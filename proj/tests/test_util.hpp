#pragma once

#include <vector>

#include "uwseg/labels.hpp"
#include "uwseg/random.hpp"
#include "uwseg/tensor.hpp"

namespace uwseg::test {

inline Tensor random_tensor(Shape shape, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Rng rng(seed);
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::from(std::move(shape), std::move(v));
}

inline LabelMap random_labels(int64_t h, int64_t w, int32_t n_cls, uint64_t seed) {
  Rng rng(seed);
  LabelMap m(h, w);
  for (int32_t& v : m.values) v = static_cast<int32_t>(rng.below(static_cast<uint64_t>(n_cls)));
  return m;
}

/// Owning copy of the values, safe to iterate over a temporary tensor.
inline std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace uwseg::test

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "uwseg/tensor.hpp"

namespace uwseg {

struct GradCheckOptions {
  float h = 1e-3f;
  /// Upper bound on probed coordinates per tensor; 0 probes all of them.
  /// Sampled coordinates are drawn without replacement from `seed`.
  int64_t max_coords = 0;
  uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int64_t probed = 0;
  /// Tensor index and flat coordinate of the worst entry.
  size_t worst_tensor = 0;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of the scalar `f()` with respect to each
/// tensor in `wrt` against central differences. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|); the maximum is reported.
/// Throws ContractError if two evaluations of f at the same point differ.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt, const GradCheckOptions& opt = {});

/// Single-input form: f is applied to x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, float h = 1e-3f);

}  // namespace uwseg

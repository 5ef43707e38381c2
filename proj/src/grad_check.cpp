#include "uwseg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "uwseg/errors.hpp"
#include "uwseg/random.hpp"

namespace uwseg {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  Tensor y = f();
  if (y.numel() != 1) throw ContractError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
  return y.item();
}

std::vector<int64_t> pick_coords(int64_t n, int64_t max_coords, Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (max_coords <= 0 || max_coords >= n) return idx;
  for (int64_t i = 0; i < max_coords; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(max_coords));
  return idx;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt, const GradCheckOptions& opt) {
  std::vector<bool> previous;
  for (Tensor& t : wrt) {
    previous.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }

  Tensor y = f();
  if (y.numel() != 1) throw ContractError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
  const float y0 = y.item();
  backward(y);
  y = Tensor();

  const double again = evaluate(f);
  if (static_cast<float>(again) != y0) {
    throw ContractError("grad_check: function is not deterministic (" + std::to_string(y0) + " vs " +
                        std::to_string(again) + ")");
  }

  GradCheckResult res;
  Rng rng(opt.seed);
  for (size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor& t = wrt[ti];
    std::vector<float> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<size_t>(t.numel()), 0.0f);
    for (int64_t i : pick_coords(t.numel(), opt.max_coords, rng)) {
      float& v = t.mutable_data()[static_cast<size_t>(i)];
      const float orig = v;
      v = orig + opt.h;
      const double fp = evaluate(f);
      v = orig - opt.h;
      const double fm = evaluate(f);
      v = orig;
      // Divide by the realized step so float rounding of orig +- h does not bias the estimate.
      const double step = static_cast<double>(orig + opt.h) - static_cast<double>(orig - opt.h);
      const double numeric = (fp - fm) / step;
      const double a = analytic[static_cast<size_t>(i)];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++res.probed;
      if (err > res.max_rel_error || res.worst_index < 0) {
        res.max_rel_error = std::max(res.max_rel_error, err);
        res.worst_tensor = ti;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  for (size_t ti = 0; ti < wrt.size(); ++ti) {
    wrt[ti].zero_grad();
    wrt[ti].set_requires_grad(previous[ti]);
  }
  return res;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, float h) {
  GradCheckOptions opt;
  opt.h = h;
  return grad_check([&] { return f(x); }, {x}, opt).max_rel_error;
}

}  // namespace uwseg

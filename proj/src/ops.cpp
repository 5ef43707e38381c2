#include "uwseg/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "uwseg/errors.hpp"
#include "uwseg/flops.hpp"

namespace uwseg::ops {

namespace {

// Gradient buffer of `t`, or an empty span when `t` takes no gradient.
std::span<float> grad_of(Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.grad_accumulator();
}

// Row-major C[m, n] = op(A) op(B) + beta C.
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const float* a, const float* b, float beta,
          float* c) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0f, a, static_cast<int>(ta ? m : k), b,
              static_cast<int>(tb ? k : n), beta, c, static_cast<int>(n));
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return a;
}

int64_t prod(const Shape& s, size_t begin, size_t end) {
  int64_t n = 1;
  for (size_t i = begin; i < end; ++i) n *= s[i];
  return n;
}

// ---- generic unary ---------------------------------------------------------

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor out = make_result(x.shape(), {x});
  const float* xp = x.ptr();
  float* yp = out.ptr();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = fwd(xp[i]);
  flops::add(n);
  Tensor xc = x;
  record(out, name, {xc}, [xc, deriv](std::span<const float> y, std::span<const float> g) mutable {
    auto gx = grad_of(xc);
    if (gx.empty()) return;
    const float* xp2 = xc.ptr();
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xp2[i], y[i]);
  });
  return out;
}

// ---- broadcasting ------------------------------------------------------------

struct Broadcast {
  Shape out;
  bool a_is_big = true;
  std::vector<int64_t> small_stride;  // per output axis, stride into the small operand (0 if expanded)
};

bool broadcastable(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  const size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i) {
    if (small[i] != 1 && small[i] != big[off + i]) return false;
  }
  return true;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast plan;
  if (broadcastable(a, b)) {
    plan.out = a;
    plan.a_is_big = true;
  } else if (broadcastable(b, a)) {
    plan.out = b;
    plan.a_is_big = false;
  } else {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
  }
  const Shape& small = plan.a_is_big ? b : a;
  const size_t rank = plan.out.size();
  const size_t off = rank - small.size();
  plan.small_stride.assign(rank, 0);
  int64_t stride = 1;
  for (size_t i = small.size(); i-- > 0;) {
    plan.small_stride[off + i] = small[i] == 1 ? 0 : stride;
    stride *= small[i];
  }
  return plan;
}

// Calls f(out_index, small_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& plan, F f) {
  const size_t rank = plan.out.size();
  const int64_t n = shape_numel(plan.out);
  std::vector<int64_t> idx(rank, 0);
  int64_t s = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, s);
    for (size_t d = rank; d-- > 0;) {
      ++idx[d];
      s += plan.small_stride[d];
      if (idx[d] < plan.out[d]) break;
      s -= plan.small_stride[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const float sign = op == BinOp::sub ? -1.0f : 1.0f;
  if (a.shape() == b.shape()) {
    Tensor out = make_result(a.shape(), {a, b});
    const float* ap = a.ptr();
    const float* bp = b.ptr();
    float* yp = out.ptr();
    const int64_t n = a.numel();
    if (op == BinOp::mul) {
      for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] * bp[i];
    } else if (op == BinOp::add) {
      for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] + bp[i];
    } else {
      for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] - bp[i];
    }
    flops::add(n);
    Tensor ac = a, bc = b;
    record(out, name, {ac, bc}, [ac, bc, op, sign](std::span<const float>, std::span<const float> g) mutable {
      auto ga = grad_of(ac);
      auto gb = grad_of(bc);
      const size_t n2 = g.size();
      if (op == BinOp::mul) {
        if (!ga.empty()) {
          const float* bp2 = bc.ptr();
          for (size_t i = 0; i < n2; ++i) ga[i] += g[i] * bp2[i];
        }
        if (!gb.empty()) {
          const float* ap2 = ac.ptr();
          for (size_t i = 0; i < n2; ++i) gb[i] += g[i] * ap2[i];
        }
      } else {
        if (!ga.empty()) {
          for (size_t i = 0; i < n2; ++i) ga[i] += g[i];
        }
        if (!gb.empty()) {
          for (size_t i = 0; i < n2; ++i) gb[i] += sign * g[i];
        }
      }
    });
    return out;
  }

  Broadcast plan = plan_broadcast(a.shape(), b.shape(), name);
  Tensor out = make_result(plan.out, {a, b});
  const Tensor& big = plan.a_is_big ? a : b;
  const Tensor& small = plan.a_is_big ? b : a;
  const float* bigp = big.ptr();
  const float* smallp = small.ptr();
  float* yp = out.ptr();
  for_each_broadcast(plan, [&](int64_t i, int64_t s) {
    const float av = plan.a_is_big ? bigp[i] : smallp[s];
    const float bv = plan.a_is_big ? smallp[s] : bigp[i];
    yp[i] = op == BinOp::mul ? av * bv : (op == BinOp::add ? av + bv : av - bv);
  });
  flops::add(out.numel());
  Tensor ac = a, bc = b;
  record(out, name, {ac, bc}, [ac, bc, op, sign, plan](std::span<const float>, std::span<const float> g) mutable {
    auto ga = grad_of(ac);
    auto gb = grad_of(bc);
    Tensor& bigt = plan.a_is_big ? ac : bc;
    Tensor& smallt = plan.a_is_big ? bc : ac;
    auto gbig = plan.a_is_big ? ga : gb;
    auto gsmall = plan.a_is_big ? gb : ga;
    const float big_sign = plan.a_is_big ? 1.0f : sign;
    const float small_sign = plan.a_is_big ? sign : 1.0f;
    const float* bigp2 = bigt.ptr();
    const float* smallp2 = smallt.ptr();
    for_each_broadcast(plan, [&](int64_t i, int64_t s) {
      if (op == BinOp::mul) {
        if (!gbig.empty()) gbig[i] += g[i] * smallp2[s];
        if (!gsmall.empty()) gsmall[s] += g[i] * bigp2[i];
      } else {
        if (!gbig.empty()) gbig[i] += big_sign * g[i];
        if (!gsmall.empty()) gsmall[s] += small_sign * g[i];
      }
    });
  });
  return out;
}

// ---- row normalization shared by layer / instance norm -----------------------

struct RowStats {
  std::vector<float> mean;
  std::vector<float> rstd;
};

RowStats normalize_rows(const float* x, float* y, int64_t rows, int64_t cols, float eps) {
  RowStats st;
  st.mean.resize(static_cast<size_t>(rows));
  st.rstd.resize(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) s += xr[c];
    const double mu = s / static_cast<double>(cols);
    double v = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double d = xr[c] - mu;
      v += d * d;
    }
    v /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(v + eps);
    st.mean[static_cast<size_t>(r)] = static_cast<float>(mu);
    st.rstd[static_cast<size_t>(r)] = static_cast<float>(rs);
    float* yr = y + r * cols;
    for (int64_t c = 0; c < cols; ++c) yr[c] = static_cast<float>((xr[c] - mu) * rs);
  }
  return st;
}

// dx for y = (x - mean) * rstd given dy/dxhat per row.
void normalize_rows_backward(const float* x, const float* dxhat, const RowStats& st, float* dx, int64_t rows,
                             int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    const float* dr = dxhat + r * cols;
    const double mu = st.mean[static_cast<size_t>(r)];
    const double rs = st.rstd[static_cast<size_t>(r)];
    double sum_d = 0.0, sum_dx = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double xh = (xr[c] - mu) * rs;
      sum_d += dr[c];
      sum_dx += dr[c] * xh;
    }
    const double md = sum_d / static_cast<double>(cols);
    const double mdx = sum_dx / static_cast<double>(cols);
    float* out = dx + r * cols;
    for (int64_t c = 0; c < cols; ++c) {
      const double xh = (xr[c] - mu) * rs;
      out[c] += static_cast<float>(rs * (dr[c] - md - xh * mdx));
    }
  }
}

}  // namespace

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  auto fail = [&]() {
    return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + (transpose_a ? "^T" : "") + " and " +
                      shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  };
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3) throw fail();
  const int64_t a_batch = a.rank() == 3 ? a.dim(0) : 1;
  const int64_t b_batch = b.rank() == 3 ? b.dim(0) : 1;
  if (a.rank() == 3 && b.rank() == 3 && a_batch != b_batch) throw fail();
  const int64_t batch = std::max(a_batch, b_batch);
  const int64_t m = transpose_a ? a.dim(-1) : a.dim(-2);
  const int64_t k = transpose_a ? a.dim(-2) : a.dim(-1);
  const int64_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const int64_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) throw fail();

  Shape out_shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, m, n} : Shape{m, n};
  Tensor out = make_result(out_shape, {a, b});
  const int64_t a_step = a.rank() == 3 ? m * k : 0;
  const int64_t b_step = b.rank() == 3 ? k * n : 0;
  for (int64_t i = 0; i < batch; ++i) {
    gemm(transpose_a, transpose_b, m, n, k, a.ptr() + i * a_step, b.ptr() + i * b_step, 0.0f, out.ptr() + i * m * n);
  }
  flops::add(2 * batch * m * n * k);

  Tensor ac = a, bc = b;
  record(out, "matmul", {ac, bc},
         [ac, bc, transpose_a, transpose_b, batch, m, n, k, a_step, b_step](std::span<const float>,
                                                                              std::span<const float> g) mutable {
           auto ga = grad_of(ac);
           auto gb = grad_of(bc);
           for (int64_t i = 0; i < batch; ++i) {
             const float* gi = g.data() + i * m * n;
             const float* ai = ac.ptr() + i * a_step;
             const float* bi = bc.ptr() + i * b_step;
             if (!ga.empty()) {
               float* dai = ga.data() + i * a_step;
               if (!transpose_a) {
                 gemm(false, !transpose_b, m, k, n, gi, bi, 1.0f, dai);
               } else {
                 gemm(transpose_b, true, k, m, n, bi, gi, 1.0f, dai);
               }
             }
             if (!gb.empty()) {
               float* dbi = gb.data() + i * b_step;
               if (!transpose_b) {
                 gemm(!transpose_a, false, k, n, m, ai, gi, 1.0f, dbi);
               } else {
                 gemm(true, transpose_a, n, k, m, gi, ai, 1.0f, dbi);
               }
             }
           }
         });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const int64_t in = weight.dim(1);
  const int64_t out_f = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(out_f));
  }
  const int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out = bias.defined() ? make_result(out_shape, {x, weight, bias}) : make_result(out_shape, {x, weight});
  gemm(false, true, rows, out_f, in, x.ptr(), weight.ptr(), 0.0f, out.ptr());
  if (bias.defined()) {
    float* yp = out.ptr();
    const float* bp = bias.ptr();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < out_f; ++j) yp[r * out_f + j] += bp[j];
    }
  }
  flops::add(2 * rows * in * out_f);

  Tensor xc = x, wc = weight, bc = bias;
  std::vector<Tensor> inputs{xc, wc};
  if (bias.defined()) inputs.push_back(bc);
  record(out, "linear", std::move(inputs),
         [xc, wc, bc, rows, in, out_f](std::span<const float>, std::span<const float> g) mutable {
           auto gx = grad_of(xc);
           auto gw = grad_of(wc);
           auto gb = grad_of(bc);
           if (!gx.empty()) gemm(false, false, rows, in, out_f, g.data(), wc.ptr(), 1.0f, gx.data());
           if (!gw.empty()) gemm(true, false, out_f, in, rows, g.data(), xc.ptr(), 1.0f, gw.data());
           if (!gb.empty()) {
             for (int64_t r = 0; r < rows; ++r) {
               for (int64_t j = 0; j < out_f; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(r * out_f + j)];
             }
           }
         });
  return out;
}

int64_t conv_output_size(int64_t in, int kernel, int stride, int padding) {
  const int64_t span = in + 2 * padding - kernel;
  if (stride <= 0 || span < 0) {
    throw ShapeError("conv: input size " + std::to_string(in) + " with kernel " + std::to_string(kernel) +
                     ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding) +
                     " gives no output");
  }
  return span / stride + 1;
}

namespace {

struct ConvGeom {
  int64_t c_in, h, w, kh, kw, h_out, w_out;
  int stride, pad;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  int64_t col_rows() const { return c_in * kh * kw; }
  int64_t col_cols() const { return h_out * w_out; }
};

void im2col(const float* x, const ConvGeom& g, float* col) {
  for (int64_t c = 0; c < g.c_in; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        float* row = col + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (int64_t oy = 0; oy < g.h_out; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          float* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.w_out, 0.0f);
            continue;
          }
          const float* src = x + (c * g.h + iy) * g.w;
          for (int64_t ox = 0; ox < g.w_out; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix < 0 || ix >= g.w) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, float* dx) {
  for (int64_t c = 0; c < g.c_in; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const float* row = col + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (int64_t oy = 0; oy < g.h_out; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          float* dst = dx + (c * g.h + iy) * g.w;
          const float* src = row + oy * g.w_out;
          for (int64_t ox = 0; ox < g.w_out; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const int64_t batch = x.dim(0);
  const int64_t c_out = weight.dim(0);
  ConvGeom geom{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), 0, 0, stride, padding};
  geom.h_out = conv_output_size(geom.h, static_cast<int>(geom.kh), stride, padding);
  geom.w_out = conv_output_size(geom.w, static_cast<int>(geom.kw), stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(c_out));
  }

  Tensor out = bias.defined() ? make_result({batch, c_out, geom.h_out, geom.w_out}, {x, weight, bias})
                              : make_result({batch, c_out, geom.h_out, geom.w_out}, {x, weight});
  const int64_t kdim = geom.col_rows();
  const int64_t ncols = geom.col_cols();
  std::vector<float> col(geom.pointwise() ? 0 : static_cast<size_t>(kdim * ncols));
  const int64_t in_step = geom.c_in * geom.h * geom.w;
  for (int64_t b = 0; b < batch; ++b) {
    const float* xb = x.ptr() + b * in_step;
    const float* cb = xb;
    if (!geom.pointwise()) {
      im2col(xb, geom, col.data());
      cb = col.data();
    }
    float* yb = out.ptr() + b * c_out * ncols;
    gemm(false, false, c_out, ncols, kdim, weight.ptr(), cb, 0.0f, yb);
    if (bias.defined()) {
      for (int64_t o = 0; o < c_out; ++o) {
        const float bv = bias.at(o);
        float* row = yb + o * ncols;
        for (int64_t j = 0; j < ncols; ++j) row[j] += bv;
      }
    }
  }
  flops::add(2 * batch * c_out * kdim * ncols);

  Tensor xc = x, wc = weight, bc = bias;
  std::vector<Tensor> inputs{xc, wc};
  if (bias.defined()) inputs.push_back(bc);
  record(out, "conv2d", std::move(inputs),
         [xc, wc, bc, geom, batch, c_out, in_step](std::span<const float>, std::span<const float> g) mutable {
           auto gx = grad_of(xc);
           auto gw = grad_of(wc);
           auto gb = grad_of(bc);
           const int64_t kdim2 = geom.col_rows();
           const int64_t ncols2 = geom.col_cols();
           std::vector<float> col2;
           std::vector<float> dcol;
           if (!geom.pointwise()) {
             if (!gw.empty()) col2.resize(static_cast<size_t>(kdim2 * ncols2));
             if (!gx.empty()) dcol.resize(static_cast<size_t>(kdim2 * ncols2));
           }
           for (int64_t b = 0; b < batch; ++b) {
             const float* gyb = g.data() + b * c_out * ncols2;
             const float* xb = xc.ptr() + b * in_step;
             if (!gw.empty()) {
               const float* cb = xb;
               if (!geom.pointwise()) {
                 im2col(xb, geom, col2.data());
                 cb = col2.data();
               }
               gemm(false, true, c_out, kdim2, ncols2, gyb, cb, 1.0f, gw.data());
             }
             if (!gx.empty()) {
               float* dxb = gx.data() + b * in_step;
               if (geom.pointwise()) {
                 gemm(true, false, kdim2, ncols2, c_out, wc.ptr(), gyb, 1.0f, dxb);
               } else {
                 gemm(true, false, kdim2, ncols2, c_out, wc.ptr(), gyb, 0.0f, dcol.data());
                 col2im_add(dcol.data(), geom, dxb);
               }
             }
             if (!gb.empty()) {
               for (int64_t o = 0; o < c_out; ++o) {
                 double s = 0.0;
                 for (int64_t j = 0; j < ncols2; ++j) s += gyb[o * ncols2 + j];
                 gb[static_cast<size_t>(o)] += static_cast<float>(s);
               }
             }
           }
         });
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const int64_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t kh = weight.dim(2), kw = weight.dim(3);
  const int64_t ho = conv_output_size(h, static_cast<int>(kh), stride, padding);
  const int64_t wo = conv_output_size(w, static_cast<int>(kw), stride, padding);
  Tensor out = bias.defined() ? make_result({batch, ch, ho, wo}, {x, weight, bias})
                              : make_result({batch, ch, ho, wo}, {x, weight});

  auto visit = [=](int64_t b, int64_t c, auto&& f) {
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        const int64_t o = ((b * ch + c) * ho + oy) * wo + ox;
        for (int64_t ki = 0; ki < kh; ++ki) {
          const int64_t iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= h) continue;
          for (int64_t kj = 0; kj < kw; ++kj) {
            const int64_t ix = ox * stride - padding + kj;
            if (ix < 0 || ix >= w) continue;
            f(o, ((b * ch + c) * h + iy) * w + ix, (c * kh + ki) * kw + kj);
          }
        }
      }
    }
  };

  const float* xp = x.ptr();
  const float* wp = weight.ptr();
  float* yp = out.ptr();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < ch; ++c) {
      if (bias.defined()) std::fill(yp + (b * ch + c) * ho * wo, yp + (b * ch + c + 1) * ho * wo, bias.at(c));
      visit(b, c, [&](int64_t o, int64_t i, int64_t k) { yp[o] += wp[k] * xp[i]; });
    }
  }
  flops::add(2 * batch * ch * ho * wo * kh * kw);

  Tensor xc = x, wc = weight, bc = bias;
  std::vector<Tensor> inputs{xc, wc};
  if (bias.defined()) inputs.push_back(bc);
  record(out, "depthwise_conv2d", std::move(inputs),
         [xc, wc, bc, visit, batch, ch, ho, wo](std::span<const float>, std::span<const float> g) mutable {
           auto gx = grad_of(xc);
           auto gw = grad_of(wc);
           auto gb = grad_of(bc);
           const float* xp2 = xc.ptr();
           const float* wp2 = wc.ptr();
           for (int64_t b = 0; b < batch; ++b) {
             for (int64_t c = 0; c < ch; ++c) {
               visit(b, c, [&](int64_t o, int64_t i, int64_t k) {
                 const float go = g[static_cast<size_t>(o)];
                 if (!gx.empty()) gx[static_cast<size_t>(i)] += go * wp2[k];
                 if (!gw.empty()) gw[static_cast<size_t>(k)] += go * xp2[i];
               });
               if (!gb.empty()) {
                 double s = 0.0;
                 for (int64_t j = 0; j < ho * wo; ++j) s += g[static_cast<size_t>((b * ch + c) * ho * wo + j)];
                 gb[static_cast<size_t>(c)] += static_cast<float>(s);
               }
             }
           }
         });
  return out;
}

// ---- normalization -------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int64_t cols = x.dim(-1);
  const int64_t rows = x.numel() / cols;
  if ((gamma.defined() && gamma.numel() != cols) || (beta.defined() && beta.numel() != cols)) {
    throw ShapeError("layer_norm: affine parameters do not match last axis of " + shape_str(x.shape()));
  }
  std::vector<Tensor> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  Tensor out = make_result(x.shape(), inputs);
  RowStats st = normalize_rows(x.ptr(), out.ptr(), rows, cols, eps);
  if (gamma.defined() || beta.defined()) {
    float* yp = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t c = 0; c < cols; ++c) {
        float v = yp[r * cols + c];
        if (gamma.defined()) v *= gamma.at(c);
        if (beta.defined()) v += beta.at(c);
        yp[r * cols + c] = v;
      }
    }
  }
  flops::add(x.numel());

  Tensor xc = x, gc = gamma, bc = beta;
  record(out, "layer_norm", std::move(inputs),
         [xc, gc, bc, st = std::move(st), rows, cols](std::span<const float>, std::span<const float> g) mutable {
           auto gx = grad_of(xc);
           auto gg = grad_of(gc);
           auto gb = grad_of(bc);
           const float* xp = xc.ptr();
           if (!gg.empty() || !gb.empty()) {
             for (int64_t r = 0; r < rows; ++r) {
               const float mu = st.mean[static_cast<size_t>(r)];
               const float rs = st.rstd[static_cast<size_t>(r)];
               for (int64_t c = 0; c < cols; ++c) {
                 const size_t i = static_cast<size_t>(r * cols + c);
                 if (!gg.empty()) gg[static_cast<size_t>(c)] += g[i] * (xp[i] - mu) * rs;
                 if (!gb.empty()) gb[static_cast<size_t>(c)] += g[i];
               }
             }
           }
           if (gx.empty()) return;
           if (!gc.defined()) {
             normalize_rows_backward(xp, g.data(), st, gx.data(), rows, cols);
             return;
           }
           std::vector<float> dxhat(g.size());
           for (int64_t r = 0; r < rows; ++r) {
             for (int64_t c = 0; c < cols; ++c) {
               dxhat[static_cast<size_t>(r * cols + c)] = g[static_cast<size_t>(r * cols + c)] * gc.at(c);
             }
           }
           normalize_rows_backward(xp, dxhat.data(), st, gx.data(), rows, cols);
         });
  return out;
}

Tensor instance_norm(const Tensor& x, int leading_axes, float eps) {
  if (leading_axes < 0 || leading_axes >= x.rank()) {
    throw ShapeError("instance_norm: leading axes " + std::to_string(leading_axes) + " invalid for " +
                     shape_str(x.shape()));
  }
  const int64_t rows = prod(x.shape(), 0, static_cast<size_t>(leading_axes));
  const int64_t cols = x.numel() / rows;
  Tensor out = make_result(x.shape(), {x});
  RowStats st = normalize_rows(x.ptr(), out.ptr(), rows, cols, eps);
  flops::add(x.numel());
  Tensor xc = x;
  record(out, "instance_norm", {xc},
         [xc, st = std::move(st), rows, cols](std::span<const float>, std::span<const float> g) mutable {
           auto gx = grad_of(xc);
           if (!gx.empty()) normalize_rows_backward(xc.ptr(), g.data(), st, gx.data(), rows, cols);
         });
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean, Tensor running_var,
                  bool training, float momentum, float eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input must be [B, C, ...], got " + shape_str(x.shape()));
  const int64_t batch = x.dim(0);
  const int64_t ch = x.dim(1);
  const int64_t spatial = x.numel() / (batch * ch);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->defined() && t->numel() != ch) {
      throw ShapeError("batch_norm: per-channel tensor " + shape_str(t->shape()) + " does not match " +
                       std::to_string(ch) + " channels");
    }
  }
  if (!training && (!running_mean.defined() || !running_var.defined())) {
    throw ContractError("batch_norm: eval mode requires running statistics");
  }
  std::vector<Tensor> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  Tensor out = make_result(x.shape(), inputs);

  std::vector<float> mean(static_cast<size_t>(ch)), rstd(static_cast<size_t>(ch));
  const float* xp = x.ptr();
  const int64_t count = batch * spatial;
  for (int64_t c = 0; c < ch; ++c) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const float* p = xp + (b * ch + c) * spatial;
        for (int64_t j = 0; j < spatial; ++j) s += p[j];
      }
      mu = s / static_cast<double>(count);
      double v = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const float* p = xp + (b * ch + c) * spatial;
        for (int64_t j = 0; j < spatial; ++j) v += (p[j] - mu) * (p[j] - mu);
      }
      var = v / static_cast<double>(count);
      if (running_mean.defined()) {
        float& rm = running_mean.mutable_data()[static_cast<size_t>(c)];
        float& rv = running_var.mutable_data()[static_cast<size_t>(c)];
        const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
        rm = static_cast<float>((1.0 - momentum) * rm + momentum * mu);
        rv = static_cast<float>((1.0 - momentum) * rv + momentum * unbiased);
      }
    } else {
      mu = running_mean.at(c);
      var = running_var.at(c);
    }
    mean[static_cast<size_t>(c)] = static_cast<float>(mu);
    rstd[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + eps));
  }
  float* yp = out.ptr();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < ch; ++c) {
      const float mu = mean[static_cast<size_t>(c)];
      const float rs = rstd[static_cast<size_t>(c)];
      const float gm = gamma.defined() ? gamma.at(c) : 1.0f;
      const float bt = beta.defined() ? beta.at(c) : 0.0f;
      const float* p = xp + (b * ch + c) * spatial;
      float* q = yp + (b * ch + c) * spatial;
      for (int64_t j = 0; j < spatial; ++j) q[j] = (p[j] - mu) * rs * gm + bt;
    }
  }
  flops::add(x.numel());

  Tensor xc = x, gc = gamma, bc = beta;
  record(out, "batch_norm", std::move(inputs),
         [xc, gc, bc, mean = std::move(mean), rstd = std::move(rstd), training, batch, ch, spatial, count](
             std::span<const float>, std::span<const float> g) mutable {
           auto gx = grad_of(xc);
           auto gg = grad_of(gc);
           auto gb = grad_of(bc);
           const float* xp2 = xc.ptr();
           for (int64_t c = 0; c < ch; ++c) {
             const double mu = mean[static_cast<size_t>(c)];
             const double rs = rstd[static_cast<size_t>(c)];
             const double gm = gc.defined() ? gc.at(c) : 1.0;
             double sum_g = 0.0, sum_gx = 0.0;
             for (int64_t b = 0; b < batch; ++b) {
               const size_t base = static_cast<size_t>((b * ch + c) * spatial);
               for (int64_t j = 0; j < spatial; ++j) {
                 const double xh = (xp2[base + static_cast<size_t>(j)] - mu) * rs;
                 sum_g += g[base + static_cast<size_t>(j)];
                 sum_gx += g[base + static_cast<size_t>(j)] * xh;
               }
             }
             if (!gg.empty()) gg[static_cast<size_t>(c)] += static_cast<float>(sum_gx);
             if (!gb.empty()) gb[static_cast<size_t>(c)] += static_cast<float>(sum_g);
             if (gx.empty()) continue;
             const double md = gm * sum_g / static_cast<double>(count);
             const double mdx = gm * sum_gx / static_cast<double>(count);
             for (int64_t b = 0; b < batch; ++b) {
               const size_t base = static_cast<size_t>((b * ch + c) * spatial);
               for (int64_t j = 0; j < spatial; ++j) {
                 const size_t i = base + static_cast<size_t>(j);
                 const double d = g[i] * gm;
                 if (training) {
                   const double xh = (xp2[i] - mu) * rs;
                   gx[i] += static_cast<float>(rs * (d - md - xh * mdx));
                 } else {
                   gx[i] += static_cast<float>(rs * d);
                 }
               }
             }
           }
         });
  return out;
}

Tensor normalize(const Tensor& x, NormMode mode, float eps) {
  switch (mode) {
    case NormMode::layer:
      return layer_norm(x, {}, {}, eps);
    case NormMode::instance:
      return instance_norm(x, 1, eps);
    case NormMode::batch:
      return batch_norm(x, {}, {}, {}, {}, true, 0.1f, eps);
  }
  throw ContractError("normalize: unknown mode");
}

Tensor softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  const int64_t outer = prod(x.shape(), 0, static_cast<size_t>(a));
  const int64_t n = x.shape()[static_cast<size_t>(a)];
  const int64_t inner = prod(x.shape(), static_cast<size_t>(a) + 1, x.shape().size());
  Tensor out = make_result(x.shape(), {x});
  const float* xp = x.ptr();
  float* yp = out.ptr();
  std::vector<float> e(static_cast<size_t>(n));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      float mx = xp[base];
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[base + j * inner]);
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        e[static_cast<size_t>(j)] = std::exp(xp[base + j * inner] - mx);
        s += e[static_cast<size_t>(j)];
      }
      const float inv = static_cast<float>(1.0 / s);
      for (int64_t j = 0; j < n; ++j) yp[base + j * inner] = e[static_cast<size_t>(j)] * inv;
    }
  }
  flops::add(x.numel());
  Tensor xc = x;
  record(out, "softmax", {xc}, [xc, outer, n, inner](std::span<const float> y, std::span<const float> g) mutable {
    auto gx = grad_of(xc);
    if (gx.empty()) return;
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * n * inner + in;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          const size_t i = static_cast<size_t>(base + j * inner);
          dot += static_cast<double>(g[i]) * y[i];
        }
        for (int64_t j = 0; j < n; ++j) {
          const size_t i = static_cast<size_t>(base + j * inner);
          gx[i] += static_cast<float>(y[i] * (g[i] - dot));
        }
      }
    }
  });
  return out;
}

// ---- elementwise -----------------------------------------------------------------

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor gelu(const Tensor& x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
  constexpr float c = 0.044715f;
  return unary(
      x, "gelu",
      [](float v) { return 0.5f * v * (1.0f + std::tanh(k * (v + c * v * v * v))); },
      [](float v, float) {
        const float t = std::tanh(k * (v + c * v * v * v));
        return 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * k * (1.0f + 3.0f * c * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](float v) {
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        const float e = std::exp(v);
        return e / (1.0f + e);
      },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor sqrt(const Tensor& x, const char* site) {
  for (float v : x.data()) {
    if (v < 0.0f) throw DomainError(std::string(site) + ": sqrt of negative value " + std::to_string(v));
  }
  return unary(
      x, "sqrt", [](float v) { return std::sqrt(v); }, [](float, float y) { return y > 0.0f ? 0.5f / y : 0.0f; });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

Tensor scale(const Tensor& x, float s) {
  return unary(x, "scale", [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& x, float s) {
  return unary(x, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  return unary(
      x, "clamp", [lo, hi](float v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](float v, float) { return (v > lo && v < hi) ? 1.0f : 0.0f; });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

Tensor dropout(const Tensor& x, float p, bool training, Rng& rng) {
  if (!training || p <= 0.0f) return x;
  if (p >= 1.0f) throw ContractError("dropout: probability must be < 1");
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(static_cast<size_t>(x.numel()));
  for (float& m : mask) m = rng.bernoulli(p) ? 0.0f : keep_scale;
  Tensor out = make_result(x.shape(), {x});
  const float* xp = x.ptr();
  float* yp = out.ptr();
  for (size_t i = 0; i < mask.size(); ++i) yp[i] = xp[i] * mask[i];
  flops::add(x.numel());
  Tensor xc = x;
  record(out, "dropout", {xc}, [xc, mask = std::move(mask)](std::span<const float>, std::span<const float> g) mutable {
    auto gx = grad_of(xc);
    if (gx.empty()) return;
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
  return out;
}

// ---- reductions -------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  Tensor out = make_result({1}, {x});
  double s = 0.0;
  for (float v : x.data()) s += v;
  out.mutable_data()[0] = static_cast<float>(s);
  flops::add(x.numel());
  Tensor xc = x;
  record(out, "sum", {xc}, [xc](std::span<const float>, std::span<const float> g) mutable {
    auto gx = grad_of(xc);
    for (float& v : gx) v += g[0];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  Tensor out = make_result({1}, {x});
  double s = 0.0;
  for (float v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  out.mutable_data()[0] = static_cast<float>(s * inv);
  flops::add(x.numel());
  Tensor xc = x;
  record(out, "mean", {xc}, [xc, inv](std::span<const float>, std::span<const float> g) mutable {
    auto gx = grad_of(xc);
    const float gv = static_cast<float>(g[0] * inv);
    for (float& v : gx) v += gv;
  });
  return out;
}

Tensor bce(const Tensor& p, const Tensor& t, float eps, const Tensor& mask) {
  if (p.shape() != t.shape() || (mask.defined() && mask.shape() != p.shape())) {
    throw ShapeError("bce: shape mismatch between " + shape_str(p.shape()) + " and " + shape_str(t.shape()));
  }
  const double lo = eps;
  const double hi = 1.0 - static_cast<double>(eps);
  const float* pp = p.ptr();
  const float* tp = t.ptr();
  const float* mp = mask.defined() ? mask.ptr() : nullptr;
  double total = 0.0;
  double count = 0.0;
  const int64_t n = p.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double w = mp ? mp[i] : 1.0;
    if (w == 0.0) continue;
    const double pc = std::min(std::max(static_cast<double>(pp[i]), lo), hi);
    const double tv = tp[i];
    total -= w * (tv * std::log(pc) + (1.0 - tv) * std::log(1.0 - pc));
    count += w;
  }
  Tensor out = make_result({1}, {p});
  out.mutable_data()[0] = count > 0.0 ? static_cast<float>(total / count) : 0.0f;
  flops::add(n);
  Tensor pc_ = p, tc = t, mc = mask;
  record(out, "bce", {pc_}, [pc_, tc, mc, lo, hi, count](std::span<const float>, std::span<const float> g) mutable {
    auto gp = grad_of(pc_);
    if (gp.empty() || count == 0.0) return;
    const float* pp2 = pc_.ptr();
    const float* tp2 = tc.ptr();
    const float* mp2 = mc.defined() ? mc.ptr() : nullptr;
    const double scale_g = g[0] / count;
    for (size_t i = 0; i < gp.size(); ++i) {
      const double w = mp2 ? mp2[i] : 1.0;
      const double pv = pp2[i];
      if (w == 0.0 || pv <= lo || pv >= hi) continue;
      const double tv = tp2[i];
      gp[i] += static_cast<float>(scale_g * w * (-tv / pv + (1.0 - tv) / (1.0 - pv)));
    }
  });
  return out;
}

// ---- layout ------------------------------------------------------------------------

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const size_t rank = x.shape().size();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int p = perm[i];
    if (p < 0 || static_cast<size_t>(p) >= rank || seen[static_cast<size_t>(p)]) {
      throw ShapeError("permute: invalid permutation");
    }
    seen[static_cast<size_t>(p)] = true;
    out_shape[i] = x.shape()[static_cast<size_t>(p)];
  }
  std::vector<int64_t> in_stride(rank);
  int64_t s = 1;
  for (size_t i = rank; i-- > 0;) {
    in_stride[i] = s;
    s *= x.shape()[i];
  }
  std::vector<int64_t> src_stride(rank);
  for (size_t i = 0; i < rank; ++i) src_stride[i] = in_stride[static_cast<size_t>(perm[i])];

  // Maps every output position to its source offset.
  auto walk = [out_shape, src_stride](auto&& f) {
    const size_t r = out_shape.size();
    const int64_t n = shape_numel(out_shape);
    std::vector<int64_t> idx(r, 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
      f(i, off);
      for (size_t d = r; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= src_stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  };

  Tensor out = make_result(out_shape, {x});
  const float* xp = x.ptr();
  float* yp = out.ptr();
  walk([&](int64_t i, int64_t off) { yp[i] = xp[off]; });
  Tensor xc = x;
  record(out, "permute", {xc}, [xc, walk](std::span<const float>, std::span<const float> g) mutable {
    auto gx = grad_of(xc);
    if (gx.empty()) return;
    walk([&](int64_t i, int64_t off) { gx[static_cast<size_t>(off)] += g[static_cast<size_t>(i)]; });
  });
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank must be >= 2, got " + shape_str(x.shape()));
  std::vector<int> perm(static_cast<size_t>(x.rank()));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int a = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<size_t>(a)] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != a && s[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(parts[0].shape()));
      }
    }
    out_shape[static_cast<size_t>(a)] += s[static_cast<size_t>(a)];
  }
  const int64_t outer = prod(out_shape, 0, static_cast<size_t>(a));
  const int64_t inner = prod(out_shape, static_cast<size_t>(a) + 1, out_shape.size());
  const int64_t total = out_shape[static_cast<size_t>(a)];
  Tensor out = make_result(out_shape, parts);
  float* yp = out.ptr();
  int64_t offset = 0;
  std::vector<int64_t> offsets;
  for (const Tensor& p : parts) {
    const int64_t len = p.shape()[static_cast<size_t>(a)];
    offsets.push_back(offset);
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(p.ptr() + o * len * inner, p.ptr() + (o + 1) * len * inner, yp + (o * total + offset) * inner);
    }
    offset += len;
  }
  std::vector<Tensor> pc = parts;
  record(out, "concat", pc,
         [pc, offsets, a, outer, inner, total](std::span<const float>, std::span<const float> g) mutable {
           for (size_t k = 0; k < pc.size(); ++k) {
             auto gp = grad_of(pc[k]);
             if (gp.empty()) continue;
             const int64_t len = pc[k].shape()[static_cast<size_t>(a)];
             for (int64_t o = 0; o < outer; ++o) {
               const float* src = g.data() + (o * total + offsets[k]) * inner;
               float* dst = gp.data() + o * len * inner;
               for (int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
             }
           }
         });
  return out;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int a = normalize_axis(axis, x.rank(), "slice");
  const int64_t total = x.shape()[static_cast<size_t>(a)];
  if (start < 0 || length <= 0 || start + length > total) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(a)] = length;
  const int64_t outer = prod(x.shape(), 0, static_cast<size_t>(a));
  const int64_t inner = prod(x.shape(), static_cast<size_t>(a) + 1, x.shape().size());
  Tensor out = make_result(out_shape, {x});
  for (int64_t o = 0; o < outer; ++o) {
    const float* src = x.ptr() + (o * total + start) * inner;
    std::copy(src, src + length * inner, out.ptr() + o * length * inner);
  }
  Tensor xc = x;
  record(out, "slice", {xc}, [xc, outer, inner, total, start, length](std::span<const float>,
                                                                        std::span<const float> g) mutable {
    auto gx = grad_of(xc);
    if (gx.empty()) return;
    for (int64_t o = 0; o < outer; ++o) {
      float* dst = gx.data() + (o * total + start) * inner;
      const float* src = g.data() + o * length * inner;
      for (int64_t j = 0; j < length * inner; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor to_tokens(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("to_tokens: expected [B, C, H, W], got " + shape_str(x.shape()));
  return permute(x, {0, 2, 3, 1}).reshape({x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

Tensor from_tokens(const Tensor& tokens, int64_t h, int64_t w) {
  if (tokens.rank() != 3 || tokens.dim(1) != h * w) {
    throw ShapeError("from_tokens: " + shape_str(tokens.shape()) + " is not a " + std::to_string(h) + "x" +
                     std::to_string(w) + " token grid");
  }
  return permute(tokens.reshape({tokens.dim(0), h, w, tokens.dim(2)}), {0, 3, 1, 2});
}

// ---- resampling ----------------------------------------------------------------------

namespace {

struct Taps {
  std::vector<int64_t> i0, i1;
  std::vector<float> w1;
};

Taps make_taps(int64_t in, int64_t out) {
  Taps t;
  t.i0.resize(static_cast<size_t>(out));
  t.i1.resize(static_cast<size_t>(out));
  t.w1.resize(static_cast<size_t>(out));
  const double scale_f = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale_f - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int64_t lo = static_cast<int64_t>(std::floor(src));
    t.i0[static_cast<size_t>(d)] = lo;
    t.i1[static_cast<size_t>(d)] = std::min(lo + 1, in - 1);
    t.w1[static_cast<size_t>(d)] = static_cast<float>(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 4) throw ShapeError("bilinear_resize: expected [B, C, H, W], got " + shape_str(x.shape()));
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be positive");
  const int64_t planes = x.dim(0) * x.dim(1);
  const int64_t h = x.dim(2), w = x.dim(3);
  Tensor out = make_result({x.dim(0), x.dim(1), out_h, out_w}, {x});
  if (h == out_h && w == out_w) {
    std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
    Tensor xc = x;
    record(out, "bilinear_resize", {xc}, [xc](std::span<const float>, std::span<const float> g) mutable {
      auto gx = grad_of(xc);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
    return out;
  }
  Taps ty = make_taps(h, out_h);
  Taps tx = make_taps(w, out_w);
  const float* xp = x.ptr();
  float* yp = out.ptr();
  for (int64_t p = 0; p < planes; ++p) {
    const float* src = xp + p * h * w;
    float* dst = yp + p * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const float wy = ty.w1[static_cast<size_t>(oy)];
      const float* r0 = src + ty.i0[static_cast<size_t>(oy)] * w;
      const float* r1 = src + ty.i1[static_cast<size_t>(oy)] * w;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const int64_t c0 = tx.i0[static_cast<size_t>(ox)];
        const int64_t c1 = tx.i1[static_cast<size_t>(ox)];
        const float wx = tx.w1[static_cast<size_t>(ox)];
        const float top = r0[c0] + wx * (r0[c1] - r0[c0]);
        const float bot = r1[c0] + wx * (r1[c1] - r1[c0]);
        dst[oy * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  flops::add(out.numel());
  Tensor xc = x;
  record(out, "bilinear_resize", {xc},
         [xc, ty = std::move(ty), tx = std::move(tx), planes, h, w, out_h, out_w](std::span<const float>,
                                                                                  std::span<const float> g) mutable {
           auto gx = grad_of(xc);
           if (gx.empty()) return;
           for (int64_t p = 0; p < planes; ++p) {
             float* dst = gx.data() + p * h * w;
             const float* src = g.data() + p * out_h * out_w;
             for (int64_t oy = 0; oy < out_h; ++oy) {
               const float wy = ty.w1[static_cast<size_t>(oy)];
               float* r0 = dst + ty.i0[static_cast<size_t>(oy)] * w;
               float* r1 = dst + ty.i1[static_cast<size_t>(oy)] * w;
               for (int64_t ox = 0; ox < out_w; ++ox) {
                 const int64_t c0 = tx.i0[static_cast<size_t>(ox)];
                 const int64_t c1 = tx.i1[static_cast<size_t>(ox)];
                 const float wx = tx.w1[static_cast<size_t>(ox)];
                 const float gv = src[oy * out_w + ox];
                 r0[c0] += gv * (1.0f - wy) * (1.0f - wx);
                 r0[c1] += gv * (1.0f - wy) * wx;
                 r1[c0] += gv * wy * (1.0f - wx);
                 r1[c1] += gv * wy * wx;
               }
             }
           }
         });
  return out;
}

// ---- edge extraction ----------------------------------------------------------------------

std::array<Tensor, 2> scharr(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("scharr: expected at least 2 axes, got " + shape_str(x.shape()));
  const int64_t h = x.dim(-2), w = x.dim(-1);
  const int64_t planes = x.numel() / (h * w);
  Tensor gx_out = make_result(x.shape(), {x});
  Tensor gy_out = make_result(x.shape(), {x});
  const float* xp = x.ptr();
  float* gxp = gx_out.ptr();
  float* gyp = gy_out.ptr();
  auto clampi = [](int64_t v, int64_t n) { return v < 0 ? int64_t{0} : (v >= n ? n - 1 : v); };
  for (int64_t p = 0; p < planes; ++p) {
    const float* s = xp + p * h * w;
    for (int64_t i = 0; i < h; ++i) {
      const float* up = s + clampi(i - 1, h) * w;
      const float* mid = s + i * w;
      const float* dn = s + clampi(i + 1, h) * w;
      for (int64_t j = 0; j < w; ++j) {
        const int64_t l = clampi(j - 1, w), r = clampi(j + 1, w);
        // Paired differences keep the evaluation mirror-symmetric.
        const float gx = 3.0f * ((up[r] - up[l]) + (dn[r] - dn[l])) + 10.0f * (mid[r] - mid[l]);
        const float gy = 3.0f * ((dn[l] - up[l]) + (dn[r] - up[r])) + 10.0f * (dn[j] - up[j]);
        gxp[p * h * w + i * w + j] = gx;
        gyp[p * h * w + i * w + j] = gy;
      }
    }
  }
  flops::add(2 * 2 * 9 * x.numel());

  // Scatter of one stencil: weights (di, dj, coefficient) over clamped taps.
  struct Tap {
    int di, dj;
    float c;
  };
  static constexpr std::array<Tap, 6> kx{{{-1, -1, -3}, {-1, 1, 3}, {0, -1, -10}, {0, 1, 10}, {1, -1, -3}, {1, 1, 3}}};
  static constexpr std::array<Tap, 6> ky{{{-1, -1, -3}, {-1, 0, -10}, {-1, 1, -3}, {1, -1, 3}, {1, 0, 10}, {1, 1, 3}}};
  auto make_backward = [=](const std::array<Tap, 6>& taps) {
    return [taps, planes, h, w, clampi, xc = x](std::span<const float>, std::span<const float> g) mutable {
      auto gx = grad_of(xc);
      if (gx.empty()) return;
      for (int64_t p = 0; p < planes; ++p) {
        for (int64_t i = 0; i < h; ++i) {
          for (int64_t j = 0; j < w; ++j) {
            const float gv = g[static_cast<size_t>(p * h * w + i * w + j)];
            if (gv == 0.0f) continue;
            for (const Tap& t : taps) {
              const int64_t si = clampi(i + t.di, h), sj = clampi(j + t.dj, w);
              gx[static_cast<size_t>(p * h * w + si * w + sj)] += t.c * gv;
            }
          }
        }
      }
    };
  };
  Tensor xc = x;
  record(gx_out, "scharr_x", {xc}, make_backward(kx));
  record(gy_out, "scharr_y", {xc}, make_backward(ky));
  return {gx_out, gy_out};
}

}  // namespace uwseg::ops

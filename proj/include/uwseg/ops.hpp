#pragma once

#include <array>
#include <vector>

#include "uwseg/random.hpp"
#include "uwseg/tensor.hpp"

// Differentiable primitives. Every op returns a fresh tensor; when grad mode
// is on and an input requires grad, the op records its backward.
namespace uwseg::ops {

// ---- linear algebra -------------------------------------------------------

/// a[..., m, k] x b[..., k, n]. Either operand may be 2-D (shared across the
/// other's batch); 3-D operands must agree on the batch size. The transpose
/// flags apply to the last two axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

/// y = x W^T + b over the last axis. weight: [out, in], bias: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// Cross-correlation. x: [B, C_in, H, W], weight: [C_out, C_in, kh, kw],
/// bias: [C_out] or undefined. A weight with requires_grad() == false is a
/// fixed kernel and receives no gradient.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Per-channel cross-correlation. weight: [C, 1, kh, kw].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Output side of a convolution, floor((in + 2 pad - k) / stride) + 1; throws
/// ShapeError when the kernel does not fit at all.
int64_t conv_output_size(int64_t in, int kernel, int stride, int padding);

// ---- normalization ---------------------------------------------------------

enum class NormMode { layer, instance, batch };

/// Affine-free normalization. layer: last axis; instance: all entries after
/// axis 0; batch: axis 1 across every other axis.
Tensor normalize(const Tensor& x, NormMode mode, float eps = 1e-5f);

/// Normalizes over the last axis with optional affine gamma/beta ([C]).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

/// Normalizes every slice x[i_0, ..., i_{leading-1}, ...] over its remaining entries.
Tensor instance_norm(const Tensor& x, int leading_axes = 1, float eps = 1e-5f);

/// Batch normalization of x: [B, C, ...] per channel. In training mode the
/// batch statistics are used and running stats are updated in place; in eval
/// mode the running stats are used.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, bool training, float momentum = 0.1f, float eps = 1e-5f);

Tensor softmax(const Tensor& x, int axis);

// ---- elementwise -----------------------------------------------------------

Tensor relu(const Tensor& x);
/// tanh approximation.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// `site` names the caller in the DomainError raised for negative input.
/// The derivative at exactly 0 is taken as 0.
Tensor sqrt(const Tensor& x, const char* site = "sqrt");
Tensor square(const Tensor& x);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);
/// Gradient passes where lo < x < hi.
Tensor clamp(const Tensor& x, float lo, float hi);

/// Binary ops broadcast when one shape, right-aligned, matches the other with
/// singleton expansion (e.g. [C] into [N, C], or [C, 1, 1] into [B, C, H, W]).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor dropout(const Tensor& x, float p, bool training, Rng& rng);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean binary cross-entropy of probabilities p against targets t, with p
/// clamped to [eps, 1 - eps]. Optional mask (same shape, 0/1) selects the
/// entries averaged over. Gradient flows to p only.
Tensor bce(const Tensor& p, const Tensor& t, float eps = 1e-7f, const Tensor& mask = {});

// ---- layout ----------------------------------------------------------------

Tensor permute(const Tensor& x, const std::vector<int>& perm);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);

/// [B, C, H, W] -> [B, H*W, C] (row-major tokens).
Tensor to_tokens(const Tensor& x);
/// [B, H*W, C] -> [B, C, H, W].
Tensor from_tokens(const Tensor& tokens, int64_t h, int64_t w);

// ---- resampling ------------------------------------------------------------

/// Bilinear resampling with half-pixel centers and edge clamping; exact
/// identity when the size is unchanged.
Tensor bilinear_resize(const Tensor& x, int64_t out_h, int64_t out_w);

// ---- edge extraction -------------------------------------------------------

/// Scharr kernels (cross-correlation orientation).
inline constexpr std::array<float, 9> kScharrX{-3, 0, 3, -10, 0, 10, -3, 0, 3};
inline constexpr std::array<float, 9> kScharrY{-3, -10, -3, 0, 0, 0, 3, 10, 3};

/// Per-channel Scharr responses with stride 1 and replicate padding of 1.
/// Returns {g_x, g_y}. The stencil is evaluated in a mirror-symmetric order so
/// a horizontally flipped input yields exactly the flipped (negated g_x) output.
std::array<Tensor, 2> scharr(const Tensor& x);

}  // namespace uwseg::ops

#include "uwseg/encoder.hpp"

#include <cmath>

#include "uwseg/errors.hpp"
#include "uwseg/flops.hpp"
#include "uwseg/ops.hpp"
#include "uwseg/probe.hpp"

namespace uwseg {

void EncoderConfig::validate() const {
  for (size_t i = 0; i < 4; ++i) {
    if (channels[i] <= 0 || depths[i] < 1 || sr_ratios[i] < 1 || heads[i] < 1) {
      throw ConfigError("encoder stage " + std::to_string(i + 1) + ": sizes must be positive");
    }
    if (i > 0 && channels[i] <= channels[i - 1]) throw ConfigError("encoder channels must be strictly increasing");
    if (channels[i] % heads[i] != 0) {
      throw ConfigError("encoder stage " + std::to_string(i + 1) + ": channels " + std::to_string(channels[i]) +
                        " not divisible by heads " + std::to_string(heads[i]));
    }
  }
  if (ffn_expansion < 1 || in_channels < 1) throw ConfigError("encoder expansion and input channels must be >= 1");
}

OverlapPatchMerge::OverlapPatchMerge(nn::ParameterStore& store, const std::string& name, int64_t in, int64_t out,
                                     int stage, Rng& rng)
    : proj(store, name + ".proj", in, out, stage == 0 ? 7 : 3, stage == 0 ? 4 : 2, stage == 0 ? 3 : 1, rng),
      norm(store, name + ".norm", out) {}

Tensor OverlapPatchMerge::forward(const Tensor& x, int64_t& h, int64_t& w) const {
  Tensor y = proj.forward(x);
  h = y.dim(2);
  w = y.dim(3);
  return norm.forward(ops::to_tokens(y));
}

EfficientSelfAttention::EfficientSelfAttention(nn::ParameterStore& store, const std::string& name_, int64_t channels_,
                                               int heads_, int sr_ratio_, Rng& rng)
    : q(store, name_ + ".q", channels_, channels_, rng),
      kv(store, name_ + ".kv", channels_, 2 * channels_, rng),
      proj(store, name_ + ".proj", channels_, channels_, rng),
      channels(channels_),
      heads(heads_),
      sr_ratio(sr_ratio_),
      name(name_) {
  if (sr_ratio > 1) {
    sr = nn::Conv2d(store, name + ".sr", channels, channels, sr_ratio, sr_ratio, 0, rng);
    sr_norm = nn::LayerNorm(store, name + ".sr_norm", channels);
  }
}

Tensor EfficientSelfAttention::forward(const Tensor& x, int64_t h, int64_t w) const {
  if (x.rank() != 3 || x.dim(1) != h * w || x.dim(2) != channels) {
    throw ShapeError("efficient_self_attention: tokens " + shape_str(x.shape()) + " do not form a " +
                     std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(channels) + " grid");
  }
  if (h % sr_ratio != 0 || w % sr_ratio != 0) {
    throw ShapeError("efficient_self_attention: sr_ratio " + std::to_string(sr_ratio) + " does not divide grid " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor queries = q.forward(x);
  Tensor source = x;
  if (sr_ratio > 1) source = sr_norm.forward(ops::to_tokens(sr.forward(ops::from_tokens(x, h, w))));
  Tensor keys_values = kv.forward(source);
  const int64_t dh = channels / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> outs;
  for (int hd = 0; hd < heads; ++hd) {
    Tensor qh = ops::slice(queries, 2, hd * dh, dh);
    Tensor kh = ops::slice(keys_values, 2, hd * dh, dh);
    Tensor vh = ops::slice(keys_values, 2, channels + hd * dh, dh);
    Tensor attn = ops::softmax(ops::scale(ops::matmul(qh, kh, false, true), scale), -1);
    probe::emit(name + ".attn", attn);
    outs.push_back(ops::matmul(attn, vh));
  }
  Tensor merged = heads == 1 ? outs[0] : ops::concat(outs, 2);
  return proj.forward(merged);
}

MixFfn::MixFfn(nn::ParameterStore& store, const std::string& name, int64_t channels, int expansion, Rng& rng)
    : fc1(store, name + ".fc1", channels, channels * expansion, rng),
      dwconv(store, name + ".dwconv", channels * expansion, channels * expansion, 3, 1, 1, rng, true,
             channels * expansion),
      fc2(store, name + ".fc2", channels * expansion, channels, rng) {}

Tensor MixFfn::forward(const Tensor& x, int64_t h, int64_t w) const {
  if (x.rank() != 3 || x.dim(1) != h * w) {
    throw ShapeError("mix_ffn: " + std::to_string(x.rank() == 3 ? x.dim(1) : -1) + " tokens for a " +
                     std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  Tensor hidden = fc1.forward(x);
  hidden = ops::to_tokens(dwconv.forward(ops::from_tokens(hidden, h, w)));
  return fc2.forward(ops::gelu(hidden));
}

TransformerBlock::TransformerBlock(nn::ParameterStore& store, const std::string& name, int64_t channels, int heads,
                                   int sr_ratio, int expansion, Rng& rng)
    : norm1(store, name + ".norm1", channels),
      attn(store, name + ".attn", channels, heads, sr_ratio, rng),
      norm2(store, name + ".norm2", channels),
      ffn(store, name + ".ffn", channels, expansion, rng) {}

Tensor TransformerBlock::forward(const Tensor& x, int64_t h, int64_t w) const {
  Tensor y = ops::add(x, attn.forward(norm1.forward(x), h, w));
  return ops::add(y, ffn.forward(norm2.forward(y), h, w));
}

Encoder::Encoder(nn::ParameterStore& store, const EncoderConfig& cfg, Rng& rng, const std::string& name) : cfg_(cfg) {
  cfg_.validate();
  int64_t in = cfg_.in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string sname = name + ".stage" + std::to_string(i + 1);
    Stage& st = stages[static_cast<size_t>(i)];
    const int64_t c = cfg_.channels[static_cast<size_t>(i)];
    st.patch = OverlapPatchMerge(store, sname + ".patch", in, c, i, rng);
    for (int b = 0; b < cfg_.depths[static_cast<size_t>(i)]; ++b) {
      st.blocks.emplace_back(store, sname + ".block" + std::to_string(b), c, cfg_.heads[static_cast<size_t>(i)],
                             cfg_.sr_ratios[static_cast<size_t>(i)], cfg_.ffn_expansion, rng);
    }
    st.norm = nn::LayerNorm(store, sname + ".norm", c);
    in = c;
  }
}

FeaturePyramid Encoder::forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != cfg_.in_channels) {
    throw ShapeError("encoder: expected [B, " + std::to_string(cfg_.in_channels) + ", H, W], got " +
                     shape_str(image.shape()));
  }
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
    throw ShapeError("encoder: input " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                     " is not divisible by 32");
  }
  FeaturePyramid pyr;
  Tensor x = image;
  for (size_t i = 0; i < 4; ++i) {
    flops::Scope scope("stage" + std::to_string(i + 1));
    const Stage& st = stages[i];
    int64_t h = 0, w = 0;
    Tensor tokens = st.patch.forward(x, h, w);
    for (const auto& block : st.blocks) tokens = block.forward(tokens, h, w);
    x = ops::from_tokens(st.norm.forward(tokens), h, w);
    pyr.f[i] = x;
  }
  return pyr;
}

}  // namespace uwseg

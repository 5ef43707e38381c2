#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "uwseg/nn.hpp"

namespace uwseg {

/// Hierarchical transformer encoder settings (MiT-B0 defaults).
struct EncoderConfig {
  std::array<int64_t, 4> channels{32, 64, 160, 256};
  std::array<int, 4> depths{2, 2, 2, 2};
  std::array<int, 4> sr_ratios{8, 4, 2, 1};
  std::array<int, 4> heads{1, 2, 5, 8};
  int ffn_expansion = 4;
  int in_channels = 3;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

/// The four stage maps at strides 4, 8, 16, 32.
struct FeaturePyramid {
  std::array<Tensor, 4> f;
};

/// Strided conv + layer norm. Returns tokens [B, h*w, C].
class OverlapPatchMerge {
 public:
  OverlapPatchMerge() = default;
  OverlapPatchMerge(nn::ParameterStore& store, const std::string& name, int64_t in, int64_t out, int stage, Rng& rng);
  Tensor forward(const Tensor& x, int64_t& h, int64_t& w) const;

  nn::Conv2d proj;
  nn::LayerNorm norm;
};

/// Multi-head attention whose keys/values come from a grid reduced by sr_ratio.
class EfficientSelfAttention {
 public:
  EfficientSelfAttention() = default;
  EfficientSelfAttention(nn::ParameterStore& store, const std::string& name, int64_t channels, int heads, int sr_ratio,
                         Rng& rng);
  /// x: tokens [B, h*w, C]. The residual is added by the caller.
  Tensor forward(const Tensor& x, int64_t h, int64_t w) const;

  nn::Linear q;
  nn::Linear kv;
  nn::Linear proj;
  nn::Conv2d sr;
  nn::LayerNorm sr_norm;
  int64_t channels = 0;
  int heads = 1;
  int sr_ratio = 1;
  std::string name;
};

/// linear -> 3x3 depthwise conv -> GELU -> linear.
class MixFfn {
 public:
  MixFfn() = default;
  MixFfn(nn::ParameterStore& store, const std::string& name, int64_t channels, int expansion, Rng& rng);
  Tensor forward(const Tensor& x, int64_t h, int64_t w) const;

  nn::Linear fc1;
  nn::Conv2d dwconv;
  nn::Linear fc2;
};

class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(nn::ParameterStore& store, const std::string& name, int64_t channels, int heads, int sr_ratio,
                   int expansion, Rng& rng);
  Tensor forward(const Tensor& x, int64_t h, int64_t w) const;

  nn::LayerNorm norm1;
  EfficientSelfAttention attn;
  nn::LayerNorm norm2;
  MixFfn ffn;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParameterStore& store, const EncoderConfig& cfg, Rng& rng, const std::string& name = "encoder");

  /// image: [B, in_channels, H, W] with H, W divisible by 32.
  FeaturePyramid forward(const Tensor& image) const;

  const EncoderConfig& config() const { return cfg_; }

  struct Stage {
    OverlapPatchMerge patch;
    std::vector<TransformerBlock> blocks;
    nn::LayerNorm norm;
  };
  std::array<Stage, 4> stages;

 private:
  EncoderConfig cfg_;
};

}  // namespace uwseg

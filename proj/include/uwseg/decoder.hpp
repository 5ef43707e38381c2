#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "uwseg/encoder.hpp"
#include "uwseg/nn.hpp"

namespace uwseg {

struct MaaConfig {
  int64_t embed = 128;  // C
  int64_t n_cls = 2;
  float dropout = 0.1f;

  void validate() const;
};

struct FusionMaps {
  Tensor fusion1;
  Tensor fusion2;
  Tensor fusion;
};

/// 1x1 conv without bias followed by batch norm (C_i -> C).
class ConvBn {
 public:
  ConvBn() = default;
  ConvBn(nn::ParameterStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng);
  Tensor forward(const Tensor& x, bool training) const;

  nn::Conv2d conv;
  nn::BatchNorm2d bn;
};

/// Sigmoid(Conv1x1(x)): a gate in (0, 1).
class ScGate {
 public:
  ScGate() = default;
  ScGate(nn::ParameterStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;

  nn::Conv2d conv;
};

/// Gated multi-scale fusion at stride 8 plus the segmentation head.
class MaaDecoder {
 public:
  MaaDecoder() = default;
  MaaDecoder(nn::ParameterStore& store, const std::array<int64_t, 4>& channels, const MaaConfig& cfg, Rng& rng,
             const std::string& name = "decoder");

  /// Up(SC(F3)) * SC(F2) * Down(SC(F1)) * (CB(F2) + Down(CB(F1))).
  Tensor fusion1(const FeaturePyramid& pyr, bool training) const;
  /// Up(SC(F4)) * Up(CB(F3)).
  Tensor fusion2(const FeaturePyramid& pyr, bool training) const;
  /// fusion1 + fusion2 + Up(CB(F4)).
  FusionMaps fuse(const FeaturePyramid& pyr, bool training) const;
  /// Dropout -> 1x1 conv C -> n_cls -> bilinear to (out_h, out_w).
  Tensor head(const Tensor& fusion, int64_t out_h, int64_t out_w, bool training, Rng* dropout_rng) const;

  /// Logits [B, n_cls, out_h, out_w].
  Tensor forward(const FeaturePyramid& pyr, int64_t out_h, int64_t out_w, bool training, Rng* dropout_rng) const;

  const MaaConfig& config() const { return cfg_; }

  std::array<ScGate, 4> gates;
  std::array<ConvBn, 4> content;
  nn::Conv2d classifier;

 private:
  MaaConfig cfg_;
};

/// Baseline decoder: per-stage linear to C, upsample to stride 4, concat, linear 4C -> C, linear C -> n_cls.
class AllMlpDecoder {
 public:
  AllMlpDecoder() = default;
  AllMlpDecoder(nn::ParameterStore& store, const std::array<int64_t, 4>& channels, const MaaConfig& cfg, Rng& rng,
                const std::string& name = "decoder");

  /// Logits at the decoder's native stride 4.
  Tensor native(const FeaturePyramid& pyr, bool training, Rng* dropout_rng) const;
  Tensor forward(const FeaturePyramid& pyr, int64_t out_h, int64_t out_w, bool training, Rng* dropout_rng) const;

  std::array<nn::Linear, 4> stage_proj;
  nn::Linear fuse;
  nn::Linear classifier;

 private:
  MaaConfig cfg_;
};

}  // namespace uwseg

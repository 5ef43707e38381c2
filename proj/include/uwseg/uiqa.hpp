#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "uwseg/encoder.hpp"
#include "uwseg/nn.hpp"

namespace uwseg {

struct UiqaConfig {
  int P = 32;
  int n_layers = 4;  // N_M
  int n_heads = 4;   // N_C
  /// Shared K/V width C; 0 means C_S (sum of stage channels).
  int64_t embed = 0;
  /// One MLP (and its norms) per stage when false; a single shared one needs equal widths and is rejected otherwise.
  bool share_mlp = false;

  void validate(const std::array<int64_t, 4>& channels) const;
  int64_t resolved_embed(const std::array<int64_t, 4>& channels) const;
};

/// Per-stage tokens S_i [B, d, C_i] and their channel concatenation S [B, d, C_S].
struct TokenBundle {
  std::array<Tensor, 4> s;
  Tensor cat;
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  int64_t d() const { return grid_h * grid_w; }
};

/// softmax(IN(q^T k / sqrt(c_s))) v^T for q [B, d, C_i], k, v [B, d, C] -> [B, C_i, d].
/// Instance norm covers the whole C_i x C logit matrix of each sample; softmax runs along C.
Tensor channel_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t c_s,
                              const std::string& probe_name = "");

/// Projections of one head: W_K, W_V [C_S, C] and W_Qi [C_i, C_i].
struct UiqaHead {
  Tensor w_k;
  Tensor w_v;
  std::array<Tensor, 4> w_q;
};

struct UiqaMlp {
  nn::LayerNorm norm_in;
  nn::Linear fc1;
  nn::Linear fc2;
  nn::LayerNorm norm_out;
};

class MCSALayer {
 public:
  MCSALayer() = default;
  MCSALayer(nn::ParameterStore& store, const std::string& name, const std::array<int64_t, 4>& channels,
            const UiqaConfig& cfg, Rng& rng);

  /// Consumes S_i (and their concatenation) and returns Op_i [B, d, C_i].
  std::array<Tensor, 4> forward(const std::array<Tensor, 4>& s) const;

  std::vector<UiqaHead> heads;
  std::vector<UiqaMlp> mlps;  // four, or one when shared
  std::string name;

 private:
  const UiqaMlp& mlp(size_t stage) const { return mlps.size() == 1 ? mlps[0] : mlps[stage]; }
  int64_t c_s_ = 0;
};

class Uiqa {
 public:
  Uiqa() = default;
  Uiqa(nn::ParameterStore& store, const std::array<int64_t, 4>& channels, const UiqaConfig& cfg, Rng& rng,
       const std::string& name = "uiqa");

  /// Stage i through a conv with kernel = stride = P / 2^i onto an (H/2P) x (W/2P) grid.
  TokenBundle encode(const FeaturePyramid& pyr) const;

  /// Op_i tokens back to the stage map: ReLU(BN(conv3x3(Up(grid)))) + F_i.
  Tensor reconstruct(size_t stage, const Tensor& op, const TokenBundle& tokens, const Tensor& f, bool training) const;

  FeaturePyramid forward(const FeaturePyramid& pyr, bool training) const;

  const UiqaConfig& config() const { return cfg_; }

  std::array<nn::Conv2d, 4> encoders;
  std::vector<MCSALayer> layers;
  std::array<nn::Conv2d, 4> recon_conv;
  std::array<nn::BatchNorm2d, 4> recon_bn;

 private:
  UiqaConfig cfg_;
  std::array<int64_t, 4> channels_{};
  std::shared_ptr<std::atomic<bool>> warned_single_token_ = std::make_shared<std::atomic<bool>>(false);
};

}  // namespace uwseg

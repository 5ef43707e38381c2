#include "uwseg/uiqa.hpp"

#include <cmath>
#include <iostream>

#include "uwseg/errors.hpp"
#include "uwseg/flops.hpp"
#include "uwseg/ops.hpp"
#include "uwseg/probe.hpp"

namespace uwseg {

namespace {

int64_t channel_sum(const std::array<int64_t, 4>& channels) {
  return channels[0] + channels[1] + channels[2] + channels[3];
}

}  // namespace

void UiqaConfig::validate(const std::array<int64_t, 4>& channels) const {
  if (P < 16 || P % 16 != 0) {
    throw ConfigError("uiqa: P must be a positive multiple of 16 so every stage kernel P/2^i is an integer, got " +
                      std::to_string(P));
  }
  if (n_layers < 1) throw ConfigError("uiqa: N_M must be >= 1");
  if (n_heads < 1) throw ConfigError("uiqa: N_C must be >= 1");
  if (embed < 0) throw ConfigError("uiqa: embed must be >= 0");
  if (share_mlp && !(channels[0] == channels[1] && channels[1] == channels[2] && channels[2] == channels[3])) {
    throw ConfigError("uiqa: a shared MLP requires equal stage widths");
  }
}

int64_t UiqaConfig::resolved_embed(const std::array<int64_t, 4>& channels) const {
  return embed > 0 ? embed : channel_sum(channels);
}

Tensor channel_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t c_s,
                              const std::string& probe_name) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(c_s));
  Tensor logits = ops::scale(ops::matmul(q, k, true, false), scale);  // [B, C_i, C]
  Tensor attn = ops::softmax(ops::instance_norm(logits, 1), -1);
  if (!probe_name.empty()) probe::emit(probe_name, attn);
  return ops::matmul(attn, v, false, true);  // [B, C_i, d]
}

MCSALayer::MCSALayer(nn::ParameterStore& store, const std::string& name_, const std::array<int64_t, 4>& channels,
                     const UiqaConfig& cfg, Rng& rng)
    : name(name_), c_s_(channel_sum(channels)) {
  const int64_t c = cfg.resolved_embed(channels);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const std::string hn = name + ".head" + std::to_string(h);
    UiqaHead head;
    head.w_k = store.add_parameter(hn + ".w_k", nn::trunc_normal({c_s_, c}, 0.02f, rng), true);
    head.w_v = store.add_parameter(hn + ".w_v", nn::trunc_normal({c_s_, c}, 0.02f, rng), true);
    for (size_t i = 0; i < 4; ++i) {
      head.w_q[i] = store.add_parameter(hn + ".w_q" + std::to_string(i + 1),
                                        nn::trunc_normal({channels[i], channels[i]}, 0.02f, rng), true);
    }
    heads.push_back(std::move(head));
  }
  const size_t n_mlp = cfg.share_mlp ? 1 : 4;
  for (size_t i = 0; i < n_mlp; ++i) {
    const std::string mn = name + ".mlp" + (cfg.share_mlp ? std::string() : std::to_string(i + 1));
    const int64_t ci = channels[i];
    mlps.push_back(UiqaMlp{nn::LayerNorm(store, mn + ".norm_in", ci), nn::Linear(store, mn + ".fc1", ci, 4 * ci, rng),
                           nn::Linear(store, mn + ".fc2", 4 * ci, ci, rng),
                           nn::LayerNorm(store, mn + ".norm_out", ci)});
  }
}

std::array<Tensor, 4> MCSALayer::forward(const std::array<Tensor, 4>& s) const {
  Tensor cat = ops::concat({s[0], s[1], s[2], s[3]}, 2);
  const float inv_heads = 1.0f / static_cast<float>(heads.size());
  std::array<Tensor, 4> csa_sum, q_sum;
  for (size_t h = 0; h < heads.size(); ++h) {
    const UiqaHead& head = heads[h];
    Tensor k = ops::matmul(cat, head.w_k);
    Tensor v = ops::matmul(cat, head.w_v);
    for (size_t i = 0; i < 4; ++i) {
      Tensor q = ops::matmul(s[i], head.w_q[i]);
      Tensor csa = channel_self_attention(q, k, v, c_s_,
                                          probe::active() ? name + ".head" + std::to_string(h) + ".stage" +
                                                                std::to_string(i + 1)
                                                          : std::string());
      csa_sum[i] = h == 0 ? csa : ops::add(csa_sum[i], csa);
      q_sum[i] = h == 0 ? q : ops::add(q_sum[i], q);
    }
  }
  std::array<Tensor, 4> out;
  for (size_t i = 0; i < 4; ++i) {
    // Head average of the attention output (transposed to tokens) plus the head-averaged query residual.
    Tensor m = ops::scale(ops::add(ops::transpose(csa_sum[i]), q_sum[i]), inv_heads);
    const UiqaMlp& f = mlp(i);
    Tensor hidden = f.fc2.forward(ops::gelu(f.fc1.forward(f.norm_in.forward(m))));
    out[i] = f.norm_out.forward(ops::add(m, hidden));
  }
  return out;
}

Uiqa::Uiqa(nn::ParameterStore& store, const std::array<int64_t, 4>& channels, const UiqaConfig& cfg, Rng& rng,
           const std::string& name)
    : cfg_(cfg), channels_(channels) {
  cfg_.validate(channels);
  for (size_t i = 0; i < 4; ++i) {
    const int k = cfg_.P >> (i + 1);
    encoders[i] = nn::Conv2d(store, name + ".encode" + std::to_string(i + 1), channels[i], channels[i], k, k, 0, rng);
  }
  for (int j = 0; j < cfg_.n_layers; ++j) {
    layers.emplace_back(store, name + ".layer" + std::to_string(j), channels, cfg_, rng);
  }
  for (size_t i = 0; i < 4; ++i) {
    const std::string rn = name + ".reconstruct" + std::to_string(i + 1);
    recon_conv[i] = nn::Conv2d(store, rn + ".conv", channels[i], channels[i], 3, 1, 1, rng);
    recon_bn[i] = nn::BatchNorm2d(store, rn + ".bn", channels[i]);
  }
}

TokenBundle Uiqa::encode(const FeaturePyramid& pyr) const {
  TokenBundle tb;
  for (size_t i = 0; i < 4; ++i) {
    const Tensor& f = pyr.f[i];
    const int64_t k = cfg_.P >> (i + 1);
    if (f.rank() != 4 || f.dim(1) != channels_[i]) {
      throw ShapeError("uiqa: stage " + std::to_string(i + 1) + " map " + shape_str(f.shape()) + " does not have " +
                       std::to_string(channels_[i]) + " channels");
    }
    if (f.dim(2) % k != 0 || f.dim(3) % k != 0) {
      throw ConfigError("uiqa: stage " + std::to_string(i + 1) + " map " + std::to_string(f.dim(2)) + "x" +
                        std::to_string(f.dim(3)) + " must be a multiple of " + std::to_string(k) +
                        " (input side a multiple of 2P = " + std::to_string(2 * cfg_.P) + ")");
    }
    Tensor grid = encoders[i].forward(f);
    if (i == 0) {
      tb.grid_h = grid.dim(2);
      tb.grid_w = grid.dim(3);
    } else if (grid.dim(2) != tb.grid_h || grid.dim(3) != tb.grid_w) {
      throw ShapeError("uiqa: stage " + std::to_string(i + 1) + " token grid does not match stage 1");
    }
    tb.s[i] = ops::to_tokens(grid);
  }
  if (tb.grid_h * tb.grid_w == 1 && !warned_single_token_->exchange(true)) {
    std::cerr << "warning: uiqa input is one 2P x 2P tile (P = " << cfg_.P
              << "), so every stage has a single token\n";
  }
  tb.cat = ops::concat({tb.s[0], tb.s[1], tb.s[2], tb.s[3]}, 2);
  return tb;
}

Tensor Uiqa::reconstruct(size_t stage, const Tensor& op, const TokenBundle& tokens, const Tensor& f,
                         bool training) const {
  Tensor grid = ops::from_tokens(op, tokens.grid_h, tokens.grid_w);
  Tensor up = ops::bilinear_resize(grid, f.dim(2), f.dim(3));
  Tensor enhanced = ops::relu(recon_bn[stage].forward(recon_conv[stage].forward(up), training));
  return ops::add(enhanced, f);
}

FeaturePyramid Uiqa::forward(const FeaturePyramid& pyr, bool training) const {
  TokenBundle tokens;
  {
    flops::Scope scope("encode");
    tokens = encode(pyr);
  }
  std::array<Tensor, 4> s = tokens.s;
  for (size_t j = 0; j < layers.size(); ++j) {
    flops::Scope scope("layer" + std::to_string(j));
    s = layers[j].forward(s);
  }
  FeaturePyramid out;
  flops::Scope scope("reconstruct");
  for (size_t i = 0; i < 4; ++i) out.f[i] = reconstruct(i, s[i], tokens, pyr.f[i], training);
  return out;
}

}  // namespace uwseg

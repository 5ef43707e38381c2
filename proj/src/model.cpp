#include "uwseg/model.hpp"

#include <numeric>

#include "uwseg/errors.hpp"
#include "uwseg/flops.hpp"

namespace uwseg {

std::string to_string(DecoderKind kind) { return kind == DecoderKind::maa ? "maa" : "allmlp"; }

DecoderKind parse_decoder(const std::string& s) {
  if (s == "maa") return DecoderKind::maa;
  if (s == "allmlp") return DecoderKind::allmlp;
  throw ConfigError("unknown decoder '" + s + "' (expected maa or allmlp)");
}

int64_t ModelConfig::resolved_decoder_embed() const {
  if (decoder_embed > 0) return decoder_embed;
  return decoder == DecoderKind::maa ? 128 : 256;
}

int64_t ModelConfig::size_multiple() const {
  return use_uiqa ? std::lcm<int64_t>(32, 2 * static_cast<int64_t>(uiqa.P)) : 32;
}

void ModelConfig::validate() const {
  encoder.validate();
  if (use_uiqa) uiqa.validate(encoder.channels);
  if (n_cls < 2) throw ConfigError("model.n_cls must be >= 2, got " + std::to_string(n_cls));
  if (decoder_embed < 0) throw ConfigError("model.C_embed must be >= 0");
  MaaConfig{resolved_decoder_embed(), n_cls, dropout}.validate();
}

void ModelConfig::check_input(int64_t h, int64_t w) const {
  const int64_t m = size_multiple();
  if (h % m != 0 || w % m != 0) {
    throw ShapeError("input " + std::to_string(h) + "x" + std::to_string(w) + " must have sides divisible by " +
                     std::to_string(m));
  }
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg), dropout_rng_(0) {
  cfg_.validate();
  Rng root(cfg_.seed);
  Rng enc_rng = root.fork();
  Rng uiqa_rng = root.fork();
  Rng dec_rng = root.fork();
  dropout_rng_ = root.fork();
  encoder_ = Encoder(store_, cfg_.encoder, enc_rng);
  if (cfg_.use_uiqa) uiqa_ = Uiqa(store_, cfg_.encoder.channels, cfg_.uiqa, uiqa_rng);
  MaaConfig dc{cfg_.resolved_decoder_embed(), cfg_.n_cls, cfg_.dropout};
  if (cfg_.decoder == DecoderKind::maa) {
    maa_ = MaaDecoder(store_, cfg_.encoder.channels, dc, dec_rng);
  } else {
    allmlp_ = AllMlpDecoder(store_, cfg_.encoder.channels, dc, dec_rng);
  }
}

Tensor Model::forward(const Tensor& images) {
  if (images.rank() != 4) throw ShapeError("model: expected [B, 3, H, W], got " + shape_str(images.shape()));
  const int64_t h = images.dim(2), w = images.dim(3);
  cfg_.check_input(h, w);
  FeaturePyramid pyr;
  {
    flops::Scope scope("encoder");
    pyr = encoder_.forward(images);
  }
  if (cfg_.use_uiqa) {
    flops::Scope scope("uiqa");
    pyr = uiqa_.forward(pyr, training_);
  }
  flops::Scope scope("decoder");
  if (cfg_.decoder == DecoderKind::maa) return maa_.forward(pyr, h, w, training_, &dropout_rng_);
  return allmlp_.forward(pyr, h, w, training_, &dropout_rng_);
}

}  // namespace uwseg

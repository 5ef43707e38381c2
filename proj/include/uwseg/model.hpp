#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "uwseg/decoder.hpp"
#include "uwseg/encoder.hpp"
#include "uwseg/nn.hpp"
#include "uwseg/uiqa.hpp"

namespace uwseg {

enum class DecoderKind { maa, allmlp };

std::string to_string(DecoderKind kind);
/// Throws ConfigError for anything other than "maa" or "allmlp".
DecoderKind parse_decoder(const std::string& s);

struct ModelConfig {
  EncoderConfig encoder;
  UiqaConfig uiqa;
  bool use_uiqa = true;
  DecoderKind decoder = DecoderKind::maa;
  /// Decoder width C; 0 picks the decoder default (128 for MAA, 256 for ALL-MLP).
  int64_t decoder_embed = 0;
  int64_t n_cls = 2;
  float dropout = 0.1f;
  uint64_t seed = 0;

  int64_t resolved_decoder_embed() const;
  /// Input sides must be multiples of this.
  int64_t size_multiple() const;
  void validate() const;
  /// Throws ShapeError naming the required multiple.
  void check_input(int64_t h, int64_t w) const;
};

/// Encoder -> (UIQA) -> decoder. Owns the parameter store.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// images [B, 3, H, W] -> logits [B, n_cls, H, W].
  Tensor forward(const Tensor& images);

  /// Training mode: batch statistics in BN, dropout on.
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  const Encoder& encoder() const { return encoder_; }
  const Uiqa* uiqa() const { return cfg_.use_uiqa ? &uiqa_ : nullptr; }
  const MaaDecoder* maa() const { return cfg_.decoder == DecoderKind::maa ? &maa_ : nullptr; }
  const AllMlpDecoder* allmlp() const { return cfg_.decoder == DecoderKind::allmlp ? &allmlp_ : nullptr; }

  /// The dropout stream; part of the reproducible training state.
  Rng& dropout_rng() { return dropout_rng_; }

 private:
  ModelConfig cfg_;
  nn::ParameterStore store_;
  Encoder encoder_;
  Uiqa uiqa_;
  MaaDecoder maa_;
  AllMlpDecoder allmlp_;
  Rng dropout_rng_;
  bool training_ = false;
};

}  // namespace uwseg

#include "uwseg/decoder.hpp"

#include "uwseg/errors.hpp"
#include "uwseg/flops.hpp"
#include "uwseg/ops.hpp"
#include "uwseg/probe.hpp"

namespace uwseg {

namespace {

Tensor resize_like(const Tensor& x, const Tensor& ref) { return ops::bilinear_resize(x, ref.dim(2), ref.dim(3)); }

void check_strides(const FeaturePyramid& pyr) {
  for (size_t i = 1; i < 4; ++i) {
    if (pyr.f[i].dim(2) * 2 != pyr.f[i - 1].dim(2) || pyr.f[i].dim(3) * 2 != pyr.f[i - 1].dim(3)) {
      throw ShapeError("decoder: stage " + std::to_string(i + 1) + " map " + shape_str(pyr.f[i].shape()) +
                       " is not half of stage " + std::to_string(i) + " " + shape_str(pyr.f[i - 1].shape()));
    }
  }
}

}  // namespace

void MaaConfig::validate() const {
  if (embed < 1) throw ConfigError("decoder: embed C must be >= 1");
  if (n_cls < 2) throw ConfigError("decoder: n_cls must be >= 2");
  if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("decoder: dropout must be in [0, 1)");
}

ConvBn::ConvBn(nn::ParameterStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng)
    : conv(store, name + ".conv", in, out, 1, 1, 0, rng, false), bn(store, name + ".bn", out) {}

Tensor ConvBn::forward(const Tensor& x, bool training) const { return bn.forward(conv.forward(x), training); }

ScGate::ScGate(nn::ParameterStore& store, const std::string& name, int64_t in, int64_t out, Rng& rng)
    : conv(store, name + ".conv", in, out, 1, 1, 0, rng) {}

Tensor ScGate::forward(const Tensor& x) const { return ops::sigmoid(conv.forward(x)); }

MaaDecoder::MaaDecoder(nn::ParameterStore& store, const std::array<int64_t, 4>& channels, const MaaConfig& cfg,
                       Rng& rng, const std::string& name)
    : cfg_(cfg) {
  cfg_.validate();
  for (size_t i = 0; i < 4; ++i) {
    gates[i] = ScGate(store, name + ".gate" + std::to_string(i + 1), channels[i], cfg_.embed, rng);
    content[i] = ConvBn(store, name + ".content" + std::to_string(i + 1), channels[i], cfg_.embed, rng);
  }
  classifier = nn::Conv2d(store, name + ".classifier", cfg_.embed, cfg_.n_cls, 1, 1, 0, rng);
  // Small head init keeps the initial probabilities near 0.5.
  for (float& v : classifier.weight.mutable_data()) v = static_cast<float>(rng.normal(0.0, 0.01));
}

Tensor MaaDecoder::fusion1(const FeaturePyramid& pyr, bool training) const {
  check_strides(pyr);
  const Tensor& ref = pyr.f[1];
  Tensor g3 = resize_like(gates[2].forward(pyr.f[2]), ref);
  Tensor g2 = gates[1].forward(pyr.f[1]);
  Tensor g1 = resize_like(gates[0].forward(pyr.f[0]), ref);
  probe::emit("decoder.gate3", g3);
  probe::emit("decoder.gate2", g2);
  probe::emit("decoder.gate1", g1);
  Tensor detail = ops::add(content[1].forward(pyr.f[1], training),
                           resize_like(content[0].forward(pyr.f[0], training), ref));
  return ops::mul(ops::mul(ops::mul(g3, g2), g1), detail);
}

Tensor MaaDecoder::fusion2(const FeaturePyramid& pyr, bool training) const {
  check_strides(pyr);
  const Tensor& ref = pyr.f[1];
  Tensor g4 = resize_like(gates[3].forward(pyr.f[3]), ref);
  probe::emit("decoder.gate4", g4);
  return ops::mul(g4, resize_like(content[2].forward(pyr.f[2], training), ref));
}

FusionMaps MaaDecoder::fuse(const FeaturePyramid& pyr, bool training) const {
  FusionMaps m;
  m.fusion1 = fusion1(pyr, training);
  m.fusion2 = fusion2(pyr, training);
  Tensor context = resize_like(content[3].forward(pyr.f[3], training), pyr.f[1]);
  m.fusion = ops::add(ops::add(m.fusion1, m.fusion2), context);
  return m;
}

Tensor MaaDecoder::head(const Tensor& fusion, int64_t out_h, int64_t out_w, bool training, Rng* dropout_rng) const {
  Tensor x = fusion;
  if (training && cfg_.dropout > 0.0f) {
    if (!dropout_rng) throw ContractError("decoder: training-mode dropout needs an rng");
    x = ops::dropout(x, cfg_.dropout, true, *dropout_rng);
  }
  return ops::bilinear_resize(classifier.forward(x), out_h, out_w);
}

Tensor MaaDecoder::forward(const FeaturePyramid& pyr, int64_t out_h, int64_t out_w, bool training,
                           Rng* dropout_rng) const {
  FusionMaps m;
  {
    flops::Scope scope("fuse");
    m = fuse(pyr, training);
  }
  flops::Scope scope("head");
  return head(m.fusion, out_h, out_w, training, dropout_rng);
}

AllMlpDecoder::AllMlpDecoder(nn::ParameterStore& store, const std::array<int64_t, 4>& channels, const MaaConfig& cfg,
                             Rng& rng, const std::string& name)
    : cfg_(cfg) {
  cfg_.validate();
  for (size_t i = 0; i < 4; ++i) {
    stage_proj[i] = nn::Linear(store, name + ".proj" + std::to_string(i + 1), channels[i], cfg_.embed, rng);
  }
  fuse = nn::Linear(store, name + ".fuse", 4 * cfg_.embed, cfg_.embed, rng);
  classifier = nn::Linear(store, name + ".classifier", cfg_.embed, cfg_.n_cls, rng);
}

Tensor AllMlpDecoder::native(const FeaturePyramid& pyr, bool training, Rng* dropout_rng) const {
  check_strides(pyr);
  const int64_t h = pyr.f[0].dim(2), w = pyr.f[0].dim(3);
  std::vector<Tensor> parts;
  for (size_t i = 0; i < 4; ++i) {
    const Tensor& f = pyr.f[i];
    Tensor projected = ops::from_tokens(stage_proj[i].forward(ops::to_tokens(f)), f.dim(2), f.dim(3));
    parts.push_back(ops::bilinear_resize(projected, h, w));
  }
  Tensor tokens = ops::to_tokens(ops::concat(parts, 1));
  tokens = fuse.forward(tokens);
  if (training && cfg_.dropout > 0.0f) {
    if (!dropout_rng) throw ContractError("decoder: training-mode dropout needs an rng");
    tokens = ops::dropout(tokens, cfg_.dropout, true, *dropout_rng);
  }
  return ops::from_tokens(classifier.forward(tokens), h, w);
}

Tensor AllMlpDecoder::forward(const FeaturePyramid& pyr, int64_t out_h, int64_t out_w, bool training,
                              Rng* dropout_rng) const {
  Tensor logits;
  {
    flops::Scope scope("fuse");
    logits = native(pyr, training, dropout_rng);
  }
  flops::Scope scope("head");
  return ops::bilinear_resize(logits, out_h, out_w);
}

}  // namespace uwseg

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "uwseg/decoder.hpp"
#include "uwseg/errors.hpp"
#include "uwseg/flops.hpp"
#include "uwseg/grad_check.hpp"
#include "uwseg/metrics.hpp"
#include "uwseg/model.hpp"
#include "uwseg/ops.hpp"
#include "uwseg/probe.hpp"

using namespace uwseg;
using test::random_tensor;

namespace {

const std::array<int64_t, 4> kChannels{32, 64, 160, 256};
const std::array<int64_t, 4> kSmall{4, 6, 8, 10};

FeaturePyramid random_pyramid(int64_t h, int64_t w, uint64_t seed, const std::array<int64_t, 4>& ch = kChannels) {
  FeaturePyramid p;
  for (size_t i = 0; i < 4; ++i) {
    const int64_t s = int64_t{4} << i;
    p.f[i] = random_tensor({1, ch[i], h / s, w / s}, seed + i);
  }
  return p;
}

MaaDecoder make_maa(nn::ParameterStore& store, const std::array<int64_t, 4>& ch, int64_t embed, uint64_t seed) {
  Rng rng(seed);
  return MaaDecoder(store, ch, MaaConfig{embed, 3, 0.1f}, rng);
}

void set_gate(const ScGate& g, float weight, float bias) {
  for (float& v : Tensor(g.conv.weight).mutable_data()) v = weight;
  for (float& v : Tensor(g.conv.bias).mutable_data()) v = bias;
}

// Eval-mode ConvBn assembled from primitives.
Tensor conv_bn_oracle(const ConvBn& cb, const Tensor& x) {
  return ops::batch_norm(ops::conv2d(x, cb.conv.weight, {}, 1, 0), cb.bn.gamma, cb.bn.beta, cb.bn.running_mean.clone(),
                         cb.bn.running_var.clone(), false);
}

Tensor gate_oracle(const ScGate& g, const Tensor& x) { return ops::sigmoid(ops::conv2d(x, g.conv.weight, g.conv.bias, 1, 0)); }

void randomize_bn(const MaaDecoder& d, uint64_t seed) {
  Rng rng(seed);
  for (const ConvBn& cb : d.content) {
    for (float& v : Tensor(cb.bn.gamma).mutable_data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
    for (float& v : Tensor(cb.bn.beta).mutable_data()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (float& v : Tensor(cb.bn.running_mean).mutable_data()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
    for (float& v : Tensor(cb.bn.running_var).mutable_data()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  }
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (int64_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.at(i), b.at(i), tol) << "index " << i;
}

}  // namespace

// ---- gates ---------------------------------------------------------------------------

TEST(ScGate, ZeroWeightsGiveHalfAndBiasSaturates) {
  nn::ParameterStore store;
  Rng rng(1);
  ScGate g(store, "g", 4, 3, rng);
  const Tensor x = random_tensor({1, 4, 5, 5}, 2);
  set_gate(g, 0.0f, 0.0f);
  for (float v : test::values(g.forward(x))) EXPECT_EQ(v, 0.5f);
  set_gate(g, 0.0f, 10.0f);
  for (float v : test::values(g.forward(x))) EXPECT_GT(v, 0.9999f);
}

TEST(ScGate, MatchesSigmoidOfConv) {
  nn::ParameterStore store;
  Rng rng(3);
  ScGate g(store, "g", 4, 3, rng);
  const Tensor x = random_tensor({2, 4, 5, 5}, 4);
  expect_close(g.forward(x), gate_oracle(g, x), 1e-6);
}

// ---- fusion paths ----------------------------------------------------------------------

TEST(Fusion1, SaturatedGatesPassDetailSum) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 8, 5);
  randomize_bn(d, 6);
  for (size_t i = 0; i < 3; ++i) set_gate(d.gates[i], 0.0f, 40.0f);
  const FeaturePyramid p = random_pyramid(64, 64, 7, kSmall);
  const Tensor expected = ops::add(conv_bn_oracle(d.content[1], p.f[1]),
                                   ops::bilinear_resize(conv_bn_oracle(d.content[0], p.f[0]), 8, 8));
  expect_close(d.fusion1(p, false), expected, 1e-5);
}

TEST(Fusion1, AnyClosedGateVetoes) {
  for (size_t closed = 0; closed < 3; ++closed) {
    nn::ParameterStore store;
    MaaDecoder d = make_maa(store, kSmall, 8, 8);
    set_gate(d.gates[closed], 0.0f, -40.0f);
    for (float v : test::values(d.fusion1(random_pyramid(64, 64, 9, kSmall), false))) EXPECT_NEAR(v, 0.0f, 1e-10);
  }
}

TEST(Fusion1, MatchesCompositionalOracle) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 8, 10);
  randomize_bn(d, 11);
  const FeaturePyramid p = random_pyramid(64, 96, 12, kSmall);
  const auto up = [&](const Tensor& t) { return ops::bilinear_resize(t, p.f[1].dim(2), p.f[1].dim(3)); };
  Tensor expected = ops::mul(up(gate_oracle(d.gates[2], p.f[2])), gate_oracle(d.gates[1], p.f[1]));
  expected = ops::mul(expected, up(gate_oracle(d.gates[0], p.f[0])));
  expected = ops::mul(expected, ops::add(conv_bn_oracle(d.content[1], p.f[1]), up(conv_bn_oracle(d.content[0], p.f[0]))));
  expect_close(d.fusion1(p, false), expected, 1e-5);
}

TEST(Fusion2, GateIdentityAndHalving) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 8, 13);
  randomize_bn(d, 14);
  FeaturePyramid p = random_pyramid(64, 64, 15, kSmall);
  const Tensor up3 = ops::bilinear_resize(conv_bn_oracle(d.content[2], p.f[2]), 8, 8);
  set_gate(d.gates[3], 0.0f, 40.0f);
  expect_close(d.fusion2(p, false), up3, 1e-6);
  // A zero stage-4 map with zero gate bias opens the gate halfway.
  Rng rng(16);
  for (float& v : Tensor(d.gates[3].conv.weight).mutable_data()) v = static_cast<float>(rng.uniform(-1, 1));
  for (float& v : Tensor(d.gates[3].conv.bias).mutable_data()) v = 0.0f;
  p.f[3] = Tensor::zeros(p.f[3].shape());
  expect_close(d.fusion2(p, false), ops::scale(up3, 0.5f), 1e-6);
}

TEST(Fusion2, MatchesCompositionalOracle) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 8, 17);
  randomize_bn(d, 18);
  const FeaturePyramid p = random_pyramid(128, 64, 19, kSmall);
  const auto up = [&](const Tensor& t) { return ops::bilinear_resize(t, p.f[1].dim(2), p.f[1].dim(3)); };
  const Tensor expected = ops::mul(up(gate_oracle(d.gates[3], p.f[3])), up(conv_bn_oracle(d.content[2], p.f[2])));
  expect_close(d.fusion2(p, false), expected, 1e-5);
}

TEST(Fuse, AdditiveDecompositionIsExact) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 8, 20);
  const FeaturePyramid p = random_pyramid(64, 64, 21, kSmall);
  const FusionMaps full = d.fuse(p, false);
  const Tensor context = ops::bilinear_resize(conv_bn_oracle(d.content[3], p.f[3]), 8, 8);
  expect_close(full.fusion, ops::add(ops::add(full.fusion1, full.fusion2), context), 1e-6);
  // Zeroing the detail content convs isolates the context path and vice versa.
  for (size_t i : {0, 1}) for (float& v : Tensor(d.content[i].conv.weight).mutable_data()) v = 0.0f;
  for (float v : test::values(d.fusion1(p, false))) EXPECT_EQ(v, 0.0f);
  for (float& v : Tensor(d.content[2].conv.weight).mutable_data()) v = 0.0f;
  for (float v : test::values(d.fusion2(p, false))) EXPECT_EQ(v, 0.0f);
  // With every content path zero the fusion is zero.
  for (float& v : Tensor(d.content[3].conv.weight).mutable_data()) v = 0.0f;
  for (float v : test::values(d.fuse(p, false).fusion)) EXPECT_EQ(v, 0.0f);
}

TEST(Fuse, OutputAtStride8AndGatesInsideUnitInterval) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kChannels, 128, 22);
  for (int64_t h : {64, 128, 192})
    for (int64_t w : {64, 128, 192}) {
      probe::Recorder rec;
      const FeaturePyramid p = random_pyramid(h, w, 23);
      const FusionMaps m = d.fuse(p, false);
      for (const Tensor* t : {&m.fusion1, &m.fusion2, &m.fusion}) EXPECT_EQ(t->shape(), (Shape{1, 128, h / 8, w / 8}));
      const auto gates = rec.find("decoder.gate");
      ASSERT_EQ(gates.size(), 4u);
      for (const Tensor& g : gates)
        for (float v : g.data()) ASSERT_TRUE(v > 0.0f && v < 1.0f);
      const Tensor native = d.head(m.fusion, h / 8, w / 8, false, nullptr);
      EXPECT_EQ(native.shape(), (Shape{1, 3, h / 8, w / 8}));
    }
}

TEST(Fuse, StrideMismatchIsShapeError) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 8, 24);
  FeaturePyramid p = random_pyramid(64, 64, 25, kSmall);
  p.f[2] = random_tensor({1, kSmall[2], 3, 4}, 26);
  EXPECT_THROW(d.fuse(p, false), ShapeError);
}

TEST(Fuse, GradCheckThroughFusionPaths) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 6, 27);
  FeaturePyramid p = random_pyramid(64, 64, 28, kSmall);
  std::vector<Tensor> wrt;
  for (Tensor& f : p.f) {
    f.set_requires_grad(true);
    wrt.push_back(f);
  }
  for (const auto& [_, t] : store.parameters()) wrt.push_back(t);
  const Tensor w = random_tensor({1, 6, 8, 8}, 29);
  const auto r = grad_check([&] { return ops::sum(ops::mul(d.fuse(p, false).fusion, w)); }, wrt);
  EXPECT_LT(r.max_rel_error, 1e-2);
}

// ---- head and baseline ---------------------------------------------------------------------

TEST(Head, EvalIsDeterministicTrainingDropsOut) {
  nn::ParameterStore store;
  MaaDecoder d = make_maa(store, kSmall, 8, 30);
  const FeaturePyramid p = random_pyramid(64, 64, 31, kSmall);
  const Tensor a = d.forward(p, 64, 64, false, nullptr), b = d.forward(p, 64, 64, false, nullptr);
  EXPECT_EQ(a.shape(), (Shape{1, 3, 64, 64}));
  EXPECT_TRUE(test::bit_equal(a, b));
  Rng rng(32);
  EXPECT_FALSE(test::bit_equal(d.forward(p, 64, 64, true, &rng), d.forward(p, 64, 64, true, &rng)));
  EXPECT_THROW(d.forward(p, 64, 64, true, nullptr), ContractError);
}

TEST(AllMlp, NativeStride4AndFullResolution) {
  nn::ParameterStore store;
  Rng rng(33);
  AllMlpDecoder d(store, kChannels, MaaConfig{256, 6, 0.1f}, rng);
  for (int64_t h : {64, 128, 192}) {
    const FeaturePyramid p = random_pyramid(h, 128, 34);
    EXPECT_EQ(d.native(p, false, nullptr).shape(), (Shape{1, 6, h / 4, 32}));
    EXPECT_EQ(d.forward(p, h, 128, false, nullptr).shape(), (Shape{1, 6, h, 128}));
  }
}

TEST(AllMlp, IdenticalStagesGiveLinearImage) {
  // Equal-width stages, identity projections and fuse = [I I I I]: the head
  // input is four times the upsampled shared feature.
  const std::array<int64_t, 4> ch{4, 4, 4, 4};
  nn::ParameterStore store;
  Rng rng(35);
  AllMlpDecoder d(store, ch, MaaConfig{4, 2, 0.0f}, rng);
  for (auto& l : d.stage_proj) {
    for (float& v : Tensor(l.weight).mutable_data()) v = 0.0f;
    for (int64_t i = 0; i < 4; ++i) Tensor(l.weight).ptr()[i * 4 + i] = 1.0f;
  }
  for (float& v : Tensor(d.fuse.weight).mutable_data()) v = 0.0f;
  for (int64_t o = 0; o < 4; ++o)
    for (int64_t s = 0; s < 4; ++s) Tensor(d.fuse.weight).ptr()[o * 16 + s * 4 + o] = 1.0f;
  const Tensor shared = random_tensor({1, 4, 16, 16}, 36);
  FeaturePyramid p;
  for (size_t i = 0; i < 4; ++i) p.f[i] = ops::bilinear_resize(shared, 16 >> i, 16 >> i);
  std::vector<Tensor> ups;
  for (size_t i = 0; i < 4; ++i) ups.push_back(ops::bilinear_resize(p.f[i], 16, 16));
  const Tensor sum = ops::add(ops::add(ups[0], ups[1]), ops::add(ups[2], ups[3]));
  const Tensor tokens = ops::to_tokens(sum);
  const Tensor expected = ops::from_tokens(d.classifier.forward(tokens), 16, 16);
  expect_close(d.native(p, false, nullptr), expected, 1e-5);
}

TEST(DecoderCost, MaaCheaperThanAllMlp) {
  nn::ParameterStore sm, sa;
  Rng r1(37), r2(38);
  MaaDecoder maa(sm, kChannels, MaaConfig{128, 6, 0.1f}, r1);
  AllMlpDecoder all(sa, kChannels, MaaConfig{256, 6, 0.1f}, r2);
  EXPECT_LT(sm.parameter_count(), sa.parameter_count());
  const FeaturePyramid p = random_pyramid(128, 128, 39);
  NoGradGuard guard;
  int64_t f_maa = 0, f_all = 0;
  {
    flops::Counter c;
    maa.forward(p, 128, 128, false, nullptr);
    f_maa = c.total();
  }
  {
    flops::Counter c;
    all.forward(p, 128, 128, false, nullptr);
    f_all = c.total();
  }
  EXPECT_LT(f_maa, f_all);
  // Equal width as well.
  nn::ParameterStore sa2;
  Rng r3(40);
  AllMlpDecoder all128(sa2, kChannels, MaaConfig{128, 6, 0.1f}, r3);
  flops::Counter c;
  all128.forward(p, 128, 128, false, nullptr);
  EXPECT_LT(f_maa, c.total());
}

TEST(DecoderCost, MaaFlopsIncreaseWithWidth) {
  const FeaturePyramid p = random_pyramid(128, 128, 41);
  int64_t prev = 0;
  for (int64_t c : {128, 256, 512}) {
    nn::ParameterStore store;
    MaaDecoder d = make_maa(store, kChannels, c, 42);
    NoGradGuard guard;
    flops::Counter counter;
    d.forward(p, 128, 128, false, nullptr);
    EXPECT_GT(counter.total(), prev);
    prev = counter.total();
  }
}

TEST(Argmax, InvariantToPerPixelShift) {
  const Tensor logits = random_tensor({2, 4, 5, 6}, 43, -3, 3);
  Tensor shifted = logits.clone();
  Rng rng(44);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 30; ++i) {
      const float s = static_cast<float>(rng.uniform(-10, 10));
      for (int64_t c = 0; c < 4; ++c) shifted.ptr()[(n * 4 + c) * 30 + i] += s;
    }
  EXPECT_EQ(argmax(logits), argmax(shifted));
}

// ---- whole model ------------------------------------------------------------------------

TEST(Model, ForwardShapesAndInputContract) {
  ModelConfig cfg;
  cfg.n_cls = 6;
  Model m(cfg);
  EXPECT_EQ(cfg.size_multiple(), 64);
  EXPECT_EQ(m.forward(Tensor::zeros({1, 3, 64, 128})).shape(), (Shape{1, 6, 64, 128}));
  EXPECT_THROW(m.forward(Tensor::zeros({1, 3, 96, 64})), ShapeError);
  cfg.use_uiqa = false;
  EXPECT_EQ(cfg.size_multiple(), 32);
}

TEST(Model, ParameterTotalsNearReference) {
  ModelConfig cfg;
  cfg.n_cls = 6;
  cfg.use_uiqa = false;
  cfg.decoder = DecoderKind::allmlp;
  const int64_t baseline = Model(cfg).store().parameter_count();
  EXPECT_NEAR(static_cast<double>(baseline), 3.72e6, 0.15 * 3.72e6);
  cfg.decoder = DecoderKind::maa;
  EXPECT_LT(Model(cfg).store().parameter_count(), baseline);
}

TEST(Model, SameSeedSameWeights) {
  ModelConfig cfg;
  cfg.use_uiqa = false;
  cfg.seed = 9;
  Model a(cfg), b(cfg);
  for (const auto& [name, t] : a.store().parameters()) ASSERT_TRUE(test::bit_equal(t, b.store().parameter(name))) << name;
}

TEST(Model, DecoderNames) {
  EXPECT_EQ(parse_decoder("maa"), DecoderKind::maa);
  EXPECT_EQ(parse_decoder("allmlp"), DecoderKind::allmlp);
  EXPECT_THROW(parse_decoder("fpn"), ConfigError);
}

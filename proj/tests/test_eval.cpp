#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "test_util.hpp"
#include "uwseg/errors.hpp"
#include "uwseg/eval.hpp"
#include "uwseg/loss.hpp"

using namespace uwseg;

namespace {

ModelConfig tiny_config(int64_t n_cls = 3, DecoderKind decoder = DecoderKind::maa, bool uiqa = true) {
  ModelConfig c;
  c.encoder.channels = {8, 16, 24, 32};
  c.encoder.depths = {1, 1, 1, 1};
  c.encoder.heads = {1, 1, 1, 2};
  c.uiqa.P = 16;
  c.uiqa.n_layers = 1;
  c.uiqa.n_heads = 1;
  c.use_uiqa = uiqa;
  c.decoder = decoder;
  c.decoder_embed = 16;
  c.n_cls = n_cls;
  c.seed = 3;
  return c;
}

// Set-based IoU straight from the pixel lists.
double set_iou(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt, int32_t c, bool& present) {
  std::set<std::pair<size_t, size_t>> p, g;
  for (size_t n = 0; n < gt.size(); ++n)
    for (size_t i = 0; i < gt[n].values.size(); ++i) {
      if (gt[n].values[i] == kIgnoreIndex) continue;
      if (pred[n].values[i] == c) p.insert({n, i});
      if (gt[n].values[i] == c) g.insert({n, i});
    }
  std::vector<std::pair<size_t, size_t>> inter, uni;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(inter));
  std::set_union(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(uni));
  present = !uni.empty();
  return present ? static_cast<double>(inter.size()) / static_cast<double>(uni.size()) : 0.0;
}

}  // namespace

// ---- confusion matrix ---------------------------------------------------------------------------

TEST(Confusion, PerfectPredictionIsDiagonal) {
  const LabelMap gt = test::random_labels(8, 8, 4, 1);
  ConfusionMatrix cm(4);
  cm.accumulate(gt, gt);
  for (int64_t a = 0; a < 4; ++a)
    for (int64_t b = 0; b < 4; ++b)
      if (a != b) {
        EXPECT_EQ(cm.at(a, b), 0);
      }
  EXPECT_EQ(cm.total(), 64);
  EXPECT_DOUBLE_EQ(miou(cm).mean, 1.0);
}

TEST(Confusion, MatchesBruteForcePairCounts) {
  const LabelMap gt = test::random_labels(9, 11, 5, 2), pred = test::random_labels(9, 11, 5, 3);
  ConfusionMatrix cm(5);
  cm.accumulate(pred, gt);
  for (int32_t a = 0; a < 5; ++a)
    for (int32_t b = 0; b < 5; ++b) {
      int64_t count = 0;
      for (size_t i = 0; i < gt.values.size(); ++i) count += gt.values[i] == a && pred.values[i] == b;
      EXPECT_EQ(cm.at(a, b), count);
    }
}

TEST(Confusion, IgnoredPixelsAndMerge) {
  LabelMap gt = test::random_labels(6, 6, 3, 4);
  const LabelMap pred = test::random_labels(6, 6, 3, 5);
  gt.values[0] = kIgnoreIndex;
  gt.values[7] = kIgnoreIndex;
  ConfusionMatrix whole(3), a(3), b(3);
  whole.accumulate(pred, gt);
  whole.accumulate(pred, gt);
  a.accumulate(pred, gt);
  b.accumulate(pred, gt);
  a.merge(b);
  EXPECT_EQ(whole.total(), 2 * 34);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 3; ++j) EXPECT_EQ(a.at(i, j), whole.at(i, j));
  EXPECT_THROW(a.merge(ConfusionMatrix(4)), ContractError);
}

TEST(Confusion, OutOfRangeNamesCoordinate) {
  const LabelMap gt(4, 4, 0);
  LabelMap pred(4, 4, 0);
  pred.at(3, 1) = 7;
  ConfusionMatrix cm(3);
  try {
    cm.accumulate(pred, gt);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("x=1, y=3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cm.accumulate(LabelMap(4, 5, 0), gt), ShapeError);
}

// ---- mIoU ------------------------------------------------------------------------------------------

TEST(Miou, MatchesSetOracle) {
  for (uint64_t seed = 10; seed < 14; ++seed) {
    std::vector<LabelMap> gt, pred;
    for (uint64_t n = 0; n < 3; ++n) {
      gt.push_back(test::random_labels(10, 7, 4, seed * 10 + n));
      pred.push_back(test::random_labels(10, 7, 4, seed * 100 + n));
    }
    gt[0].values[3] = kIgnoreIndex;
    ConfusionMatrix cm(4);
    for (size_t n = 0; n < 3; ++n) cm.accumulate(pred[n], gt[n]);
    const IouReport r = miou(cm);
    double sum = 0.0;
    int present_count = 0;
    for (int32_t c = 0; c < 4; ++c) {
      bool present = false;
      const double iou = set_iou(pred, gt, c, present);
      if (!present) continue;
      EXPECT_NEAR(r.per_class[static_cast<size_t>(c)], iou, 1e-9);
      sum += iou;
      ++present_count;
    }
    EXPECT_NEAR(r.mean, sum / present_count, 1e-9);
  }
}

TEST(Miou, DisjointPredictionIsZeroAndAbsentClassIsNan) {
  const LabelMap gt(4, 4, 0), pred(4, 4, 1);
  ConfusionMatrix cm(3);
  cm.accumulate(pred, gt);
  const IouReport r = miou(cm);
  EXPECT_EQ(r.per_class[0], 0.0);
  EXPECT_EQ(r.per_class[1], 0.0);
  EXPECT_TRUE(std::isnan(r.per_class[2]));
  EXPECT_EQ(r.mean, 0.0);
}

TEST(Miou, InvariantUnderClassRelabeling) {
  const LabelMap gt = test::random_labels(12, 12, 4, 20), pred = test::random_labels(12, 12, 4, 21);
  const std::vector<int32_t> perm{2, 0, 3, 1};
  LabelMap gt2 = gt, pred2 = pred;
  for (int32_t& v : gt2.values) v = perm[static_cast<size_t>(v)];
  for (int32_t& v : pred2.values) v = perm[static_cast<size_t>(v)];
  ConfusionMatrix a(4), b(4);
  a.accumulate(pred, gt);
  b.accumulate(pred2, gt2);
  EXPECT_NEAR(miou(a).mean, miou(b).mean, 1e-12);
}

TEST(Miou, EmptyMatrixRaises) { EXPECT_THROW(miou(ConfusionMatrix(3)), MetricError); }

TEST(Argmax, TiesGoToLowerClass) {
  Tensor logits = Tensor::zeros({1, 3, 1, 2});
  logits.mutable_data()[2 + 1] = 1.0f;  // class 1, x=1
  const auto labels = argmax(logits);
  EXPECT_EQ(labels[0].at(0, 0), 0);
  EXPECT_EQ(labels[0].at(0, 1), 1);
}

TEST(BoundaryBand, KeepsOnlyPixelsNearEdges) {
  LabelMap gt(16, 16, 0);
  for (int64_t y = 4; y < 12; ++y)
    for (int64_t x = 4; x < 12; ++x) gt.at(y, x) = 1;
  const LabelMap band = boundary_band(gt, 2, 1);
  // The band is the square's dilation minus its erosion: 10x10 minus the corners, less 6x6.
  int64_t kept = 0;
  for (size_t i = 0; i < band.values.size(); ++i) {
    if (band.values[i] == kIgnoreIndex) continue;
    EXPECT_EQ(band.values[i], gt.values[i]);
    ++kept;
  }
  EXPECT_EQ(kept, 10 * 10 - 4 - 6 * 6);
  EXPECT_EQ(band.at(0, 0), kIgnoreIndex);
  EXPECT_EQ(band.at(8, 8), kIgnoreIndex);
}

// ---- evaluation --------------------------------------------------------------------------------------

TEST(Evaluate, AgreesWithManualConfusion) {
  const Dataset data = Dataset::synthetic(3, 3, 64, 30);
  Model m(tiny_config());
  const ConfusionMatrix cm = evaluate(m, data, 2);
  ConfusionMatrix manual(3);
  for (const Sample& s : data.samples()) {
    const Batch b = make_batch({s});
    manual.accumulate(argmax(predict(m, b.images))[0], s.label);
  }
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 3; ++j) EXPECT_EQ(cm.at(i, j), manual.at(i, j));
  EXPECT_FALSE(m.training());
}

TEST(Evaluate, BandRestrictsCountedPixels) {
  const Dataset data = Dataset::synthetic(2, 3, 64, 31);
  Model m(tiny_config());
  int64_t expected = 0;
  for (const Sample& s : data.samples())
    for (int32_t v : boundary_band(s.label, 3, 2).values) expected += v != kIgnoreIndex;
  EXPECT_EQ(evaluate(m, data, 4, 2).total(), expected);
  EXPECT_THROW(evaluate(m, Dataset::synthetic(1, 4, 64, 1)), ConfigError);
}

// ---- cost accounting ------------------------------------------------------------------------------

TEST(Costs, ParamsGrowByHeadWidthPerClass) {
  for (DecoderKind d : {DecoderKind::maa, DecoderKind::allmlp}) {
    Model a(tiny_config(3, d)), b(tiny_config(4, d));
    const CostReport ra = count_params(a.store()), rb = count_params(b.store());
    EXPECT_EQ(rb.params - ra.params, 16 + 1);
    int64_t sum = 0;
    for (const auto& [_, n] : ra.params_by_module) sum += n;
    EXPECT_EQ(sum, ra.params);
    EXPECT_EQ(ra.params_by_module.size(), 3u);
  }
}

TEST(Costs, FlopsAdditiveAndLinearInBatch) {
  Model m(tiny_config());
  const CostReport one = count_flops(m, 64, 64, 1), two = count_flops(m, 64, 64, 2);
  EXPECT_EQ(two.flops, 2 * one.flops);
  int64_t sum = 0;
  for (const auto& [_, f] : one.flops_by_module) sum += f;
  EXPECT_EQ(sum, one.flops);
  EXPECT_TRUE(one.flops_by_module.count("encoder"));
  EXPECT_TRUE(one.flops_by_module.count("uiqa"));
  EXPECT_TRUE(one.flops_by_module.count("decoder"));
}

TEST(Costs, FlopsGrowWithAreaAndUiqa) {
  Model with(tiny_config(3, DecoderKind::maa, true)), without(tiny_config(3, DecoderKind::maa, false));
  const int64_t small = count_flops(with, 64, 64).flops, large = count_flops(with, 128, 128).flops;
  EXPECT_GE(large, 4 * small);
  EXPECT_GT(small, count_flops(without, 64, 64).flops);
  EXPECT_EQ(count_flops(without, 64, 64).flops_by_module.count("uiqa"), 0u);
}

TEST(Fps, MedianOfTimedCalls) {
  const FpsReport r = measure_fps([] { std::this_thread::sleep_for(std::chrono::milliseconds(10)); }, 2, 1, 5);
  ASSERT_EQ(r.trials.size(), 5u);
  EXPECT_NEAR(r.images_per_second, 200.0, 60.0);
  EXPECT_FALSE(r.hardware.empty());
  EXPECT_THROW(measure_fps([] {}, 1, 0, 0), ContractError);
}

TEST(Fps, LargerInputsAreSlower) {
  Model m(tiny_config());
  const double small = measure_fps(m, 64, 64, 1, 1, 3).images_per_second;
  const double large = measure_fps(m, 256, 256, 1, 1, 3).images_per_second;
  EXPECT_GT(small, large);
}

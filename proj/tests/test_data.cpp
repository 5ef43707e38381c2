#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "test_util.hpp"
#include "uwseg/data.hpp"
#include "uwseg/errors.hpp"

using namespace uwseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uwseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Palette suim_like() {
  return Palette({{"BW", {0, 0, 0}},
                  {"HD", {0, 0, 255}},
                  {"PF", {0, 255, 0}},
                  {"WR", {0, 255, 255}},
                  {"RO", {255, 0, 0}},
                  {"FV", {255, 255, 0}}});
}

Image solid(int64_t h, int64_t w, Rgb c) {
  Image img;
  img.height = h;
  img.width = w;
  img.pixels.resize(static_cast<size_t>(h * w * 3));
  for (int64_t i = 0; i < h * w; ++i) std::copy(c.begin(), c.end(), img.pixels.begin() + i * 3);
  return img;
}

}  // namespace

// ---- palettes and masks -----------------------------------------------------------------

TEST(Palette, SaveLoadRoundTripKeepsOrder) {
  const fs::path dir = temp_dir("palette");
  const Palette p = suim_like();
  p.save((dir / "p.json").string());
  const Palette q = Palette::load((dir / "p.json").string());
  ASSERT_EQ(q.n_cls(), 6);
  for (int32_t c = 0; c < 6; ++c) {
    EXPECT_EQ(q.entries()[c].name, p.entries()[c].name);
    EXPECT_EQ(q.color(c), p.color(c));
  }
}

TEST(Palette, RejectsDuplicatesAndMalformedFiles) {
  EXPECT_THROW(Palette({{"a", {1, 2, 3}}, {"b", {1, 2, 3}}}), ConfigError);
  EXPECT_THROW(Palette({{"a", {1, 2, 3}}}), ConfigError);
  const fs::path dir = temp_dir("palette_bad");
  std::ofstream((dir / "bad.json").string()) << R"({"a": [0, 0], "b": [1, 1, 1]})";
  EXPECT_THROW(Palette::load((dir / "bad.json").string()), IngestionError);
  std::ofstream((dir / "range.json").string()) << R"({"a": [0, 0, 300], "b": [1, 1, 1]})";
  EXPECT_THROW(Palette::load((dir / "range.json").string()), IngestionError);
  EXPECT_THROW(Palette::load((dir / "missing.json").string()), IngestionError);
}

TEST(Masks, BackgroundOnlyDecodesToZeros) {
  const LabelMap m = decode_mask(solid(4, 5, {0, 0, 0}), suim_like());
  EXPECT_EQ(m, LabelMap(4, 5, 0));
}

TEST(Masks, UnknownColorNamesPixelAndColor) {
  Image img = solid(4, 5, {0, 0, 0});
  uint8_t* px = img.px(2, 3);
  px[0] = 12;
  px[1] = 34;
  px[2] = 56;
  try {
    decode_mask(img, suim_like(), "m.png");
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[12, 34, 56]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("x=3, y=2"), std::string::npos) << msg;
  }
}

TEST(Masks, EncodeDecodeRoundTrip) {
  for (int64_t n_cls : {2, 5, 9}) {
    const Palette p = Palette::synthetic(n_cls);
    const LabelMap labels = test::random_labels(7, 9, static_cast<int32_t>(n_cls), 100 + n_cls);
    const Image mask = encode_mask(labels, p);
    EXPECT_EQ(decode_mask(mask, p), labels);
    EXPECT_EQ(encode_mask(decode_mask(mask, p), p).pixels, mask.pixels);
  }
}

TEST(Masks, LoadPairFromPngAndSizeMismatch) {
  const fs::path dir = temp_dir("pair");
  const Palette p = suim_like();
  const Sample s = synth_scene(3, 4, 64);
  write_png((dir / "img.png").string(), tensor_to_image(s.image));
  write_png((dir / "mask.png").string(), encode_mask(s.label, p));
  const Sample back = load_pair((dir / "img.png").string(), (dir / "mask.png").string(), p);
  EXPECT_EQ(back.label, s.label);
  EXPECT_EQ(back.id, "img");
  for (int64_t i = 0; i < s.image.numel(); ++i) EXPECT_NEAR(back.image.at(i), s.image.at(i), 0.5 / 255.0 + 1e-6);
  write_png((dir / "small.png").string(), solid(32, 64, {0, 0, 0}));
  EXPECT_THROW(load_pair((dir / "img.png").string(), (dir / "small.png").string(), p), IngestionError);
  EXPECT_THROW(load_pair((dir / "nope.png").string(), (dir / "mask.png").string(), p), IngestionError);
}

// ---- augmentation ------------------------------------------------------------------------

TEST(Augment, IdentityPolicy) {
  const Sample s = synth_scene(5, 3, 64);
  AugmentPolicy p{1.0, 1.0, 64, 64, 0.0};
  Rng rng(1);
  const Sample a = augment(s, p, rng);
  EXPECT_TRUE(test::bit_equal(a.image, s.image));
  EXPECT_EQ(a.label, s.label);
}

TEST(Augment, FlipIsInvolution) {
  const Sample s = synth_scene(6, 3, 64);
  const Sample ff = hflip(hflip(s));
  EXPECT_TRUE(test::bit_equal(ff.image, s.image));
  EXPECT_EQ(ff.label, s.label);
  AugmentPolicy forced{1.0, 1.0, 64, 64, 1.0};
  Rng rng(2);
  const Sample once = augment(s, forced, rng);
  EXPECT_EQ(once.label, hflip(s).label);
  EXPECT_EQ(augment(once, forced, rng).label, s.label);
}

TEST(Augment, ScalingIntroducesNoNewClasses) {
  for (uint64_t seed = 1; seed <= 8; ++seed) {
    const Sample s = synth_scene(seed, 5, 64);
    const std::set<int32_t> before(s.label.values.begin(), s.label.values.end());
    Rng rng(seed);
    const Sample a = augment(s, AugmentPolicy{0.5, 2.0, 64, 64, 0.5}, rng);
    for (int32_t v : a.label.values) EXPECT_TRUE(before.count(v) || v == kIgnoreIndex) << v;
    EXPECT_EQ(a.image.shape(), (Shape{3, 64, 64}));
  }
}

TEST(Augment, SmallScalePadsWithIgnoreAndReflection) {
  const Sample s = synth_scene(9, 3, 64);
  Rng rng(3);
  const Sample a = augment(s, AugmentPolicy{0.5, 0.5, 64, 64, 0.0}, rng);
  for (int64_t y = 0; y < 64; ++y)
    for (int64_t x = 0; x < 64; ++x) {
      const bool padded = y >= 32 || x >= 32;
      EXPECT_EQ(a.label.at(y, x) == kIgnoreIndex, padded) << x << "," << y;
    }
  // Reflection about the last row: row 32 mirrors row 30.
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t x = 0; x < 32; ++x) EXPECT_EQ(a.image.at((c * 64 + 32) * 64 + x), a.image.at((c * 64 + 30) * 64 + x));
}

TEST(Augment, ReproducibleUnderSeed) {
  const Sample s = synth_scene(10, 4, 64);
  Rng r1(77), r2(77);
  const Sample a = augment(s, AugmentPolicy{0.5, 2.0, 64, 64, 0.5}, r1);
  const Sample b = augment(s, AugmentPolicy{0.5, 2.0, 64, 64, 0.5}, r2);
  EXPECT_TRUE(test::bit_equal(a.image, b.image));
  EXPECT_EQ(a.label, b.label);
}

// ---- synthetic scenes ---------------------------------------------------------------------

TEST(Synth, DeterministicUnderSeed) {
  const Sample a = synth_scene(42, 4, 128), b = synth_scene(42, 4, 128);
  EXPECT_TRUE(test::bit_equal(a.image, b.image));
  EXPECT_EQ(a.label, b.label);
  EXPECT_NE(synth_scene(43, 4, 128).label, a.label);
}

TEST(Synth, RectangleAreaOracle) {
  SceneSpec spec;
  SceneShape r;
  r.kind = SceneShape::Kind::rectangle;
  r.cls = 1;
  r.cx = 10.0;
  r.cy = 20.0;
  r.a = 17.0;
  r.b = 9.0;
  spec.shapes.push_back(r);
  const Sample s = render_scene(spec, 2, 64, 1);
  int64_t ones = 0;
  for (int32_t v : s.label.values) ones += v == 1;
  EXPECT_EQ(ones, 17 * 9);
}

TEST(Synth, ZeroShapesIsAllBackground) {
  const Sample s = render_scene(SceneSpec{}, 3, 64, 2);
  EXPECT_EQ(s.label, LabelMap(64, 64, 0));
}

TEST(Synth, LabelsArePixelConsistentWithShapes) {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    const SceneSpec spec = random_scene(seed, 4, 128);
    const Sample s = render_scene(spec, 4, 128, seed);
    for (int64_t y = 0; y < 128; ++y)
      for (int64_t x = 0; x < 128; ++x) {
        // The topmost shape containing the pixel centre decides the label.
        int32_t expected = 0;
        for (const SceneShape& sh : spec.shapes)
          if (sh.contains(x + 0.5, y + 0.5)) expected = sh.cls;
        ASSERT_EQ(s.label.at(y, x), expected) << "seed " << seed;
      }
    for (float v : s.image.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Synth, SizeAndClassPreconditions) {
  EXPECT_THROW(synth_scene(1, 4, 96), ConfigError);
  EXPECT_THROW(synth_scene(1, 1, 64), ConfigError);
}

// ---- datasets and batches ------------------------------------------------------------------

TEST(Dataset, LoadDirMatchesStemsInOrder) {
  const fs::path root = temp_dir("dataset");
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  const Palette p = Palette::synthetic(3);
  for (const char* stem : {"b", "a"}) {
    const Sample s = synth_scene(stem[0], 3, 64);
    write_png((root / "images" / (std::string(stem) + ".png")).string(), tensor_to_image(s.image));
    write_png((root / "masks" / (std::string(stem) + ".png")).string(), encode_mask(s.label, p));
  }
  const Dataset d = Dataset::load_dir(root.string(), p);
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d[0].id, "a");
  EXPECT_EQ(d[0].label, synth_scene('a', 3, 64).label);
  fs::remove(root / "masks" / "a.png");
  EXPECT_THROW(Dataset::load_dir(root.string(), p), IngestionError);
}

TEST(Batch, NormalizesWithImageStatistics) {
  Sample s;
  s.image = Tensor::full({3, 2, 2}, 0.5f);
  s.label = LabelMap(2, 2);
  const Batch b = make_batch({s, s});
  ASSERT_EQ(b.images.shape(), (Shape{2, 3, 2, 2}));
  for (int64_t c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(b.images.at(c * 4), (0.5f - kImageMean[c]) / kImageStd[c]);
}

TEST(BatchStream, PrefetchMatchesInlineSequence) {
  const Dataset d = Dataset::synthetic(5, 3, 64, 11);
  const AugmentPolicy policy{0.5, 2.0, 64, 64, 0.5};
  BatchStream inline_stream(d, 2, 12, &policy, false);
  BatchStream worker_stream(d, 2, 12, &policy, true, 2);
  for (int i = 0; i < 7; ++i) {
    const Batch a = inline_stream.next(), b = worker_stream.next();
    EXPECT_TRUE(test::bit_equal(a.images, b.images)) << "batch " << i;
    EXPECT_EQ(a.labels, b.labels);
  }
}

TEST(BatchStream, EpochVisitsEverySampleOnce) {
  const Dataset d = Dataset::synthetic(6, 3, 64, 13);
  BatchStream stream(d, 3, 14, nullptr);
  std::multiset<std::vector<int32_t>> seen;
  for (int i = 0; i < 2; ++i)
    for (const LabelMap& l : stream.next().labels) seen.insert(l.values);
  for (const Sample& s : d.samples()) EXPECT_EQ(seen.count(s.label.values), 1u);
}

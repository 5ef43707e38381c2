#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "uwseg/image.hpp"
#include "uwseg/labels.hpp"
#include "uwseg/random.hpp"
#include "uwseg/tensor.hpp"

namespace uwseg {

using Rgb = std::array<uint8_t, 3>;

/// Ordered class list; the order defines class indices.
class Palette {
 public:
  struct Entry {
    std::string name;
    Rgb rgb;
  };

  Palette() = default;
  /// Throws ConfigError on duplicate colors or names, or fewer than two classes.
  explicit Palette(std::vector<Entry> entries);

  /// JSON object {"name": [r, g, b], ...} in class order. IngestionError on unreadable or malformed files.
  static Palette load(const std::string& path);
  void save(const std::string& path) const;
  /// Distinct generated colors, class 0 black.
  static Palette synthetic(int64_t n_cls);

  int64_t n_cls() const { return static_cast<int64_t>(entries_.size()); }
  const std::vector<Entry>& entries() const { return entries_; }
  /// -1 when the color is not in the palette.
  int32_t index_of(const Rgb& rgb) const;
  const Rgb& color(int32_t cls) const;

 private:
  std::vector<Entry> entries_;
};

struct Sample {
  Tensor image;  // [3, H, W] in [0, 1]
  LabelMap label;
  std::string id;
};

/// Exact palette lookup; IngestionError names the first unknown pixel and its color.
LabelMap decode_mask(const Image& mask, const Palette& palette, const std::string& source = "mask");
/// Ignored pixels are written black.
Image encode_mask(const LabelMap& label, const Palette& palette);

Tensor image_to_tensor(const Image& img);
/// Clamps to [0, 1] and rounds to 8 bits.
Image tensor_to_image(const Tensor& chw);

/// Throws IngestionError on unreadable files, unknown mask colors or size mismatch.
Sample load_pair(const std::string& image_path, const std::string& mask_path, const Palette& palette);

struct AugmentPolicy {
  double scale_lo = 0.5;
  double scale_hi = 2.0;
  int64_t crop_h = 128;
  int64_t crop_w = 128;
  double hflip_p = 0.5;
};

/// Horizontal mirror of image and label.
Sample hflip(const Sample& s);

/// Random scale (bilinear image, nearest label), random crop with reflect /
/// ignore padding when the scaled sample is smaller than the crop, random flip.
Sample augment(const Sample& s, const AugmentPolicy& p, Rng& rng);

/// Geometric primitive painted into a synthetic scene (pixel centres tested).
struct SceneShape {
  enum class Kind { ellipse, rectangle, blob };
  Kind kind = Kind::rectangle;
  int32_t cls = 1;
  double cx = 0, cy = 0;  // centre (rectangle: top-left corner)
  double a = 0, b = 0;    // semi-axes (rectangle: width, height)
  double angle = 0;       // ellipse rotation
  std::array<double, 5> harmonics{};  // blob radius modulation

  bool contains(double x, double y) const;
};

struct SceneSpec {
  std::vector<SceneShape> shapes;  // painted in order, later shapes on top
  double noise_sigma = 0.02;
  bool blur = false;
};

/// Renders a scene: attenuation gradient background, class-colored shapes, Gaussian noise.
Sample render_scene(const SceneSpec& spec, int64_t n_cls, int64_t size, uint64_t seed);
/// Random scene layout for `seed`.
SceneSpec random_scene(uint64_t seed, int64_t n_cls, int64_t size);
/// size must be a positive multiple of 64 and n_cls >= 2 (ConfigError otherwise).
Sample synth_scene(uint64_t seed, int64_t n_cls, int64_t size);

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Sample> samples, int64_t n_cls) : samples_(std::move(samples)), n_cls_(n_cls) {}

  static Dataset synthetic(int64_t count, int64_t n_cls, int64_t size, uint64_t seed);
  /// root/images/*.png with root/masks/<same stem>.png.
  static Dataset load_dir(const std::string& root, const Palette& palette);

  int64_t size() const { return static_cast<int64_t>(samples_.size()); }
  int64_t n_cls() const { return n_cls_; }
  const Sample& operator[](int64_t i) const { return samples_[static_cast<size_t>(i)]; }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  std::vector<Sample> samples_;
  int64_t n_cls_ = 0;
};

/// Per-channel ImageNet statistics used to normalize model inputs.
inline constexpr std::array<float, 3> kImageMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageStd{0.229f, 0.224f, 0.225f};

struct Batch {
  Tensor images;  // [B, 3, H, W], normalized
  std::vector<LabelMap> labels;
};

/// Stacks samples into a normalized batch (all samples must share a size).
Batch make_batch(const std::vector<Sample>& samples);

/// Deterministic batch sequence: epoch-wise shuffles and augmentation draws
/// come from one seeded stream, so the sequence does not depend on whether a
/// background worker produces it.
class BatchStream {
 public:
  /// `augment_policy` null disables augmentation.
  BatchStream(const Dataset& data, int64_t batch_size, uint64_t seed, const AugmentPolicy* augment_policy,
              bool prefetch = false, size_t queue_capacity = 2);
  ~BatchStream();
  BatchStream(const BatchStream&) = delete;
  BatchStream& operator=(const BatchStream&) = delete;

  Batch next();

 private:
  Batch produce();
  void worker_loop();

  const Dataset& data_;
  int64_t batch_size_;
  Rng rng_;
  bool augment_ = false;
  AugmentPolicy policy_;
  std::vector<int64_t> order_;
  size_t cursor_ = 0;

  bool prefetch_ = false;
  size_t capacity_ = 2;
  std::deque<Batch> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace uwseg

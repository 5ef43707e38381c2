#include "uwseg/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "uwseg/errors.hpp"
#include "uwseg/ops.hpp"

namespace uwseg {

namespace fs = std::filesystem;

// ---- palette --------------------------------------------------------------------

Palette::Palette(std::vector<Entry> entries) : entries_(std::move(entries)) {
  if (entries_.size() < 2) throw ConfigError("palette needs at least two classes");
  std::set<Rgb> colors;
  std::set<std::string> names;
  for (const Entry& e : entries_) {
    if (!colors.insert(e.rgb).second) {
      throw ConfigError("palette color [" + std::to_string(e.rgb[0]) + ", " + std::to_string(e.rgb[1]) + ", " +
                        std::to_string(e.rgb[2]) + "] used twice");
    }
    if (!names.insert(e.name).second) throw ConfigError("palette class name '" + e.name + "' used twice");
  }
}

Palette Palette::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open palette file " + path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("palette file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw IngestionError("palette file " + path + " must map class names to [r, g, b]");
  std::vector<Entry> entries;
  for (const auto& [name, value] : j.items()) {
    if (!value.is_array() || value.size() != 3) {
      throw IngestionError("palette entry '" + name + "' must be a list of three integers");
    }
    Rgb rgb{};
    for (size_t c = 0; c < 3; ++c) {
      if (!value[c].is_number_integer() || value[c].get<int>() < 0 || value[c].get<int>() > 255) {
        throw IngestionError("palette entry '" + name + "' has a component outside 0..255");
      }
      rgb[c] = static_cast<uint8_t>(value[c].get<int>());
    }
    entries.push_back({name, rgb});
  }
  return Palette(std::move(entries));
}

void Palette::save(const std::string& path) const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const Entry& e : entries_) j[e.name] = {e.rgb[0], e.rgb[1], e.rgb[2]};
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write palette file " + path);
  out << j.dump(2) << "\n";
}

Palette Palette::synthetic(int64_t n_cls) {
  static const Rgb kBase[] = {{0, 0, 0},     {0, 0, 255},   {0, 255, 0},   {0, 255, 255},
                              {255, 0, 0},   {255, 0, 255}, {255, 255, 0}, {255, 255, 255}};
  std::vector<Entry> entries;
  for (int64_t c = 0; c < n_cls; ++c) {
    Rgb rgb;
    if (c < 8) {
      rgb = kBase[c];
    } else {
      rgb = {static_cast<uint8_t>((c * 67) % 251), static_cast<uint8_t>((c * 131) % 241),
             static_cast<uint8_t>((c * 29) % 239)};
    }
    entries.push_back({c == 0 ? "background" : "class" + std::to_string(c), rgb});
  }
  return Palette(std::move(entries));
}

int32_t Palette::index_of(const Rgb& rgb) const {
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].rgb == rgb) return static_cast<int32_t>(i);
  }
  return -1;
}

const Rgb& Palette::color(int32_t cls) const {
  if (cls < 0 || cls >= n_cls()) throw ContractError("palette has no class " + std::to_string(cls));
  return entries_[static_cast<size_t>(cls)].rgb;
}

// ---- masks and images ------------------------------------------------------------------

LabelMap decode_mask(const Image& mask, const Palette& palette, const std::string& source) {
  LabelMap out(mask.height, mask.width);
  for (int64_t y = 0; y < mask.height; ++y) {
    for (int64_t x = 0; x < mask.width; ++x) {
      const uint8_t* p = mask.px(y, x);
      const Rgb rgb{p[0], p[1], p[2]};
      const int32_t cls = palette.index_of(rgb);
      if (cls < 0) {
        throw IngestionError(source + ": unknown mask color [" + std::to_string(rgb[0]) + ", " +
                             std::to_string(rgb[1]) + ", " + std::to_string(rgb[2]) + "] at (x=" + std::to_string(x) +
                             ", y=" + std::to_string(y) + ")");
      }
      out.at(y, x) = cls;
    }
  }
  return out;
}

Image encode_mask(const LabelMap& label, const Palette& palette) {
  Image img;
  img.height = label.height;
  img.width = label.width;
  img.channels = 3;
  img.pixels.assign(static_cast<size_t>(label.size() * 3), 0);
  for (int64_t y = 0; y < label.height; ++y) {
    for (int64_t x = 0; x < label.width; ++x) {
      const int32_t c = label.at(y, x);
      if (c == kIgnoreIndex) continue;
      const Rgb& rgb = palette.color(c);
      std::copy(rgb.begin(), rgb.end(), img.px(y, x));
    }
  }
  return img;
}

Tensor image_to_tensor(const Image& img) {
  Tensor t = Tensor::zeros({3, img.height, img.width});
  float* p = t.ptr();
  const int64_t plane = img.height * img.width;
  for (int64_t i = 0; i < plane; ++i) {
    for (int64_t c = 0; c < 3; ++c) {
      const uint8_t v = img.channels == 1 ? img.pixels[static_cast<size_t>(i)] : img.pixels[static_cast<size_t>(i * 3 + c)];
      p[c * plane + i] = static_cast<float>(v) / 255.0f;
    }
  }
  return t;
}

Image tensor_to_image(const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 3 && chw.dim(0) != 1)) {
    throw ShapeError("tensor_to_image: expected [1 or 3, H, W], got " + shape_str(chw.shape()));
  }
  Image img;
  img.channels = static_cast<int>(chw.dim(0));
  img.height = chw.dim(1);
  img.width = chw.dim(2);
  img.pixels.resize(static_cast<size_t>(img.height * img.width * img.channels));
  const int64_t plane = img.height * img.width;
  for (int64_t i = 0; i < plane; ++i) {
    for (int64_t c = 0; c < img.channels; ++c) {
      const float v = std::clamp(chw.at(c * plane + i), 0.0f, 1.0f);
      img.pixels[static_cast<size_t>(i * img.channels + c)] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
  }
  return img;
}

Sample load_pair(const std::string& image_path, const std::string& mask_path, const Palette& palette) {
  Image img = read_png(image_path);
  Image mask = read_png(mask_path);
  if (img.height != mask.height || img.width != mask.width) {
    throw IngestionError("image " + image_path + " is " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " but mask " + mask_path + " is " + std::to_string(mask.width) +
                         "x" + std::to_string(mask.height));
  }
  Sample s;
  s.image = image_to_tensor(img);
  s.label = decode_mask(mask, palette, mask_path);
  s.id = fs::path(image_path).stem().string();
  return s;
}

// ---- augmentation ------------------------------------------------------------------------

namespace {

int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Tensor resize_image(const Tensor& chw, int64_t h, int64_t w) {
  NoGradGuard guard;
  return ops::bilinear_resize(chw.reshape({1, 3, chw.dim(1), chw.dim(2)}), h, w).reshape({3, h, w});
}

LabelMap resize_nearest(const LabelMap& in, int64_t h, int64_t w) {
  LabelMap out(h, w);
  for (int64_t y = 0; y < h; ++y) {
    const int64_t sy = std::min(in.height - 1, static_cast<int64_t>((y + 0.5) * in.height / h));
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sx = std::min(in.width - 1, static_cast<int64_t>((x + 0.5) * in.width / w));
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

}  // namespace

Sample hflip(const Sample& s) {
  Sample out = s;
  const int64_t h = s.label.height, w = s.label.width;
  out.image = s.image.clone();
  float* dst = out.image.ptr();
  const float* src = s.image.ptr();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) dst[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) out.label.at(y, x) = s.label.at(y, w - 1 - x);
  return out;
}

Sample augment(const Sample& s, const AugmentPolicy& p, Rng& rng) {
  const double scale = rng.uniform(p.scale_lo, p.scale_hi);
  const int64_t h = std::max<int64_t>(1, std::llround(static_cast<double>(s.label.height) * scale));
  const int64_t w = std::max<int64_t>(1, std::llround(static_cast<double>(s.label.width) * scale));
  Tensor img = resize_image(s.image, h, w);
  LabelMap lab = resize_nearest(s.label, h, w);

  const int64_t oy = h > p.crop_h ? static_cast<int64_t>(rng.below(static_cast<uint64_t>(h - p.crop_h + 1))) : 0;
  const int64_t ox = w > p.crop_w ? static_cast<int64_t>(rng.below(static_cast<uint64_t>(w - p.crop_w + 1))) : 0;
  Sample out;
  out.id = s.id;
  out.image = Tensor::zeros({3, p.crop_h, p.crop_w});
  out.label = LabelMap(p.crop_h, p.crop_w, kIgnoreIndex);
  float* dst = out.image.ptr();
  const float* src = img.ptr();
  for (int64_t y = 0; y < p.crop_h; ++y) {
    const int64_t sy = oy + y;
    for (int64_t x = 0; x < p.crop_w; ++x) {
      const int64_t sx = ox + x;
      const bool inside = sy < h && sx < w;
      const int64_t ry = reflect_index(sy, h), rx = reflect_index(sx, w);
      for (int64_t c = 0; c < 3; ++c) {
        dst[(c * p.crop_h + y) * p.crop_w + x] = src[(c * h + ry) * w + rx];
      }
      if (inside) out.label.at(y, x) = lab.at(sy, sx);
    }
  }
  if (rng.bernoulli(p.hflip_p)) out = hflip(out);
  return out;
}

// ---- synthetic scenes ------------------------------------------------------------------------

bool SceneShape::contains(double x, double y) const {
  switch (kind) {
    case Kind::rectangle:
      return x >= cx && x < cx + a && y >= cy && y < cy + b;
    case Kind::ellipse: {
      const double dx = x - cx, dy = y - cy;
      const double c = std::cos(angle), s = std::sin(angle);
      const double u = c * dx + s * dy, v = -s * dx + c * dy;
      return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
    case Kind::blob: {
      const double dx = x - cx, dy = y - cy;
      const double theta = std::atan2(dy, dx);
      double r = 1.0;
      for (size_t k = 0; k < harmonics.size(); ++k) {
        r += harmonics[k] * std::cos(static_cast<double>(k + 2) * theta + angle);
      }
      return std::sqrt(dx * dx + dy * dy) <= a * r;
    }
  }
  return false;
}

namespace {

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  double r, g, b;
  switch (static_cast<int>(i) % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

}  // namespace

Sample render_scene(const SceneSpec& spec, int64_t n_cls, int64_t size, uint64_t seed) {
  Rng rng(seed);
  Sample s;
  s.id = "synth_" + std::to_string(seed);
  s.image = Tensor::zeros({3, size, size});
  s.label = LabelMap(size, size, 0);
  const int64_t plane = size * size;
  float* img = s.image.ptr();

  // Attenuation gradient: brighter blue-green near the surface, darker with depth.
  const std::array<float, 3> top{0.15f, 0.55f, 0.65f}, bottom{0.03f, 0.22f, 0.38f};
  for (int64_t y = 0; y < size; ++y) {
    const float t = static_cast<float>(y) / static_cast<float>(std::max<int64_t>(1, size - 1));
    for (int64_t x = 0; x < size; ++x) {
      for (int64_t c = 0; c < 3; ++c) img[c * plane + y * size + x] = top[c] + t * (bottom[c] - top[c]);
    }
  }

  for (const SceneShape& shape : spec.shapes) {
    if (shape.cls < 1 || shape.cls >= n_cls) throw ConfigError("scene shape class outside [1, n_cls)");
    const double hue = 0.08 + static_cast<double>(shape.cls - 1) / static_cast<double>(n_cls - 1) * 0.8 +
                       rng.uniform(-0.02, 0.02);
    const auto color = hsv_to_rgb(hue, 0.75, 0.9);
    for (int64_t y = 0; y < size; ++y) {
      const float depth = 1.0f - 0.35f * static_cast<float>(y) / static_cast<float>(size);
      for (int64_t x = 0; x < size; ++x) {
        if (!shape.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        s.label.at(y, x) = shape.cls;
        for (int64_t c = 0; c < 3; ++c) img[c * plane + y * size + x] = color[c] * depth;
      }
    }
  }

  if (spec.blur) {
    Tensor copy = s.image.clone();
    const float* src = copy.ptr();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
          float acc = 0.0f;
          for (int64_t dy = -1; dy <= 1; ++dy)
            for (int64_t dx = -1; dx <= 1; ++dx) {
              const int64_t yy = std::clamp<int64_t>(y + dy, 0, size - 1);
              const int64_t xx = std::clamp<int64_t>(x + dx, 0, size - 1);
              acc += src[c * plane + yy * size + xx];
            }
          img[c * plane + y * size + x] = acc / 9.0f;
        }
  }
  for (int64_t i = 0; i < 3 * plane; ++i) {
    img[i] = std::clamp(img[i] + static_cast<float>(rng.normal(0.0, spec.noise_sigma)), 0.0f, 1.0f);
  }
  return s;
}

SceneSpec random_scene(uint64_t seed, int64_t n_cls, int64_t size) {
  Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  SceneSpec spec;
  const double sz = static_cast<double>(size);
  const int count = 2 + static_cast<int>(rng.below(3));
  for (int i = 0; i < count; ++i) {
    SceneShape sh;
    sh.cls = 1 + static_cast<int32_t>(rng.below(static_cast<uint64_t>(n_cls - 1)));
    sh.kind = static_cast<SceneShape::Kind>(rng.below(3));
    sh.angle = rng.uniform(0.0, std::numbers::pi);
    if (sh.kind == SceneShape::Kind::rectangle) {
      sh.a = rng.uniform(0.25, 0.5) * sz;
      sh.b = rng.uniform(0.25, 0.5) * sz;
      sh.cx = rng.uniform(0.0, sz - sh.a);
      sh.cy = rng.uniform(0.0, sz - sh.b);
    } else {
      sh.a = rng.uniform(0.14, 0.26) * sz;
      sh.b = rng.uniform(0.14, 0.26) * sz;
      sh.cx = rng.uniform(0.2, 0.8) * sz;
      sh.cy = rng.uniform(0.2, 0.8) * sz;
      for (double& h : sh.harmonics) h = rng.uniform(-0.08, 0.08);
    }
    spec.shapes.push_back(sh);
  }
  return spec;
}

Sample synth_scene(uint64_t seed, int64_t n_cls, int64_t size) {
  if (n_cls < 2) throw ConfigError("synth_scene: n_cls must be >= 2");
  if (size <= 0 || size % 64 != 0) throw ConfigError("synth_scene: size must be a positive multiple of 64");
  return render_scene(random_scene(seed, n_cls, size), n_cls, size, seed);
}

// ---- datasets and batches -------------------------------------------------------------------

Dataset Dataset::synthetic(int64_t count, int64_t n_cls, int64_t size, uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> samples;
  for (int64_t i = 0; i < count; ++i) samples.push_back(synth_scene(rng.next_u64(), n_cls, size));
  return Dataset(std::move(samples), n_cls);
}

Dataset Dataset::load_dir(const std::string& root, const Palette& palette) {
  const fs::path images = fs::path(root) / "images";
  const fs::path masks = fs::path(root) / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw IngestionError("dataset root " + root + " must contain images/ and masks/");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IngestionError("no PNG images under " + images.string());
  std::vector<Sample> samples;
  for (const fs::path& img : files) {
    const fs::path mask = masks / (img.stem().string() + ".png");
    if (!fs::exists(mask)) throw IngestionError("missing mask " + mask.string() + " for image " + img.string());
    samples.push_back(load_pair(img.string(), mask.string(), palette));
  }
  return Dataset(std::move(samples), palette.n_cls());
}

Batch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: no samples");
  const int64_t h = samples[0].label.height, w = samples[0].label.width;
  const int64_t b = static_cast<int64_t>(samples.size());
  Batch batch;
  batch.images = Tensor::zeros({b, 3, h, w});
  float* dst = batch.images.ptr();
  for (int64_t n = 0; n < b; ++n) {
    const Sample& s = samples[static_cast<size_t>(n)];
    if (s.label.height != h || s.label.width != w || s.image.dim(1) != h || s.image.dim(2) != w) {
      throw ShapeError("make_batch: sample " + s.id + " differs in size from the first sample");
    }
    const float* src = s.image.ptr();
    for (int64_t c = 0; c < 3; ++c) {
      for (int64_t i = 0; i < h * w; ++i) {
        dst[(n * 3 + c) * h * w + i] = (src[c * h * w + i] - kImageMean[c]) / kImageStd[c];
      }
    }
    batch.labels.push_back(s.label);
  }
  return batch;
}

BatchStream::BatchStream(const Dataset& data, int64_t batch_size, uint64_t seed, const AugmentPolicy* augment_policy,
                         bool prefetch, size_t queue_capacity)
    : data_(data), batch_size_(batch_size), rng_(seed), prefetch_(prefetch), capacity_(std::max<size_t>(1, queue_capacity)) {
  if (data.size() == 0) throw ContractError("BatchStream: empty dataset");
  if (batch_size < 1) throw ContractError("BatchStream: batch size must be >= 1");
  if (augment_policy) {
    augment_ = true;
    policy_ = *augment_policy;
  }
  if (prefetch_) worker_ = std::thread([this] { worker_loop(); });
}

BatchStream::~BatchStream() {
  if (worker_.joinable()) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
}

Batch BatchStream::produce() {
  std::vector<Sample> picked;
  for (int64_t i = 0; i < batch_size_; ++i) {
    if (cursor_ >= order_.size()) {
      order_.resize(static_cast<size_t>(data_.size()));
      for (size_t k = 0; k < order_.size(); ++k) order_[k] = static_cast<int64_t>(k);
      for (size_t k = order_.size(); k > 1; --k) std::swap(order_[k - 1], order_[rng_.below(k)]);
      cursor_ = 0;
    }
    const Sample& s = data_[order_[cursor_++]];
    picked.push_back(augment_ ? augment(s, policy_, rng_) : s);
  }
  return make_batch(picked);
}

void BatchStream::worker_loop() {
  for (;;) {
    {
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
      if (stop_) return;
    }
    Batch b = produce();
    {
      std::lock_guard<std::mutex> lock(mu_);
      queue_.push_back(std::move(b));
    }
    cv_.notify_all();
  }
}

Batch BatchStream::next() {
  if (!prefetch_) return produce();
  std::unique_lock<std::mutex> lock(mu_);
  cv_.wait(lock, [this] { return !queue_.empty(); });
  Batch b = std::move(queue_.front());
  queue_.pop_front();
  lock.unlock();
  cv_.notify_all();
  return b;
}

}  // namespace uwseg

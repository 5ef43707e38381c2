#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace uwseg {

/// 8-bit interleaved image (1 = gray, 3 = RGB channels).
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  int channels = 3;
  std::vector<uint8_t> pixels;

  uint8_t* px(int64_t y, int64_t x) { return pixels.data() + (y * width + x) * channels; }
  const uint8_t* px(int64_t y, int64_t x) const { return pixels.data() + (y * width + x) * channels; }
};

/// Decodes any PNG to 8-bit RGB (alpha dropped, gray expanded, 16-bit stripped).
/// Throws IngestionError on missing or corrupt files.
Image read_png(const std::string& path);

/// Writes gray or RGB 8-bit PNG. Throws IngestionError on I/O failure.
void write_png(const std::string& path, const Image& img);

}  // namespace uwseg

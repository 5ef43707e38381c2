#pragma once

#include <cstdint>
#include <vector>

namespace uwseg {

/// Pixels carrying this label are skipped by losses and metrics.
inline constexpr int32_t kIgnoreIndex = 255;

/// Integer class map, row-major.
struct LabelMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<int32_t> values;

  LabelMap() = default;
  LabelMap(int64_t h, int64_t w, int32_t fill = 0)
      : height(h), width(w), values(static_cast<size_t>(h * w), fill) {}

  int32_t at(int64_t y, int64_t x) const { return values[static_cast<size_t>(y * width + x)]; }
  int32_t& at(int64_t y, int64_t x) { return values[static_cast<size_t>(y * width + x)]; }
  int64_t size() const { return height * width; }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace uwseg

#include "uwseg/image.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "uwseg/errors.hpp"

namespace uwseg {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<FILE, FileCloser>;

}  // namespace

Image read_png(const std::string& path) {
  File fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IngestionError("cannot open image " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IngestionError("not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("libpng initialization failed for " + path);
  }
  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  const bool has_trns = png_get_valid(png, info, PNG_INFO_tRNS) != 0;
  if (has_trns) png_set_tRNS_to_alpha(png);
  if ((color & PNG_COLOR_MASK_ALPHA) || has_trns) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = 3;
  if (png_get_rowbytes(png, info) != static_cast<size_t>(img.width * 3)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("unsupported PNG layout: " + path);
  }
  img.pixels.resize(static_cast<size_t>(img.width * img.height * 3));
  rows.resize(static_cast<size_t>(img.height));
  for (int64_t y = 0; y < img.height; ++y) rows[static_cast<size_t>(y)] = img.pixels.data() + y * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw IngestionError("write_png: only gray or RGB images supported");
  if (img.pixels.size() != static_cast<size_t>(img.width * img.height * img.channels)) {
    throw IngestionError("write_png: pixel buffer does not match image size");
  }
  File fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IngestionError("cannot write image " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IngestionError("libpng initialization failed for " + path);
  }
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IngestionError("failed writing PNG " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < img.height; ++y) {
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace uwseg

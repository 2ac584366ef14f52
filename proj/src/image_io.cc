#include "dymo/image_io.h"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "dymo/errors.h"

namespace dymo {
namespace {

struct FileCloser {
  void operator()(FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<FILE, FileCloser>;

File open(const std::string& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw InputError("cannot open " + path);
  return f;
}

void write_rows(const std::string& path, int width, int height, int color_type, int bit_depth,
                std::vector<std::vector<png_byte>>& rows) {
  File f = open(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng failed writing " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (auto& row : rows) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Decoded {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<std::vector<png_byte>> rows;
};

Decoded read_rows(const std::string& path) {
  File f = open(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng failed reading " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
  png_read_update_info(png, info);
  Decoded d;
  d.width = static_cast<int>(png_get_image_width(png, info));
  d.height = static_cast<int>(png_get_image_height(png, info));
  d.channels = png_get_channels(png, info);
  d.bit_depth = png_get_bit_depth(png, info);
  d.rows.assign(static_cast<size_t>(d.height), std::vector<png_byte>(png_get_rowbytes(png, info)));
  for (auto& row : d.rows) png_read_row(png, row.data(), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace

void write_png(const std::string& path, const Tensor& image, int bit_depth) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InputError("write_png: expected {3, H, W}, got " + image.shape_string());
  if (bit_depth != 8 && bit_depth != 16) throw InputError("write_png: bit depth must be 8 or 16");
  const int h = image.dim(1), w = image.dim(2);
  const double half = std::ldexp(1.0, bit_depth - 1) - 0.5;
  const int bytes = bit_depth / 8;
  std::vector<std::vector<png_byte>> rows(static_cast<size_t>(h), std::vector<png_byte>(static_cast<size_t>(w * 3 * bytes)));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), -1.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround((v + 1.0) * half));
        png_byte* px = &rows[static_cast<size_t>(y)][static_cast<size_t>((x * 3 + c) * bytes)];
        if (bytes == 2) {
          px[0] = static_cast<png_byte>(q >> 8);
          px[1] = static_cast<png_byte>(q & 0xff);
        } else {
          px[0] = static_cast<png_byte>(q);
        }
      }
    }
  }
  write_rows(path, w, h, PNG_COLOR_TYPE_RGB, bit_depth, rows);
}

Tensor read_png(const std::string& path) {
  const Decoded d = read_rows(path);
  if (d.channels != 3 && d.channels != 1) throw FormatError(path + ": unsupported channel count");
  const double half = std::ldexp(1.0, d.bit_depth - 1) - 0.5;
  const int bytes = d.bit_depth / 8;
  Tensor img({3, d.height, d.width});
  for (int y = 0; y < d.height; ++y) {
    for (int x = 0; x < d.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int src = d.channels == 3 ? c : 0;
        const png_byte* px = &d.rows[static_cast<size_t>(y)][static_cast<size_t>((x * d.channels + src) * bytes)];
        const unsigned q = bytes == 2 ? (unsigned{px[0]} << 8 | px[1]) : px[0];
        img.at(c, y, x) = q / half - 1.0;
      }
    }
  }
  return img;
}

void write_png_gray(const std::string& path, const std::vector<uint8_t>& pixels, int width, int height) {
  if (pixels.size() != static_cast<size_t>(width) * static_cast<size_t>(height)) {
    throw InputError("write_png_gray: pixel count does not match size");
  }
  std::vector<std::vector<png_byte>> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[static_cast<size_t>(y)].assign(pixels.begin() + y * width, pixels.begin() + (y + 1) * width);
  }
  write_rows(path, width, height, PNG_COLOR_TYPE_GRAY, 8, rows);
}

std::vector<uint8_t> read_png_gray(const std::string& path, int* width, int* height) {
  const Decoded d = read_rows(path);
  if (d.channels != 1 || d.bit_depth != 8) throw FormatError(path + ": expected 8-bit grayscale");
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(d.width) * static_cast<size_t>(d.height));
  for (const auto& row : d.rows) out.insert(out.end(), row.begin(), row.end());
  *width = d.width;
  *height = d.height;
  return out;
}

}  // namespace dymo

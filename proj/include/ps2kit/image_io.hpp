#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "ps2kit/errors.hpp"
#include "ps2kit/tensor.hpp"

namespace ps2kit {

// Images in memory are CHW float tensors in [0,1]; masks are (1,H,W) in {0,1}.

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// Writes a CHW tensor (1 or 3 channels, values clamped to [0,1]) as an
/// 8- or 16-bit PNG.
inline void write_png(const std::string& path, const TensorF& img, int bit_depth = 8) {
  if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw shape_error("write_png: expected (1|3,H,W) tensor, got " + shape_str(img));
  if (bit_depth != 8 && bit_depth != 16) throw format_error("write_png: bit depth must be 8 or 16");
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);

  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw format_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw format_error("write_png: libpng failure for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), bit_depth,
               C == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  const double maxv = bit_depth == 8 ? 255.0 : 65535.0;
  std::vector<png_byte> row(static_cast<std::size_t>(W) * C * (bit_depth / 8));
  for (int y = 0; y < H; ++y) {
    std::size_t o = 0;
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double v = std::clamp(static_cast<double>(img.at(c, y, x)), 0.0, 1.0);
        auto q = static_cast<unsigned>(std::lround(v * maxv));
        if (bit_depth == 8) {
          row[o++] = static_cast<png_byte>(q);
        } else {
          row[o++] = static_cast<png_byte>(q >> 8);
          row[o++] = static_cast<png_byte>(q & 0xff);
        }
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads a PNG into a CHW float tensor in [0,1]. Grayscale stays 1 channel,
/// everything else is folded to 3 (alpha dropped, palette expanded).
inline TensorF read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw format_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw format_error("read_png: libpng failure for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = 0, h = 0;
  int bit_depth = 0, color_type = 0;
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
  const int C = (color_type == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
  const int bytes = bit_depth == 16 ? 2 : 1;
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;

  TensorF img({C, static_cast<int>(h), static_cast<int>(w)});
  std::vector<png_byte> row(static_cast<std::size_t>(w) * C * bytes);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    std::size_t o = 0;
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < C; ++c) {
        unsigned v = row[o++];
        if (bytes == 2) v = (v << 8) | row[o++];
        img.at(c, static_cast<int>(y), static_cast<int>(x)) = static_cast<float>(v / maxv);
      }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Raw little-endian float32 dump, row-major with the channel index fastest:
/// H*W*C values for a (C,H,W) tensor.
inline void write_f32(const std::string& path, const TensorF& t) {
  if (t.ndim() != 3) throw shape_error("write_f32: expected CHW tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("write_f32: cannot open " + path);
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  std::vector<float> buf(static_cast<std::size_t>(C));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) buf[static_cast<std::size_t>(c)] = t.at(c, y, x);
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(sizeof(float) * buf.size()));
    }
  if (!out) throw format_error("write_f32: short write to " + path);
}

inline TensorF read_f32(const std::string& path, int channels, int height, int width) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw format_error("read_f32: cannot open " + path);
  const auto want = static_cast<std::streamoff>(sizeof(float)) * channels * height * width;
  if (in.tellg() != want)
    throw format_error("read_f32: " + path + " has wrong length (expected " + std::to_string(want) + " bytes)");
  in.seekg(0);
  TensorF t({channels, height, width});
  std::vector<float> buf(static_cast<std::size_t>(channels));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(sizeof(float) * buf.size()));
      for (int c = 0; c < channels; ++c) t.at(c, y, x) = buf[static_cast<std::size_t>(c)];
    }
  return t;
}

}  // namespace ps2kit

#pragma once

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "attni2i/tensor.hpp"

namespace attni2i {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit interleaved image, `channels` is 1 or 3.
struct ImageU8 {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;
  std::vector<uint8_t> pixels;  // row-major, interleaved

  uint8_t& at(int64_t y, int64_t x, int64_t c) {
    return pixels[size_t((y * width + x) * channels + c)];
  }
  uint8_t at(int64_t y, int64_t x, int64_t c) const {
    return pixels[size_t((y * width + x) * channels + c)];
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  std::string tail = s.substr(s.size() - suffix.size());
  std::transform(tail.begin(), tail.end(), tail.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  return tail == suffix;
}

struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(mgr->jump, 1);
}

}  // namespace detail

inline ImageU8 read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open image '" + path + "'");
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png: allocation failure");
  }
  std::vector<png_bytep> rows;
  ImageU8 img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: failed to decode '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: 16-bit depth unsupported, decode expects 8-bit '" +
                  path + "'");
  }
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY ||
      color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);  // grayscale replicated to three channels
  png_read_update_info(png, info);

  img.width = int64_t(png_get_image_width(png, info));
  img.height = int64_t(png_get_image_height(png, info));
  img.channels = 3;
  if (png_get_rowbytes(png, info) != size_t(img.width * 3)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: unexpected channel layout in '" + path + "'");
  }
  img.pixels.resize(size_t(img.width * img.height * 3));
  rows.resize(size_t(img.height));
  for (int64_t y = 0; y < img.height; ++y)
    rows[size_t(y)] = img.pixels.data() + y * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline ImageU8 read_jpeg(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open image '" + path + "'");
  jpeg_decompress_struct cinfo;
  detail::JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  ImageU8 img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("jpeg: failed to decode '" + path + "'");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.channels = 3;
  img.pixels.resize(size_t(img.width * img.height * 3));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + int64_t(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

inline ImageU8 read_image(const std::string& path) {
  if (detail::has_suffix(path, ".png")) return read_png(path);
  if (detail::has_suffix(path, ".jpg") || detail::has_suffix(path, ".jpeg"))
    return read_jpeg(path);
  throw IoError("unsupported image format '" + path + "' (png/jpg only)");
}

inline void write_png(const std::string& path, const ImageU8& img) {
  require(img.channels == 1 || img.channels == 3,
          "write_png: 1 or 3 channels only");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open '" + path + "' for write");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png: allocation failure");
  }
  std::vector<png_bytep> rows(size_t(img.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: failed to encode '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < img.height; ++y)
    rows[size_t(y)] =
        const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ----- conversions: u8 [0,255] <-> real [-1,1] -----

template <typename T>
inline T normalize_u8(uint8_t v) {
  return T(2) * T(v) / T(255) - T(1);
}

template <typename T>
inline uint8_t denormalize_u8(T v) {
  const double u = (double(v) + 1.0) * 0.5 * 255.0;
  const long r = std::lround(u);
  return uint8_t(std::clamp(r, 0L, 255L));
}

// (3, H, W) tensor in [-1, 1] from an interleaved 8-bit image.
template <typename T>
Tensor<T> to_tensor(const ImageU8& img) {
  require(img.channels == 3, "to_tensor: 3-channel image expected");
  Tensor<T> t({3, img.height, img.width});
  const int64_t HW = img.height * img.width;
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      for (int64_t c = 0; c < 3; ++c)
        t[c * HW + y * img.width + x] =
            normalize_u8<T>(img.pixels[size_t((y * img.width + x) * 3 + c)]);
  return t;
}

template <typename T>
ImageU8 from_tensor(const Tensor<T>& t) {
  require(t.ndim() == 3 && t.size(0) == 3, "from_tensor: (3,H,W) expected");
  ImageU8 img;
  img.height = t.size(1);
  img.width = t.size(2);
  img.channels = 3;
  img.pixels.resize(size_t(img.height * img.width * 3));
  const int64_t HW = img.height * img.width;
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      for (int64_t c = 0; c < 3; ++c)
        img.pixels[size_t((y * img.width + x) * 3 + c)] =
            denormalize_u8(t[c * HW + y * img.width + x]);
  return img;
}

// Bilinear resize of a (C, H, W) tensor (half-pixel centers).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int64_t out_h, int64_t out_w) {
  require(src.ndim() == 3, "resize: (C,H,W) expected");
  const int64_t C = src.size(0), H = src.size(1), W = src.size(2);
  if (H == out_h && W == out_w) return src.clone();
  Tensor<T> dst({C, out_h, out_w});
  const double sy = double(H) / double(out_h);
  const double sx = double(W) / double(out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const double fy = std::max(0.0, (double(y) + 0.5) * sy - 0.5);
    const int64_t y0 = std::min(int64_t(fy), H - 1);
    const int64_t y1 = std::min(y0 + 1, H - 1);
    const T wy = T(fy - double(y0));
    for (int64_t x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (double(x) + 0.5) * sx - 0.5);
      const int64_t x0 = std::min(int64_t(fx), W - 1);
      const int64_t x1 = std::min(x0 + 1, W - 1);
      const T wx = T(fx - double(x0));
      for (int64_t c = 0; c < C; ++c) {
        const T* p = src.data() + c * H * W;
        const T top = p[y0 * W + x0] * (T(1) - wx) + p[y0 * W + x1] * wx;
        const T bot = p[y1 * W + x0] * (T(1) - wx) + p[y1 * W + x1] * wx;
        dst[(c * out_h + y) * out_w + x] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return dst;
}

}  // namespace attni2i

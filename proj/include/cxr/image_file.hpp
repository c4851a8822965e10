#pragma once

// PNG (8/16-bit) and JPEG (8-bit) decoding into RawImage, PNG encoding.
// Link against libpng and libjpeg.

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

// jpeglib.h needs size_t and FILE declared first
#include <jpeglib.h>

#include "cxr/errors.hpp"
#include "cxr/image.hpp"

namespace cxr {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

inline RawImage read_png(std::FILE* fp, const std::string& name) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  RawImage img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG " + name);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const int channels = png_get_channels(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = channels;
  img.bit_depth = depth;
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * img.height);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if ((channels != 1 && channels != 3) || (depth != 8 && depth != 16)) {
    throw FormatError("unsupported PNG layout in " + name);
  }
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * channels;
  img.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // PNG stores 16-bit samples big-endian
    img.samples[i] = depth == 8 ? buffer[i]
                                : static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1]);
  }
  return img;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegError*>(cinfo->err)->jump, 1);
}

inline RawImage read_jpeg(std::FILE* fp, const std::string& name) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  RawImage img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("corrupt JPEG " + name);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.num_components != 1) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.channels = cinfo.output_components;
  img.bit_depth = 8;
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  std::vector<JSAMPLE> row(stride);
  img.samples.reserve(stride * img.height);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW r = row.data();
    jpeg_read_scanlines(&cinfo, &r, 1);
    img.samples.insert(img.samples.end(), row.begin(), row.end());
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

}  // namespace detail

/// Decodes PNG or JPEG, chosen by file signature.
inline RawImage read_image(const std::filesystem::path& path) {
  auto fp = detail::open_file(path, "rb");
  unsigned char sig[8] = {};
  const std::size_t got = std::fread(sig, 1, 8, fp.get());
  std::rewind(fp.get());
  if (got == 8 && png_sig_cmp(sig, 0, 8) == 0) return detail::read_png(fp.get(), path.string());
  if (got >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) {
    return detail::read_jpeg(fp.get(), path.string());
  }
  throw FormatError("unsupported image container: " + path.string());
}

inline void write_png(const std::filesystem::path& path, const RawImage& img) {
  if ((img.channels != 1 && img.channels != 3) || (img.bit_depth != 8 && img.bit_depth != 16)) {
    throw FormatError("write_png supports 8/16-bit gray or RGB");
  }
  auto fp = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  const std::size_t per_row = static_cast<std::size_t>(img.width) * img.channels;
  const std::size_t bytes = img.bit_depth / 8;
  std::vector<std::uint8_t> buffer(per_row * bytes * img.height);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (bytes == 1) {
      buffer[i] = static_cast<std::uint8_t>(img.samples[i]);
    } else {
      buffer[2 * i] = static_cast<std::uint8_t>(img.samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<std::uint8_t>(img.samples[i] & 0xFF);
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * per_row * bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, img.bit_depth,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Quantizes a [0, 1] image to 8-bit samples.
inline RawImage to_raw8(const Image& image) {
  RawImage raw;
  raw.height = static_cast<int>(image.height());
  raw.width = static_cast<int>(image.width());
  raw.channels = static_cast<int>(image.channels());
  raw.bit_depth = 8;
  raw.samples.resize(image.pixels.size());
  for (std::size_t i = 0; i < raw.samples.size(); ++i) {
    raw.samples[i] =
        static_cast<std::uint16_t>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  return raw;
}

}  // namespace cxr

#pragma once

// Pixel preprocessing: intensity normalization, bilinear resizing and the
// rotation / zoom / horizontal-flip augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxr/errors.hpp"
#include "cxr/rng.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

/// Decoded raster before normalization. Samples are interleaved row-major.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 (grayscale) or 3 (RGB)
  int bit_depth = 8; // 8 or 16
  std::vector<std::uint16_t> samples;
};

/// Normalized image: pixels (h, w, c) in [0, 1].
struct Image {
  Tensor<float> pixels;
  int bit_depth = 8;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
  std::size_t channels() const { return pixels.dim(2); }
};

/// Divides by the bit-depth maximum (255 or 65535).
inline Image normalize(const RawImage& raw) {
  double max_value = 0;
  if (raw.bit_depth == 8) {
    max_value = 255.0;
  } else if (raw.bit_depth == 16) {
    max_value = 65535.0;
  } else {
    throw FormatError("unsupported bit depth " + std::to_string(raw.bit_depth));
  }
  if (raw.channels != 1 && raw.channels != 3) {
    throw FormatError("unsupported channel count " + std::to_string(raw.channels));
  }
  const auto expected = static_cast<std::size_t>(raw.width) * raw.height * raw.channels;
  if (raw.width < 1 || raw.height < 1 || raw.samples.size() != expected) {
    throw FormatError("raw image sample count does not match its dimensions");
  }
  if (*std::max_element(raw.samples.begin(), raw.samples.end()) == 0) {
    throw std::invalid_argument("cannot normalize an all-zero image");
  }
  Tensor<float> px({static_cast<std::size_t>(raw.height), static_cast<std::size_t>(raw.width),
                    static_cast<std::size_t>(raw.channels)});
  for (std::size_t i = 0; i < expected; ++i) {
    px[i] = static_cast<float>(raw.samples[i] / max_value);
  }
  return {std::move(px), raw.bit_depth};
}

namespace detail {

/// Bilinear sample at continuous pixel coordinates (pixel centers at integers).
/// Outside the image, `fill` is returned when given, otherwise edges clamp.
inline float bilinear(const Tensor<float>& px, double y, double x, std::size_t c,
                      const float* fill) {
  const auto h = static_cast<double>(px.dim(0));
  const auto w = static_cast<double>(px.dim(1));
  if (fill && (y < -0.5 || y > h - 0.5 || x < -0.5 || x > w - 0.5)) return *fill;
  y = std::clamp(y, 0.0, h - 1.0);
  x = std::clamp(x, 0.0, w - 1.0);
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, px.dim(0) - 1);
  const std::size_t x1 = std::min(x0 + 1, px.dim(1) - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const std::size_t nc = px.dim(2);
  auto at = [&](std::size_t yy, std::size_t xx) {
    return static_cast<double>(px[(yy * px.dim(1) + xx) * nc + c]);
  };
  const double top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx;
  const double bottom = at(y1, x0) * (1 - fx) + at(y1, x1) * fx;
  return static_cast<float>(top * (1 - fy) + bottom * fy);
}

}  // namespace detail

/// Bilinear resize (half-pixel centers) to resolution x resolution with three
/// channels; grayscale is replicated.
inline Image resize(const Image& image, int resolution) {
  if (resolution < 1) throw std::invalid_argument("resolution must be >= 1");
  const auto r = static_cast<std::size_t>(resolution);
  const std::size_t nc = image.channels();
  if (nc != 1 && nc != 3) throw FormatError("resize expects 1 or 3 channels");
  Tensor<float> out({r, r, 3});
  const double sy = static_cast<double>(image.height()) / resolution;
  const double sx = static_cast<double>(image.width()) / resolution;
  for (std::size_t y = 0; y < r; ++y) {
    const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < r; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      for (std::size_t c = 0; c < 3; ++c) {
        out[(y * r + x) * 3 + c] =
            detail::bilinear(image.pixels, src_y, src_x, nc == 1 ? 0 : c, nullptr);
      }
    }
  }
  return {std::move(out), image.bit_depth};
}

struct AugSpec {
  double max_rotation_deg = 15.0;
  double zoom_fraction = 0.20;
  bool horizontal_flip = true;
  double rotate_probability = 0.5;
  double zoom_probability = 0.5;
  double flip_probability = 0.5;

  void validate() const {
    if (max_rotation_deg < 0 || max_rotation_deg > 15) {
      throw std::invalid_argument("max rotation must be within [0, 15] degrees");
    }
    if (zoom_fraction < 0 || zoom_fraction > 0.20) {
      throw std::invalid_argument("zoom fraction must be within [0, 0.20]");
    }
    for (double p : {rotate_probability, zoom_probability, flip_probability}) {
      if (p < 0 || p > 1) throw std::invalid_argument("probabilities must be within [0, 1]");
    }
  }

  static AugSpec none() { return {15.0, 0.20, true, 0.0, 0.0, 0.0}; }
};

/// One concrete draw of the augmentation. Values are kept at four decimals so
/// the text recipe reproduces them exactly.
struct AugParams {
  double rotation_deg = 0.0;  // positive = anticlockwise
  double zoom = 1.0;          // >= 1, center crop after scaling
  bool flip = false;

  bool identity() const { return rotation_deg == 0.0 && zoom == 1.0 && !flip; }
  bool operator==(const AugParams&) const = default;
};

namespace detail {
inline double round4(double v) { return std::round(v * 1e4) / 1e4; }
}  // namespace detail

inline AugParams draw_aug(const AugSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  AugParams p;
  // Each value is drawn even when its transform is skipped so the stream
  // position never depends on the probabilities.
  const bool rotate = rng.bernoulli(spec.rotate_probability);
  const double angle = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg);
  const bool zoom = rng.bernoulli(spec.zoom_probability);
  const double factor = rng.uniform(1.0, 1.0 + spec.zoom_fraction);
  const bool flip = rng.bernoulli(spec.flip_probability);
  if (rotate) p.rotation_deg = detail::round4(angle);
  if (zoom) p.zoom = detail::round4(factor);
  p.flip = spec.horizontal_flip && flip;
  return p;
}

inline std::string to_recipe(const AugParams& p) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "rot=%.4f;zoom=%.4f;flip=%d", p.rotation_deg, p.zoom,
                p.flip ? 1 : 0);
  return buf;
}

inline AugParams parse_recipe(const std::string& recipe) {
  AugParams p;
  int flip = 0;
  char tail = 0;
  if (std::sscanf(recipe.c_str(), "rot=%lf;zoom=%lf;flip=%d%c", &p.rotation_deg, &p.zoom, &flip,
                  &tail) != 3 ||
      (flip != 0 && flip != 1) || p.zoom < 1.0) {
    throw FormatError("malformed augmentation recipe '" + recipe + "'");
  }
  p.flip = flip == 1;
  return p;
}

/// Rotation about the center and zoom (scale then center crop) share one
/// inverse mapping; uncovered corners are filled with 0. Flip mirrors columns.
inline Image apply_aug(const Image& image, const AugParams& p) {
  if (p.identity()) return image;
  const std::size_t h = image.height(), w = image.width(), nc = image.channels();
  Tensor<float> out({h, w, nc});
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double theta = p.rotation_deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(theta) / p.zoom;
  const double sn = std::sin(theta) / p.zoom;
  const float zero = 0.0f;
  const bool warp = p.rotation_deg != 0.0 || p.zoom != 1.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t dst_x = p.flip ? w - 1 - x : x;
      for (std::size_t c = 0; c < nc; ++c) {
        float v;
        if (warp) {
          const double dy = static_cast<double>(y) - cy;
          const double dx = static_cast<double>(x) - cx;
          // image rows grow downward, so anticlockwise rotation flips the sign of dy terms
          const double sx = cx + cs * dx - sn * dy;
          const double sy = cy + sn * dx + cs * dy;
          v = detail::bilinear(image.pixels, sy, sx, c, &zero);
        } else {
          v = image.pixels[(y * w + x) * nc + c];
        }
        out[(y * w + dst_x) * nc + c] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return {std::move(out), image.bit_depth};
}

inline Image augment(const Image& image, const AugSpec& spec, std::uint64_t seed) {
  return apply_aug(image, draw_aug(spec, seed));
}

}  // namespace cxr

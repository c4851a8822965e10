#pragma once

// In-memory samples: loading manifest entries from disk, batching, and a
// synthetic three-class image generator for tests and demos.

#include <cmath>
#include <filesystem>
#include <cstdint>
#include <string>
#include <vector>

#include "cxr/image.hpp"
#include "cxr/image_file.hpp"
#include "cxr/manifest.hpp"
#include "cxr/rng.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

/// One preprocessed image (res, res, 3) with its label.
struct Sample {
  Tensor<float> image;
  Label label = Label::Normal;
  std::string path;
};

/// decode -> normalize to [0, 1] -> resize -> replay the augmentation recipe.
inline Sample load_sample(const ManifestEntry& entry, int resolution) {
  Image img = resize(normalize(read_image(entry.path)), resolution);
  if (entry.augmented()) img = apply_aug(img, parse_recipe(entry.aug_recipe));
  return {std::move(img.pixels), entry.label, entry.path};
}

inline std::vector<Sample> load_samples(const Manifest& m, int resolution) {
  std::vector<Sample> out;
  out.reserve(m.size());
  for (const auto& e : m) out.push_back(load_sample(e, resolution));
  return out;
}

/// Stacks (h, w, c) images into one (b, h, w, c) batch.
template <typename T>
Tensor<T> make_batch(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw std::invalid_argument("empty batch");
  const Shape& s = images.front()->shape();
  if (s.size() != 3) throw ShapeError("batch images must be (h, w, c)");
  Tensor<T> out({images.size(), s[0], s[1], s[2]});
  const std::size_t per = shape_size(s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw ShapeError("batch images differ in shape");
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = static_cast<T>((*images[i])[k]);
  }
  return out;
}

// ------------------------------------------------------------------ synthetic

/// Grayscale (size, size, 1) image whose class is visible both in mean
/// intensity and in texture: Normal is a dim smooth field, Pneumonia has
/// horizontal bands, COVID19 has bright blobs. Values stay inside [0.02, 1].
inline Image synthetic_image(Label label, int size, std::uint64_t seed) {
  if (size < 4) throw std::invalid_argument("synthetic images need size >= 4");
  Rng rng(mix_seed(seed, "synthetic/" + to_string(label)));
  const auto n = static_cast<std::size_t>(size);
  Tensor<float> px({n, n, 1});
  const double phase = rng.uniform(0.0, 6.283185307179586);
  const double cy = rng.uniform(0.3, 0.7), cx = rng.uniform(0.3, 0.7);
  const double base = label == Label::Normal ? 0.25 : label == Label::Pneumonia ? 0.5 : 0.7;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double fy = (static_cast<double>(y) + 0.5) / size;
      const double fx = (static_cast<double>(x) + 0.5) / size;
      double v = base;
      if (label == Label::Pneumonia) {
        v += 0.15 * std::sin(fy * 25.0 + phase);
      } else if (label == Label::COVID19) {
        const double d2 = (fy - cy) * (fy - cy) + (fx - cx) * (fx - cx);
        v += 0.25 * std::exp(-d2 / 0.02) - 0.1;
      }
      v += 0.05 * (rng.uniform() - 0.5);
      px[y * n + x] = static_cast<float>(std::clamp(v, 0.02, 1.0));
    }
  }
  return {std::move(px), 8};
}

/// `per_class` images of each class at the given resolution, interleaved
/// Normal, Pneumonia, COVID19, Normal, ...
inline std::vector<Sample> synthetic_dataset(std::size_t per_class, int resolution, std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (Label l : kAllLabels) {
      Image img = resize(synthetic_image(l, resolution, mix_seed(seed, i)), resolution);
      out.push_back({std::move(img.pixels), l, "synthetic/" + to_string(l) + "/" + std::to_string(i)});
    }
  }
  return out;
}

struct SyntheticSources {
  Manifest rsna;   // Normal and Pneumonia
  Manifest covid;  // COVID19
};

/// Writes 8-bit PNG stand-ins for the two source corpora under `dir` and
/// returns their manifests (partition Train, no recipe).
inline SyntheticSources write_synthetic_sources(const std::filesystem::path& dir, const ClassCounts& counts,
                                                int size, std::uint64_t seed) {
  SyntheticSources out;
  for (Label l : kAllLabels) {
    const Source src = l == Label::COVID19 ? Source::COVIDCollection : Source::RSNA;
    const auto sub = dir / to_string(src);
    std::filesystem::create_directories(sub);
    for (std::size_t i = 0; i < counts[l]; ++i) {
      const auto path = sub / (to_string(l) + "_" + std::to_string(i) + ".png");
      write_png(path, to_raw8(synthetic_image(l, size, mix_seed(seed, i))));
      (l == Label::COVID19 ? out.covid : out.rsna).push_back({path.string(), l, src, Partition::Train, ""});
    }
  }
  return out;
}

}  // namespace cxr

#pragma once

// Dataset manifests: assembling train/test partitions from labelled sources,
// the Raw / RawPlusAug / Balanced training configurations and relabelling for
// the two hierarchical stages.
//
// CSV layout: header `path,label,source,partition,aug_recipe`, one entry per
// line, empty aug_recipe for original images. Augmented entries point at
// their original's path and carry the transform recipe.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cxr/errors.hpp"
#include "cxr/image.hpp"
#include "cxr/rng.hpp"

namespace cxr {

enum class Label { Normal, Pneumonia, COVID19 };
enum class Source { RSNA, COVIDCollection };
enum class Partition { Train, Test };

inline constexpr std::array<Label, 3> kAllLabels{Label::Normal, Label::Pneumonia, Label::COVID19};

inline std::string to_string(Label l) {
  switch (l) {
    case Label::Normal: return "Normal";
    case Label::Pneumonia: return "Pneumonia";
    case Label::COVID19: return "COVID19";
  }
  return "?";
}

inline std::string to_string(Source s) { return s == Source::RSNA ? "RSNA" : "COVIDCollection"; }
inline std::string to_string(Partition p) { return p == Partition::Train ? "train" : "test"; }

inline Label parse_label(std::string_view s) {
  if (s == "Normal") return Label::Normal;
  if (s == "Pneumonia") return Label::Pneumonia;
  if (s == "COVID19") return Label::COVID19;
  throw FormatError("unknown label '" + std::string(s) + "'");
}

inline Source parse_source(std::string_view s) {
  if (s == "RSNA") return Source::RSNA;
  if (s == "COVIDCollection") return Source::COVIDCollection;
  throw FormatError("unknown source '" + std::string(s) + "'");
}

inline Partition parse_partition(std::string_view s) {
  if (s == "train") return Partition::Train;
  if (s == "test") return Partition::Test;
  throw FormatError("unknown partition '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string path;
  Label label = Label::Normal;
  Source source = Source::RSNA;
  Partition partition = Partition::Train;
  std::string aug_recipe;  // empty for originals

  bool augmented() const noexcept { return !aug_recipe.empty(); }
  bool operator==(const ManifestEntry&) const = default;
};

using Manifest = std::vector<ManifestEntry>;

struct ClassCounts {
  std::size_t normal = 0;
  std::size_t pneumonia = 0;
  std::size_t covid = 0;

  std::size_t& operator[](Label l) {
    return l == Label::Normal ? normal : l == Label::Pneumonia ? pneumonia : covid;
  }
  std::size_t operator[](Label l) const {
    return l == Label::Normal ? normal : l == Label::Pneumonia ? pneumonia : covid;
  }
  std::size_t total() const noexcept { return normal + pneumonia + covid; }
  std::string str() const {
    return std::to_string(normal) + "," + std::to_string(pneumonia) + "," + std::to_string(covid);
  }
  bool operator==(const ClassCounts&) const = default;
};

inline ClassCounts count_classes(const Manifest& m) {
  ClassCounts c;
  for (const auto& e : m) ++c[e.label];
  return c;
}

// ------------------------------------------------------------------ CSV

inline constexpr std::string_view kManifestHeader = "path,label,source,partition,aug_recipe";

inline void write_manifest(std::ostream& os, const Manifest& m) {
  os << kManifestHeader << '\n';
  for (const auto& e : m) {
    if (e.path.find_first_of(",\n\r") != std::string::npos) {
      throw FormatError("manifest paths may not contain commas or line breaks: " + e.path);
    }
    os << e.path << ',' << to_string(e.label) << ',' << to_string(e.source) << ','
       << to_string(e.partition) << ',' << e.aug_recipe << '\n';
  }
}

inline std::string manifest_csv(const Manifest& m) {
  std::ostringstream os;
  write_manifest(os, m);
  return os.str();
}

inline Manifest read_manifest(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw FormatError("manifest header must be '" + std::string(kManifestHeader) + "'");
  Manifest m;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 5) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected 5 fields, got " +
                        std::to_string(f.size()));
    }
    if (f[0].empty()) throw FormatError("manifest line " + std::to_string(line_no) + ": empty path");
    m.push_back({f[0], parse_label(f[1]), parse_source(f[2]), parse_partition(f[3]), f[4]});
    if (!f[4].empty()) parse_recipe(f[4]);
  }
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read manifest " + path.string());
  return read_manifest(is);
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  write_manifest(os, m);
}

// ------------------------------------------------------------------ partitions

struct PartitionTargets {
  ClassCounts train{7966, 5421, 152};
  ClassCounts test{100, 100, 31};

  /// Proportional targets for smaller sources. Test counts keep the full-size
  /// class ratios; every class keeps at least one image per partition.
  static PartitionTargets scaled(double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("scale must be in (0, 1]");
    PartitionTargets full, out;
    for (Label l : kAllLabels) {
      out.train[l] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(full.train[l] * fraction)));
      out.test[l] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(full.test[l] * fraction)));
    }
    return out;
  }
};

struct CovidxSplit {
  Manifest train;
  Manifest test;
};

/// Draws each class's test images first, then its training images, from the
/// pooled sources in a seeded order. Unused images are left out.
inline CovidxSplit build_covidx(const Manifest& rsna, const Manifest& covid, std::uint64_t seed,
                                const PartitionTargets& targets = {}) {
  CovidxSplit out;
  std::string shortfall;
  for (Label l : kAllLabels) {
    Manifest pool;
    for (const auto* src : {&rsna, &covid}) {
      for (const auto& e : *src) {
        if (e.label != l) continue;
        if (e.augmented()) throw std::invalid_argument("source manifests must hold originals only");
        pool.push_back(e);
      }
    }
    const std::size_t need = targets.train[l] + targets.test[l];
    if (pool.size() < need) {
      shortfall += (shortfall.empty() ? "" : "; ") + to_string(l) + " has " +
                   std::to_string(pool.size()) + " of " + std::to_string(need) + " required";
      continue;
    }
    Rng rng(mix_seed(seed, "covidx/" + to_string(l)));
    rng.shuffle(pool);
    for (std::size_t i = 0; i < need; ++i) {
      ManifestEntry e = pool[i];
      e.partition = i < targets.test[l] ? Partition::Test : Partition::Train;
      (e.partition == Partition::Test ? out.test : out.train).push_back(std::move(e));
    }
  }
  if (!shortfall.empty()) throw ShortfallError("insufficient source images: " + shortfall);
  return out;
}

// ------------------------------------------------------------------ configurations

enum class DatasetMode { Raw, RawPlusAug, Balanced };

inline std::string to_string(DatasetMode m) {
  switch (m) {
    case DatasetMode::Raw: return "raw";
    case DatasetMode::RawPlusAug: return "raw+aug";
    case DatasetMode::Balanced: return "balanced";
  }
  return "?";
}

inline DatasetMode parse_dataset_mode(std::string_view s) {
  if (s == "raw") return DatasetMode::Raw;
  if (s == "raw+aug" || s == "rawplusaug") return DatasetMode::RawPlusAug;
  if (s == "balanced") return DatasetMode::Balanced;
  throw std::invalid_argument("unknown dataset mode '" + std::string(s) + "' (raw, raw+aug, balanced)");
}

struct DatasetConfig {
  DatasetMode mode = DatasetMode::Raw;
  std::size_t covid_aug_count = 1000;
  std::size_t majority_cap = 4000;
  std::size_t per_class = 1000;

  void validate() const {
    if (covid_aug_count == 0 || majority_cap == 0 || per_class == 0) {
      throw std::invalid_argument("dataset config parameters must be positive");
    }
  }
};

namespace detail {

/// Seeded subset of `n` entries, kept in manifest order.
inline Manifest undersample(const Manifest& originals, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(originals.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  Manifest out;
  for (auto i : idx) out.push_back(originals[i]);
  return out;
}

/// `n` recipe entries cycling over the originals.
inline Manifest synthesize(const Manifest& originals, std::size_t n, const AugSpec& aug,
                           std::uint64_t seed) {
  if (originals.empty() && n > 0) throw ShortfallError("cannot augment a class with no originals");
  Manifest out;
  for (std::size_t k = 0; k < n; ++k) {
    ManifestEntry e = originals[k % originals.size()];
    e.aug_recipe = to_recipe(draw_aug(aug, mix_seed(seed, k)));
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace detail

/// Effective training manifest for a configuration. Classes are emitted in
/// label order, originals before their augmented copies.
inline Manifest apply_config(const Manifest& train, const DatasetConfig& config, const AugSpec& aug,
                             std::uint64_t seed) {
  config.validate();
  aug.validate();
  for (const auto& e : train) {
    if (e.partition != Partition::Train) {
      throw std::invalid_argument("apply_config received a test entry: " + e.path);
    }
    if (e.augmented()) throw std::invalid_argument("apply_config expects originals only: " + e.path);
  }
  if (config.mode == DatasetMode::Raw) return train;
  Manifest out;
  for (Label l : kAllLabels) {
    Manifest originals;
    for (const auto& e : train) {
      if (e.label == l) originals.push_back(e);
    }
    const std::uint64_t s = mix_seed(seed, "config/" + to_string(l));
    Manifest kept;
    Manifest extra;
    if (config.mode == DatasetMode::RawPlusAug) {
      if (l == Label::COVID19) {
        kept = originals;
        extra = detail::synthesize(originals, config.covid_aug_count, aug, s);
      } else {
        kept = detail::undersample(originals, config.majority_cap, s);
      }
    } else {
      kept = detail::undersample(originals, config.per_class, s);
      extra = detail::synthesize(originals, config.per_class - kept.size(), aug, s);
    }
    out.insert(out.end(), kept.begin(), kept.end());
    out.insert(out.end(), extra.begin(), extra.end());
  }
  return out;
}

// ------------------------------------------------------------------ hierarchy

enum class HierLevel { Root, Leaf };

/// Root: Pneumonia and COVID19 merge into Pneumonia. Leaf: Normal is dropped.
inline Manifest hierarchical_relabel(const Manifest& m, HierLevel level) {
  Manifest out;
  for (auto e : m) {
    if (level == HierLevel::Root) {
      if (e.label == Label::COVID19) e.label = Label::Pneumonia;
    } else if (e.label == Label::Normal) {
      continue;
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Which classifier a model serves and how labels map to its output indices.
enum class Task { Flat, Root, Leaf };

inline std::size_t num_classes(Task t) { return t == Task::Flat ? 3 : 2; }

inline std::size_t class_index(Task task, Label l) {
  switch (task) {
    case Task::Flat: return static_cast<std::size_t>(l);
    case Task::Root: return l == Label::Normal ? 0 : 1;
    case Task::Leaf:
      if (l == Label::Normal) throw std::invalid_argument("the leaf classifier has no Normal class");
      return l == Label::Pneumonia ? 0 : 1;
  }
  return 0;
}

inline Label label_of(Task task, std::size_t index) {
  if (index >= num_classes(task)) throw std::out_of_range("class index out of range");
  switch (task) {
    case Task::Flat: return static_cast<Label>(index);
    case Task::Root: return index == 0 ? Label::Normal : Label::Pneumonia;
    case Task::Leaf: return index == 0 ? Label::Pneumonia : Label::COVID19;
  }
  return Label::Normal;
}

}  // namespace cxr

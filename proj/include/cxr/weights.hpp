#pragma once

// Portable weight files and transfer of pre-trained layers.
//
// Binary layout, all integers little-endian:
//   magic    8 bytes  "EFFHW001"
//   count    u32
//   entries  count times:
//     name_len u32, name bytes (UTF-8)
//     rank     u32, dims u32[rank]
//     payload  product(dims) IEEE-754 binary32 values, row-major

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cxr/arch.hpp"
#include "cxr/autograd.hpp"
#include "cxr/errors.hpp"
#include "cxr/network.hpp"

namespace cxr {

inline constexpr std::array<char, 8> kWeightMagic{'E', 'F', 'F', 'H', 'W', '0', '0', '1'};

struct WeightEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  bool operator==(const WeightEntry&) const = default;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("weight file truncated while reading ") + what);
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

class WeightFile {
 public:
  WeightFile() = default;
  explicit WeightFile(std::vector<WeightEntry> entries) : entries_(std::move(entries)) {
    std::set<std::string> seen;
    for (const auto& e : entries_) {
      std::size_t n = 1;
      for (auto d : e.dims) n *= d;
      if (n != e.values.size()) {
        throw FormatError("entry '" + e.name + "' payload does not match its dims");
      }
      if (!seen.insert(e.name).second) throw FormatError("duplicate entry '" + e.name + "'");
    }
  }

  const std::vector<WeightEntry>& entries() const noexcept { return entries_; }

  const WeightEntry* find(const std::string& name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const WeightEntry& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &*it;
  }

  std::vector<std::uint8_t> to_bytes() const {
    std::vector<std::uint8_t> out(kWeightMagic.begin(), kWeightMagic.end());
    detail::put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
      out.insert(out.end(), e.name.begin(), e.name.end());
      detail::put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
      for (auto d : e.dims) detail::put_u32(out, d);
      for (float v : e.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_u32(out, bits);
      }
    }
    return out;
  }

  static WeightFile from_bytes(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes);
    auto magic = in.take(8, "magic");
    if (!std::equal(magic.begin(), magic.end(), kWeightMagic.begin())) {
      throw FormatError("bad weight file magic (expected EFFHW001)");
    }
    const std::uint32_t count = in.u32("entry count");
    std::vector<WeightEntry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
      WeightEntry e;
      const auto len = in.u32("name length");
      auto name = in.take(len, "name");
      e.name.assign(name.begin(), name.end());
      const auto rank = in.u32("rank");
      std::uint64_t n = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        e.dims.push_back(in.u32("dims"));
        n *= e.dims.back();
      }
      if (n > bytes.size()) throw FormatError("entry '" + e.name + "' larger than the file");
      auto payload = in.take(static_cast<std::size_t>(n) * 4, "payload");
      e.values.resize(static_cast<std::size_t>(n));
      for (std::size_t k = 0; k < e.values.size(); ++k) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(payload[4 * k + b]) << (8 * b);
        std::memcpy(&e.values[k], &bits, 4);
      }
      entries.push_back(std::move(e));
    }
    if (!in.done()) throw FormatError("trailing bytes after last weight entry");
    return WeightFile(std::move(entries));
  }

  void write(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }

  static WeightFile read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return from_bytes(bytes);
  }

  bool operator==(const WeightFile&) const = default;

 private:
  std::vector<WeightEntry> entries_;
};

template <typename T>
WeightFile save(const ParamStore<T>& store) {
  std::vector<WeightEntry> entries;
  for (const auto& name : store.names()) {
    const auto& v = store.at(name).value;
    WeightEntry e{name, {}, {}};
    for (auto d : v.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
    e.values.assign(v.data().begin(), v.data().end());
    entries.push_back(std::move(e));
  }
  return WeightFile(std::move(entries));
}

/// Builds the spec's parameter store from a file. Every entry of the spec must
/// be present with identical dims; unknown entries are rejected.
template <typename T>
ParamStore<T> load(const WeightFile& file, const ArchSpec& spec) {
  ParamStore<T> store;
  std::set<std::string> expected;
  for (const auto& e : param_layout(spec)) {
    expected.insert(e.name);
    const WeightEntry* w = file.find(e.name);
    if (!w) throw FormatError("weight file is missing entry '" + e.name + "'");
    Shape dims(w->dims.begin(), w->dims.end());
    if (dims != e.shape) {
      throw ShapeError("layer '" + layer_of(e.name) + "' entry '" + e.name + "' has dims " +
                       shape_str(dims) + ", expected " + shape_str(e.shape));
    }
    const bool differentiable = e.role != EntryRole::BnMean && e.role != EntryRole::BnVar;
    store.add(e.name, Tensor<T>(e.shape, std::vector<T>(w->values.begin(), w->values.end())),
              differentiable);
  }
  for (const auto& w : file.entries()) {
    if (!expected.count(w.name)) {
      throw FormatError("weight file entry '" + w.name + "' does not belong to this architecture");
    }
  }
  return store;
}

// ------------------------------------------------------------------ transfer

/// Which target layers are copied from a source file (source layer -> target
/// layer), which keep fresh initialization, and which remain trainable.
struct TransferPlan {
  const WeightFile* source = nullptr;
  std::vector<std::pair<std::string, std::string>> name_map;
  std::vector<std::string> new_layers;
  // Layers absent from the mask are trainable.
  std::map<std::string, bool> trainable_mask;
};

/// Copies mapped layers from the plan's source into a freshly initialized
/// store and applies the trainable mask.
template <typename T>
ParamStore<T> apply_transfer(const TransferPlan& plan, ParamStore<T> store) {
  std::map<std::string, int> covered;
  for (const auto& l : store.layers()) covered[l] = 0;
  auto cover = [&](const std::string& layer) {
    auto it = covered.find(layer);
    if (it == covered.end()) throw std::invalid_argument("plan names unknown target layer '" + layer + "'");
    if (++it->second > 1) throw std::invalid_argument("target layer '" + layer + "' covered twice");
  };
  for (const auto& [_, dst] : plan.name_map) cover(dst);
  for (const auto& l : plan.new_layers) cover(l);
  for (const auto& [layer, n] : covered) {
    if (n == 0) throw std::invalid_argument("target layer '" + layer + "' is neither mapped nor new");
  }
  if (!plan.name_map.empty() && !plan.source) {
    throw std::invalid_argument("transfer plan maps layers but has no source");
  }
  for (const auto& [src, dst] : plan.name_map) {
    for (const auto& name : store.names()) {
      if (layer_of(name) != dst) continue;
      const std::string suffix = name.substr(dst.size());
      const WeightEntry* w = plan.source->find(src + suffix);
      if (!w) throw FormatError("source has no entry '" + src + suffix + "' for layer '" + dst + "'");
      auto& p = store.at(name);
      Shape dims(w->dims.begin(), w->dims.end());
      if (dims != p.value.shape()) {
        throw ShapeError("shape conflict for layer '" + dst + "': source " + shape_str(dims) +
                         " vs target " + shape_str(p.value.shape()));
      }
      std::copy(w->values.begin(), w->values.end(), p.value.data().begin());
    }
  }
  store.set_all_trainable(true);
  for (const auto& [layer, trainable] : plan.trainable_mask) {
    if (!covered.count(layer)) throw std::invalid_argument("mask names unknown layer '" + layer + "'");
    store.set_layer_trainable(layer, trainable);
  }
  return store;
}

/// Plan copying every backbone layer the source provides under the same name
/// and initializing the head afresh.
inline TransferPlan backbone_transfer_plan(const WeightFile& source, const ArchSpec& target) {
  TransferPlan plan;
  plan.source = &source;
  const int head_base = head_stage_base(target);
  std::vector<std::string> layers;
  for (const auto& e : param_layout(target)) {
    auto l = layer_of(e.name);
    if (layers.empty() || layers.back() != l) layers.push_back(l);
  }
  for (const auto& l : layers) {
    const int stage = std::stoi(l.substr(5, l.find('.') - 5));
    const bool in_source = source.find(l + ".weight") || source.find(l + ".gamma");
    if (stage < head_base && in_source) {
      plan.name_map.emplace_back(l, l);
    } else {
      plan.new_layers.push_back(l);
    }
  }
  return plan;
}

}  // namespace cxr

#pragma once

// EfficientNet B0-B5 architecture synthesis by compound scaling, plus the
// four-block classification head used for chest X-ray screening.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cxr/errors.hpp"

namespace cxr {

enum class Variant { B0, B1, B2, B3, B4, B5 };

inline constexpr std::array<Variant, 6> kAllVariants{Variant::B0, Variant::B1, Variant::B2,
                                                     Variant::B3, Variant::B4, Variant::B5};

inline std::string to_string(Variant v) { return "B" + std::to_string(static_cast<int>(v)); }

/// Accepts "B3" or "b3".
inline Variant parse_variant(std::string_view text) {
  if (text.size() == 2 && (text[0] == 'B' || text[0] == 'b') && text[1] >= '0' && text[1] <= '5') {
    return static_cast<Variant>(text[1] - '0');
  }
  throw std::invalid_argument("unknown variant '" + std::string(text) + "' (expected B0..B5)");
}

/// Compound-scaling constants. Construction enforces alpha*beta^2*gamma^2 in
/// [1.9, 2.1] and each base >= 1.
class ScalingConfig {
 public:
  ScalingConfig(double alpha, double beta, double gamma, double phi)
      : alpha_(alpha), beta_(beta), gamma_(gamma), phi_(phi) {
    if (alpha < 1.0 || beta < 1.0 || gamma < 1.0) {
      throw std::invalid_argument("scaling bases must each be >= 1");
    }
    if (phi < 0.0) throw std::invalid_argument("compound coefficient must be >= 0");
    const double flops = alpha * beta * beta * gamma * gamma;
    if (flops < 1.9 || flops > 2.1) {
      throw std::invalid_argument("alpha*beta^2*gamma^2 = " + std::to_string(flops) +
                                  " outside [1.9, 2.1]");
    }
  }

  static ScalingConfig defaults(double phi) { return {1.2, 1.1, 1.15, phi}; }

  double alpha() const noexcept { return alpha_; }
  double beta() const noexcept { return beta_; }
  double gamma() const noexcept { return gamma_; }
  double phi() const noexcept { return phi_; }

 private:
  double alpha_, beta_, gamma_, phi_;
};

struct Multipliers {
  double depth = 1.0;
  double width = 1.0;
  double resolution = 1.0;
};

inline Multipliers scale(const ScalingConfig& c) {
  return {std::pow(c.alpha(), c.phi()), std::pow(c.beta(), c.phi()), std::pow(c.gamma(), c.phi())};
}

/// Ceiling.
inline int round_repeats(double raw) {
  if (!(raw > 0.0)) throw std::invalid_argument("repeats must be positive");
  return static_cast<int>(std::ceil(raw));
}

/// Nearest multiple of `divisor` (at least `divisor`), bumped up one step if
/// that would fall below 90% of raw.
inline int round_channels(double raw, int divisor = 8) {
  if (!(raw > 0.0)) throw std::invalid_argument("channel count must be positive");
  int rounded = std::max(divisor, static_cast<int>(raw + divisor / 2.0) / divisor * divisor);
  if (rounded < 0.9 * raw) rounded += divisor;
  return rounded;
}

enum class StageOp { Conv, MBConv };

struct StageSpec {
  StageOp op = StageOp::MBConv;
  int expansion = 1;
  int kernel = 3;
  int out_channels = 0;
  int repeats = 1;
  int stride = 1;
  int resolution = 0;  // input resolution of the stage

  bool operator==(const StageSpec&) const = default;
};

/// Layers added atop the backbone: BN/dropout, FC512/BN/swish/dropout,
/// FC128/BN/swish, FC(num_classes)/softmax.
struct HeadSpec {
  double dropout10 = 0.3;
  int dense11 = 512;
  double dropout11 = 0.3;
  int dense12 = 128;
  int num_classes = 3;

  bool operator==(const HeadSpec&) const = default;
};

struct ArchSpec {
  Variant variant = Variant::B0;
  int input_resolution = 224;
  std::vector<StageSpec> stages;
  HeadSpec head;
  bool include_se = true;

  bool operator==(const ArchSpec&) const = default;
};

struct VariantParams {
  double width;
  double depth;
  int resolution;
};

/// Per-variant multipliers, tabulated rather than recomputed from phi.
inline VariantParams variant_params(Variant v) {
  switch (v) {
    case Variant::B0: return {1.0, 1.0, 224};
    case Variant::B1: return {1.0, 1.1, 240};
    case Variant::B2: return {1.1, 1.2, 260};
    case Variant::B3: return {1.2, 1.4, 300};
    case Variant::B4: return {1.4, 1.8, 380};
    case Variant::B5: return {1.6, 2.2, 456};
  }
  throw std::invalid_argument("unknown variant");
}

inline int input_resolution(Variant v) { return variant_params(v).resolution; }

/// The B0 baseline, stage by stage (resolution column is the B0 input extent).
inline const std::array<StageSpec, 9>& b0_stages() {
  static const std::array<StageSpec, 9> stages{{
      {StageOp::Conv, 1, 3, 32, 1, 2, 224},
      {StageOp::MBConv, 1, 3, 16, 1, 1, 112},
      {StageOp::MBConv, 6, 3, 24, 2, 2, 112},
      {StageOp::MBConv, 6, 5, 40, 2, 2, 56},
      {StageOp::MBConv, 6, 3, 80, 3, 2, 28},
      {StageOp::MBConv, 6, 5, 112, 3, 1, 14},
      {StageOp::MBConv, 6, 5, 192, 4, 2, 14},
      {StageOp::MBConv, 6, 3, 320, 1, 1, 7},
      {StageOp::Conv, 1, 1, 1280, 1, 1, 7},
  }};
  return stages;
}

struct ScaledArchOptions {
  double width = 1.0;
  double depth = 1.0;
  int resolution = 224;
  // Overrides depth scaling with a fixed repeat count for every MBConv stage.
  std::optional<int> fixed_repeats;
};

/// Applies width/depth multipliers to the baseline and recomputes each
/// stage's input resolution under "same" padding.
inline ArchSpec build_scaled_arch(Variant label, const ScaledArchOptions& opt, int num_classes,
                                  bool include_se) {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (opt.resolution < 1) throw std::invalid_argument("resolution must be >= 1");
  ArchSpec spec;
  spec.variant = label;
  spec.input_resolution = opt.resolution;
  spec.include_se = include_se;
  spec.head.num_classes = num_classes;
  int res = opt.resolution;
  for (const auto& base : b0_stages()) {
    StageSpec s = base;
    s.out_channels = round_channels(base.out_channels * opt.width);
    if (base.op == StageOp::MBConv) {
      s.repeats = opt.fixed_repeats ? *opt.fixed_repeats : round_repeats(base.repeats * opt.depth);
    }
    s.resolution = res;
    res = (res + s.stride - 1) / s.stride;
    spec.stages.push_back(s);
  }
  return spec;
}

inline ArchSpec build_arch(Variant variant, int num_classes, bool include_se = true) {
  const auto p = variant_params(variant);
  return build_scaled_arch(variant, {p.width, p.depth, p.resolution, std::nullopt}, num_classes,
                           include_se);
}

/// B0-shaped network narrowed so the stem has `stem_channels` filters, with
/// one block per stage. Used for desk-scale training.
inline ArchSpec build_reduced_arch(int stem_channels, int resolution, int num_classes,
                                   bool include_se = true) {
  return build_scaled_arch(Variant::B0, {stem_channels / 32.0, 1.0, resolution, 1}, num_classes,
                           include_se);
}

/// Structural checks. With strict_resolution the input resolution must equal
/// the variant's tabulated value.
inline void validate(const ArchSpec& spec, bool strict_resolution = false) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("invalid arch: " + m); };
  if (spec.stages.size() < 2) fail("needs at least a stem and a final stage");
  const auto& first = spec.stages.front();
  const auto& last = spec.stages.back();
  if (first.op != StageOp::Conv || first.kernel != 3) fail("first stage must be Conv k=3");
  if (last.op != StageOp::Conv || last.kernel != 1) fail("last stage must be Conv k=1");
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    const auto& s = spec.stages[i];
    const std::string at = "stage " + std::to_string(i + 1) + ": ";
    if (s.repeats < 1) fail(at + "repeats must be >= 1");
    if (s.stride < 1) fail(at + "stride must be >= 1");
    if (s.out_channels < 1) fail(at + "channels must be >= 1");
    if (s.resolution < 1) fail(at + "resolution must be >= 1");
    if (s.expansion != 1 && s.expansion != 6) fail(at + "expansion must be 1 or 6");
    if (s.op == StageOp::MBConv) {
      if (s.kernel != 3 && s.kernel != 5) fail(at + "MBConv kernel must be 3 or 5");
    } else if (i != 0 && i + 1 != spec.stages.size()) {
      fail(at + "Conv allowed only as first or last stage");
    }
  }
  if (spec.head.num_classes < 2) fail("num_classes must be >= 2");
  if (spec.input_resolution < 1) fail("input resolution must be >= 1");
  if (strict_resolution && spec.input_resolution != input_resolution(spec.variant)) {
    fail("resolution " + std::to_string(spec.input_resolution) + " does not match " +
         to_string(spec.variant));
  }
}

// ------------------------------------------------------------------ blocks

/// One fully resolved block: a stem/final conv or one MBConv repetition.
struct BlockPlan {
  int stage = 0;  // 1-based stage number
  int block = 0;  // 0-based repetition index
  StageOp op = StageOp::MBConv;
  int in_channels = 0;
  int expanded_channels = 0;
  int out_channels = 0;
  int se_channels = 0;  // 0 when squeeze-excitation is off
  int kernel = 3;
  int stride = 1;
  int in_resolution = 0;
  int out_resolution = 0;
  bool residual = false;
};

inline constexpr double kSeRatio = 0.25;

inline std::vector<BlockPlan> plan_blocks(const ArchSpec& spec) {
  std::vector<BlockPlan> plan;
  int channels = 3;
  int res = spec.input_resolution;
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    const auto& s = spec.stages[i];
    for (int j = 0; j < s.repeats; ++j) {
      BlockPlan b;
      b.stage = static_cast<int>(i) + 1;
      b.block = j;
      b.op = s.op;
      b.in_channels = channels;
      b.out_channels = s.out_channels;
      b.kernel = s.kernel;
      b.stride = j == 0 ? s.stride : 1;
      b.in_resolution = res;
      b.out_resolution = (res + b.stride - 1) / b.stride;
      if (s.op == StageOp::MBConv) {
        b.expanded_channels = channels * s.expansion;
        if (spec.include_se) {
          b.se_channels = std::max(1, static_cast<int>(channels * kSeRatio));
        }
        b.residual = b.stride == 1 && channels == s.out_channels;
      } else {
        b.expanded_channels = channels;
      }
      plan.push_back(b);
      channels = s.out_channels;
      res = b.out_resolution;
    }
  }
  return plan;
}

/// Parameter-entry layer name: "stage{i}.block{j}.{role}".
inline std::string layer_name(int stage, int block, std::string_view role) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block) + "." +
         std::string(role);
}

/// First head stage number (the backbone occupies stages 1..N).
inline int head_stage_base(const ArchSpec& spec) { return static_cast<int>(spec.stages.size()) + 1; }

// ------------------------------------------------------------------ text format

inline std::string serialize(const ArchSpec& spec) {
  std::ostringstream os;
  os << "variant=" << to_string(spec.variant) << " res=" << spec.input_resolution
     << " nc=" << spec.head.num_classes << " se=" << (spec.include_se ? 1 : 0) << '\n';
  for (const auto& s : spec.stages) {
    os << "stage op=" << (s.op == StageOp::Conv ? "Conv" : "MBConv") << " e=" << s.expansion
       << " k=" << s.kernel << " c=" << s.out_channels << " n=" << s.repeats << " s=" << s.stride
       << " r=" << s.resolution << '\n';
  }
  return os.str();
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string_view take_field(std::string_view token, std::string_view key, int line_no) {
  if (token.size() <= key.size() || token.substr(0, key.size()) != key ||
      token[key.size()] != '=') {
    throw FormatError("arch line " + std::to_string(line_no) + ": expected '" + std::string(key) +
                      "=', got '" + std::string(token) + "'");
  }
  return token.substr(key.size() + 1);
}

inline int parse_int_field(std::string_view token, std::string_view key, int line_no) {
  const auto v = take_field(token, key, line_no);
  // Canonical decimal only, so that text -> spec -> text is exact.
  bool ok = !v.empty() && (v == "0" || v[0] != '0');
  for (char ch : v) ok = ok && std::isdigit(static_cast<unsigned char>(ch));
  if (!ok || v.size() > 9) {
    throw FormatError("arch line " + std::to_string(line_no) + ": bad integer for " +
                      std::string(key));
  }
  return std::stoi(std::string(v));
}

}  // namespace detail

/// Parses the line-oriented text produced by serialize(). The head's dropout
/// rates are not part of the format and take their defaults.
inline ArchSpec parse_arch(std::string_view text) {
  ArchSpec spec;
  spec.stages.clear();
  int line_no = 0;
  bool header = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) throw FormatError("arch text must end with a newline");
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto tok = detail::split_ws(line);
    if (!header) {
      if (tok.size() != 4) throw FormatError("arch header must have 4 fields");
      try {
        spec.variant = parse_variant(detail::take_field(tok[0], "variant", line_no));
      } catch (const std::invalid_argument& e) {
        throw FormatError(e.what());
      }
      if (detail::take_field(tok[0], "variant", line_no)[0] != 'B') {
        throw FormatError("arch header: variant must be upper case");
      }
      spec.input_resolution = detail::parse_int_field(tok[1], "res", line_no);
      spec.head.num_classes = detail::parse_int_field(tok[2], "nc", line_no);
      const int se = detail::parse_int_field(tok[3], "se", line_no);
      if (se != 0 && se != 1) throw FormatError("arch header: se must be 0 or 1");
      spec.include_se = se == 1;
      header = true;
      continue;
    }
    if (tok.size() != 8 || tok[0] != "stage") {
      throw FormatError("arch line " + std::to_string(line_no) + ": malformed stage line");
    }
    StageSpec s;
    const auto op = detail::take_field(tok[1], "op", line_no);
    if (op == "Conv") {
      s.op = StageOp::Conv;
    } else if (op == "MBConv") {
      s.op = StageOp::MBConv;
    } else {
      throw FormatError("arch line " + std::to_string(line_no) + ": unknown op");
    }
    s.expansion = detail::parse_int_field(tok[2], "e", line_no);
    s.kernel = detail::parse_int_field(tok[3], "k", line_no);
    s.out_channels = detail::parse_int_field(tok[4], "c", line_no);
    s.repeats = detail::parse_int_field(tok[5], "n", line_no);
    s.stride = detail::parse_int_field(tok[6], "s", line_no);
    s.resolution = detail::parse_int_field(tok[7], "r", line_no);
    spec.stages.push_back(s);
  }
  if (!header) throw FormatError("arch text is empty");
  // Reject single-space violations so serialize(parse(t)) == t for every accepted t.
  if (serialize(spec) != text) throw FormatError("arch text is not in canonical form");
  try {
    validate(spec);
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return spec;
}

}  // namespace cxr

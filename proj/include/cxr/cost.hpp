#pragma once

// Parameter, multiply-accumulate and memory accounting for an ArchSpec.
//
// Per-layer conventions (one MAC = one multiply plus one add):
//   conv      params k*k*cin*cout (+cout bias)   MACs out_h*out_w*cout*k*k*cin
//   depthwise params k*k*c                       MACs out_h*out_w*c*k*k
//   dense     params in*out (+out bias)          MACs in*out
//   batchnorm params 4*c (scale, shift, running mean, running variance), no MACs
// Activations, batch norm, pooling, gating and residual adds are tallied as
// elementwise ops (one per output element) and kept out of the MAC total.

#include <cstdint>
#include <string>
#include <vector>

#include "cxr/arch.hpp"

namespace cxr {

/// Which classifier sits on top of the pooled backbone features.
enum class Top {
  ProposedHead,  // BN/dropout, FC512, FC128, FC(num_classes)
  ImageNet,      // single FC(num_classes), the stock classification top
};

struct LayerCost {
  std::string name;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
};

struct CostReport {
  std::uint64_t param_count = 0;
  std::uint64_t mac_count = 0;
  std::uint64_t memory_bytes = 0;
  std::uint64_t elementwise_ops = 0;

  double memory_mib() const { return static_cast<double>(memory_bytes) / (1024.0 * 1024.0); }
  std::uint64_t memory_mib_ceil() const { return (memory_bytes + (1u << 20) - 1) >> 20; }
};

inline std::uint64_t estimate_memory_bytes(std::uint64_t param_count) { return 4 * param_count; }

inline LayerCost conv_cost(std::string name, std::uint64_t kernel, std::uint64_t cin,
                           std::uint64_t cout, std::uint64_t out_h, std::uint64_t out_w,
                           bool bias) {
  return {std::move(name), "conv", kernel * kernel * cin * cout + (bias ? cout : 0),
          out_h * out_w * cout * kernel * kernel * cin, 0};
}

inline LayerCost depthwise_cost(std::string name, std::uint64_t kernel, std::uint64_t channels,
                                std::uint64_t out_h, std::uint64_t out_w) {
  return {std::move(name), "depthwise", kernel * kernel * channels,
          out_h * out_w * channels * kernel * kernel, 0};
}

inline LayerCost dense_cost(std::string name, std::uint64_t in, std::uint64_t out, bool bias) {
  return {std::move(name), "dense", in * out + (bias ? out : 0), in * out, 0};
}

inline LayerCost bn_cost(std::string name, std::uint64_t channels, std::uint64_t elements) {
  return {std::move(name), "batchnorm", 4 * channels, 0, elements};
}

inline LayerCost elementwise_cost(std::string name, std::string kind, std::uint64_t elements) {
  return {std::move(name), std::move(kind), 0, 0, elements};
}

/// Every layer of the network in execution order.
inline std::vector<LayerCost> layer_costs(const ArchSpec& spec, Top top = Top::ProposedHead) {
  std::vector<LayerCost> out;
  int channels = 0;
  std::uint64_t final_hw = 0;
  for (const auto& b : plan_blocks(spec)) {
    const std::uint64_t in_hw = static_cast<std::uint64_t>(b.in_resolution) * b.in_resolution;
    const std::uint64_t hw = static_cast<std::uint64_t>(b.out_resolution) * b.out_resolution;
    auto name = [&](const char* role) { return layer_name(b.stage, b.block, role); };
    if (b.op == StageOp::Conv) {
      out.push_back(conv_cost(name("conv"), b.kernel, b.in_channels, b.out_channels,
                              b.out_resolution, b.out_resolution, false));
      out.push_back(bn_cost(name("bn"), b.out_channels, hw * b.out_channels));
      out.push_back(elementwise_cost(name("swish"), "swish", hw * b.out_channels));
    } else {
      const std::uint64_t ce = b.expanded_channels;
      if (b.expanded_channels != b.in_channels) {
        out.push_back(conv_cost(name("expand"), 1, b.in_channels, ce, b.in_resolution,
                                b.in_resolution, false));
        out.push_back(bn_cost(name("expand_bn"), ce, in_hw * ce));
        out.push_back(elementwise_cost(name("expand_swish"), "swish", in_hw * ce));
      }
      out.push_back(depthwise_cost(name("dw"), b.kernel, ce, b.out_resolution, b.out_resolution));
      out.push_back(bn_cost(name("dw_bn"), ce, hw * ce));
      out.push_back(elementwise_cost(name("dw_swish"), "swish", hw * ce));
      if (b.se_channels > 0) {
        out.push_back(elementwise_cost(name("se_pool"), "pool", hw * ce));
        out.push_back(conv_cost(name("se_reduce"), 1, ce, b.se_channels, 1, 1, true));
        out.push_back(elementwise_cost(name("se_swish"), "swish", b.se_channels));
        out.push_back(conv_cost(name("se_expand"), 1, b.se_channels, ce, 1, 1, true));
        out.push_back(elementwise_cost(name("se_gate"), "sigmoid+scale", ce + hw * ce));
      }
      out.push_back(conv_cost(name("project"), 1, ce, b.out_channels, b.out_resolution,
                              b.out_resolution, false));
      out.push_back(bn_cost(name("project_bn"), b.out_channels, hw * b.out_channels));
      if (b.residual) {
        out.push_back(elementwise_cost(name("residual"), "add", hw * b.out_channels));
      }
    }
    channels = b.out_channels;
    final_hw = hw;
  }
  const int base = head_stage_base(spec);
  out.push_back(elementwise_cost("pool", "pool", final_hw * channels));
  const auto& h = spec.head;
  if (top == Top::ImageNet) {
    out.push_back(dense_cost("top.dense", channels, h.num_classes, true));
  } else {
    out.push_back(bn_cost(layer_name(base, 0, "bn"), channels, channels));
    out.push_back(dense_cost(layer_name(base + 1, 0, "dense"), channels, h.dense11, true));
    out.push_back(bn_cost(layer_name(base + 1, 0, "bn"), h.dense11, h.dense11));
    out.push_back(elementwise_cost(layer_name(base + 1, 0, "swish"), "swish", h.dense11));
    out.push_back(dense_cost(layer_name(base + 2, 0, "dense"), h.dense11, h.dense12, true));
    out.push_back(bn_cost(layer_name(base + 2, 0, "bn"), h.dense12, h.dense12));
    out.push_back(elementwise_cost(layer_name(base + 2, 0, "swish"), "swish", h.dense12));
    out.push_back(dense_cost(layer_name(base + 3, 0, "dense"), h.dense12, h.num_classes, true));
  }
  out.push_back(elementwise_cost("softmax", "softmax", h.num_classes));
  return out;
}

inline CostReport cost_report(const ArchSpec& spec, Top top = Top::ProposedHead) {
  CostReport r;
  for (const auto& l : layer_costs(spec, top)) {
    r.param_count += l.params;
    r.mac_count += l.macs;
    r.elementwise_ops += l.elementwise;
  }
  r.memory_bytes = estimate_memory_bytes(r.param_count);
  return r;
}

inline std::uint64_t count_params(const ArchSpec& spec, Top top = Top::ProposedHead) {
  return cost_report(spec, top).param_count;
}

inline std::uint64_t count_macs(const ArchSpec& spec, Top top = Top::ProposedHead) {
  return cost_report(spec, top).mac_count;
}

inline std::uint64_t estimate_memory(const ArchSpec& spec, Top top = Top::ProposedHead) {
  return estimate_memory_bytes(count_params(spec, top));
}

}  // namespace cxr

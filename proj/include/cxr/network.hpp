#pragma once

// Differentiable network assembled from an ArchSpec.
//
// Parameter entries are named "<layer>.<tensor>" with layer names
// "stage{i}.block{j}.{role}". Roles per block kind:
//   Conv stages   conv, bn
//   MBConv        expand, expand_bn (absent when expansion is 1), dw, dw_bn,
//                 se_reduce, se_expand (when squeeze-excitation is on),
//                 project, project_bn
//   head          stage10.block0.bn, stage11.block0.{dense,bn},
//                 stage12.block0.{dense,bn}, stage13.block0.dense
// Tensors: convolution "weight" (kh, kw, c_in, c_out), depthwise "weight"
// (kh, kw, c, 1), dense "weight" (in, out) and "bias", batch norm "gamma",
// "beta", "mean", "var".

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cxr/arch.hpp"
#include "cxr/autograd.hpp"
#include "cxr/rng.hpp"

namespace cxr {

enum class EntryRole { ConvWeight, DepthwiseWeight, DenseWeight, Bias, BnGamma, BnBeta, BnMean, BnVar };

struct ParamEntrySpec {
  std::string name;
  Shape shape;
  EntryRole role;
};

/// Every parameter entry the spec instantiates, in execution order.
inline std::vector<ParamEntrySpec> param_layout(const ArchSpec& spec) {
  std::vector<ParamEntrySpec> out;
  auto sz = [](int v) { return static_cast<std::size_t>(v); };
  auto bn = [&](const std::string& layer, int c) {
    out.push_back({layer + ".gamma", {sz(c)}, EntryRole::BnGamma});
    out.push_back({layer + ".beta", {sz(c)}, EntryRole::BnBeta});
    out.push_back({layer + ".mean", {sz(c)}, EntryRole::BnMean});
    out.push_back({layer + ".var", {sz(c)}, EntryRole::BnVar});
  };
  auto conv = [&](const std::string& layer, int k, int cin, int cout, bool bias) {
    out.push_back({layer + ".weight", {sz(k), sz(k), sz(cin), sz(cout)}, EntryRole::ConvWeight});
    if (bias) out.push_back({layer + ".bias", {sz(cout)}, EntryRole::Bias});
  };
  auto dense = [&](const std::string& layer, int in, int units) {
    out.push_back({layer + ".weight", {sz(in), sz(units)}, EntryRole::DenseWeight});
    out.push_back({layer + ".bias", {sz(units)}, EntryRole::Bias});
  };
  int channels = 0;
  for (const auto& b : plan_blocks(spec)) {
    auto name = [&](const char* role) { return layer_name(b.stage, b.block, role); };
    if (b.op == StageOp::Conv) {
      conv(name("conv"), b.kernel, b.in_channels, b.out_channels, false);
      bn(name("bn"), b.out_channels);
    } else {
      const int ce = b.expanded_channels;
      if (ce != b.in_channels) {
        conv(name("expand"), 1, b.in_channels, ce, false);
        bn(name("expand_bn"), ce);
      }
      out.push_back({name("dw") + ".weight", {sz(b.kernel), sz(b.kernel), sz(ce), 1},
                     EntryRole::DepthwiseWeight});
      bn(name("dw_bn"), ce);
      if (b.se_channels > 0) {
        conv(name("se_reduce"), 1, ce, b.se_channels, true);
        conv(name("se_expand"), 1, b.se_channels, ce, true);
      }
      conv(name("project"), 1, ce, b.out_channels, false);
      bn(name("project_bn"), b.out_channels);
    }
    channels = b.out_channels;
  }
  const int base = head_stage_base(spec);
  const auto& h = spec.head;
  bn(layer_name(base, 0, "bn"), channels);
  dense(layer_name(base + 1, 0, "dense"), channels, h.dense11);
  bn(layer_name(base + 1, 0, "bn"), h.dense11);
  dense(layer_name(base + 2, 0, "dense"), h.dense11, h.dense12);
  bn(layer_name(base + 2, 0, "bn"), h.dense12);
  dense(layer_name(base + 3, 0, "dense"), h.dense12, h.num_classes);
  return out;
}

/// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)) for a weight entry.
inline double glorot_limit(const ParamEntrySpec& e) {
  double fan_in = 0, fan_out = 0;
  switch (e.role) {
    case EntryRole::ConvWeight: {
      const double rf = static_cast<double>(e.shape[0] * e.shape[1]);
      fan_in = rf * e.shape[2];
      fan_out = rf * e.shape[3];
      break;
    }
    case EntryRole::DepthwiseWeight:
      // each channel owns its own k x k filter
      fan_in = fan_out = static_cast<double>(e.shape[0] * e.shape[1]);
      break;
    case EntryRole::DenseWeight:
      fan_in = static_cast<double>(e.shape[0]);
      fan_out = static_cast<double>(e.shape[1]);
      break;
    default:
      return 0.0;
  }
  return std::sqrt(6.0 / (fan_in + fan_out));
}

/// Fresh value for one entry. Weights are Glorot-uniform from a stream seeded
/// by (seed, entry name), so an entry's value does not depend on its neighbours.
template <typename T>
Tensor<T> init_entry(const ParamEntrySpec& e, std::uint64_t seed) {
  switch (e.role) {
    case EntryRole::BnGamma:
    case EntryRole::BnVar:
      return Tensor<T>(e.shape, T{1});
    case EntryRole::Bias:
    case EntryRole::BnBeta:
    case EntryRole::BnMean:
      return Tensor<T>(e.shape, T{0});
    default:
      break;
  }
  const double limit = glorot_limit(e);
  Rng rng(mix_seed(seed, e.name));
  Tensor<T> t(e.shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

template <typename T>
ParamStore<T> init_params(const ArchSpec& spec, std::uint64_t seed) {
  ParamStore<T> store;
  for (const auto& e : param_layout(spec)) {
    const bool differentiable = e.role != EntryRole::BnMean && e.role != EntryRole::BnVar;
    store.add(e.name, init_entry<T>(e, seed), differentiable);
  }
  return store;
}

template <typename T>
struct ForwardOutput {
  Var features;  // final convolutional feature map (b, h, w, c)
  Var logits;    // (b, num_classes)
};

template <typename T>
class Network {
 public:
  Network(ArchSpec spec, ParamStore<T> params) : spec_(std::move(spec)), params_(std::move(params)) {
    validate(spec_);
    for (const auto& e : param_layout(spec_)) {
      if (!params_.contains(e.name)) throw ShapeError("missing parameter '" + e.name + "'");
      if (params_.at(e.name).value.shape() != e.shape) {
        throw ShapeError("parameter '" + e.name + "' has shape " +
                         shape_str(params_.at(e.name).value.shape()) + ", expected " +
                         shape_str(e.shape));
      }
    }
  }

  Network(ArchSpec spec, std::uint64_t seed)
      : Network(spec, init_params<T>(spec, seed)) {}

  const ArchSpec& spec() const noexcept { return spec_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  int resolution() const noexcept { return spec_.input_resolution; }
  int num_classes() const noexcept { return spec_.head.num_classes; }

  /// Weight of the old value in running-statistics updates.
  double bn_momentum() const noexcept { return bn_momentum_; }
  void set_bn_momentum(double m) {
    if (!(m >= 0.0 && m < 1.0)) throw std::invalid_argument("batch-norm momentum must be in [0, 1)");
    bn_momentum_ = m;
  }

  /// Records the forward pass of a (b, res, res, 3) batch. `seed` drives dropout.
  ForwardOutput<T> forward(Tape<T>& tape, Var images, Mode mode, std::uint64_t seed = 0) {
    const auto& in = tape.value(images);
    const auto r = static_cast<std::size_t>(spec_.input_resolution);
    if (in.rank() != 4 || in.dim(1) != r || in.dim(2) != r || in.dim(3) != 3) {
      throw ShapeError("network expects (b, " + std::to_string(r) + ", " + std::to_string(r) +
                       ", 3) input, got " + shape_str(in.shape()));
    }
    Var x = images;
    for (const auto& b : plan_blocks(spec_)) {
      auto name = [&](const char* role) { return layer_name(b.stage, b.block, role); };
      if (b.op == StageOp::Conv) {
        x = conv(tape, x, name("conv"), static_cast<std::size_t>(b.stride));
        x = ag::swish(tape, bn(tape, x, name("bn"), mode));
        continue;
      }
      Var h = x;
      if (b.expanded_channels != b.in_channels) {
        h = conv(tape, h, name("expand"), 1);
        h = ag::swish(tape, bn(tape, h, name("expand_bn"), mode));
      }
      h = ag::depthwise_conv2d(tape, h, param(tape, name("dw") + ".weight"),
                               static_cast<std::size_t>(b.stride), Padding::Same);
      h = ag::swish(tape, bn(tape, h, name("dw_bn"), mode));
      if (b.se_channels > 0) {
        Var s = ag::global_avg_pool(tape, h);
        s = ag::swish(tape, dense(tape, s, name("se_reduce")));
        s = ag::sigmoid(tape, dense(tape, s, name("se_expand")));
        h = ag::channel_scale(tape, h, s);
      }
      h = conv(tape, h, name("project"), 1);
      h = bn(tape, h, name("project_bn"), mode);
      x = b.residual ? ag::add(tape, h, x) : h;
    }
    ForwardOutput<T> out;
    out.features = x;
    const int base = head_stage_base(spec_);
    const auto& hs = spec_.head;
    Var z = ag::global_avg_pool(tape, x);
    z = bn(tape, z, layer_name(base, 0, "bn"), mode);
    z = ag::dropout(tape, z, hs.dropout10, mode, mix_seed(seed, 10));
    z = dense(tape, z, layer_name(base + 1, 0, "dense"));
    z = ag::swish(tape, bn(tape, z, layer_name(base + 1, 0, "bn"), mode));
    z = ag::dropout(tape, z, hs.dropout11, mode, mix_seed(seed, 11));
    z = dense(tape, z, layer_name(base + 2, 0, "dense"));
    z = ag::swish(tape, bn(tape, z, layer_name(base + 2, 0, "bn"), mode));
    out.logits = dense(tape, z, layer_name(base + 3, 0, "dense"));
    return out;
  }

  /// Inference-mode logits and final feature maps without gradient tracking.
  std::pair<Tensor<T>, Tensor<T>> infer(const Tensor<T>& images) {
    Tape<T> tape(false);
    auto out = forward(tape, tape.constant(images), Mode::Infer);
    return {tape.value(out.logits), tape.value(out.features)};
  }

 private:
  Var param(Tape<T>& tape, const std::string& name) { return tape.param(params_.at(name)); }

  Var conv(Tape<T>& tape, Var x, const std::string& layer, std::size_t stride) {
    return ag::conv2d(tape, x, param(tape, layer + ".weight"), std::nullopt, stride,
                      Padding::Same);
  }

  Var dense(Tape<T>& tape, Var x, const std::string& layer) {
    return ag::dense(tape, x, param(tape, layer + ".weight"), param(tape, layer + ".bias"));
  }

  // Frozen batch-norm layers normalize with their stored statistics even while
  // training, so their running statistics never move.
  Var bn(Tape<T>& tape, Var x, const std::string& layer, Mode mode) {
    auto& gamma = params_.at(layer + ".gamma");
    const Mode effective = gamma.trainable ? mode : Mode::Infer;
    return ag::batch_norm(tape, x, tape.param(gamma), param(tape, layer + ".beta"),
                          &params_.at(layer + ".mean"), &params_.at(layer + ".var"), effective, kBnEpsilon,
                          bn_momentum_);
  }

  ArchSpec spec_;
  ParamStore<T> params_;
  double bn_momentum_ = kBnMomentum;
};

}  // namespace cxr

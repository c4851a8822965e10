#pragma once

// Forward and backward kernels. All kernels are pure functions of their
// arguments except batch_norm(), which updates running statistics in train mode.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cxr/errors.hpp"
#include "cxr/rng.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };
enum class LayerKind { Conv, DepthwiseConv, Dense, BatchNorm };

inline constexpr double kBnEpsilon = 1e-3;
inline constexpr double kBnMomentum = 0.99;

template <typename T>
struct BnStats {
  Tensor<T> mean;
  Tensor<T> variance;
  Tensor<T> scale;
  Tensor<T> shift;
};

/// Weights of one layer. Conv weights are (kh, kw, c_in, c_out), depthwise
/// weights (kh, kw, c, 1), dense weights (features, units).
template <typename T>
struct LayerParams {
  LayerKind kind = LayerKind::Conv;
  Tensor<T> weights;
  std::optional<Tensor<T>> bias;
  std::optional<BnStats<T>> bn;
  bool trainable = true;

  static LayerParams conv(Tensor<T> w, std::optional<Tensor<T>> b = std::nullopt) {
    LayerParams p{LayerKind::Conv, std::move(w), std::move(b), std::nullopt, true};
    p.validate();
    return p;
  }
  static LayerParams depthwise(Tensor<T> w) {
    LayerParams p{LayerKind::DepthwiseConv, std::move(w), std::nullopt, std::nullopt, true};
    p.validate();
    return p;
  }
  static LayerParams dense(Tensor<T> w, std::optional<Tensor<T>> b = std::nullopt) {
    LayerParams p{LayerKind::Dense, std::move(w), std::move(b), std::nullopt, true};
    p.validate();
    return p;
  }
  static LayerParams batch_norm(std::size_t channels) {
    BnStats<T> s{Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1}),
                 Tensor<T>({channels}, T{1}), Tensor<T>({channels}, T{0})};
    return LayerParams{LayerKind::BatchNorm, {}, std::nullopt, std::move(s), true};
  }

  void validate() const {
    auto need_rank = [&](std::size_t r, const char* what) {
      if (weights.rank() != r) {
        throw ShapeError(std::string(what) + " weights must have rank " + std::to_string(r) +
                         ", got " + shape_str(weights.shape()));
      }
    };
    std::size_t out_channels = 0;
    switch (kind) {
      case LayerKind::Conv:
        need_rank(4, "conv");
        out_channels = weights.dim(3);
        break;
      case LayerKind::DepthwiseConv:
        need_rank(4, "depthwise");
        if (weights.dim(3) != 1) throw ShapeError("depthwise weights dimension 3 must be 1");
        break;
      case LayerKind::Dense:
        need_rank(2, "dense");
        out_channels = weights.dim(1);
        break;
      case LayerKind::BatchNorm: {
        if (!bn) throw ShapeError("batch norm layer without statistics");
        const std::size_t c = bn->mean.size();
        if (bn->variance.size() != c || bn->scale.size() != c || bn->shift.size() != c) {
          throw ShapeError("batch norm statistics must all have length " + std::to_string(c));
        }
        break;
      }
    }
    if (bias && bias->size() != out_channels) {
      throw ShapeError("bias length " + std::to_string(bias->size()) + " != output channels " +
                       std::to_string(out_channels));
    }
  }
};

struct SpatialGeometry {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

/// Output extent and leading pad for one spatial axis. "Same" pads so that
/// out == ceil(in / stride), with the odd pixel of padding placed after.
inline SpatialGeometry conv_geometry(std::size_t in, std::size_t kernel, std::size_t stride,
                                     Padding padding) {
  if (stride == 0) throw std::invalid_argument("stride must be >= 1");
  if (padding == Padding::Same) {
    const std::size_t out = (in + stride - 1) / stride;
    const std::size_t needed = (out - 1) * stride + kernel;
    const std::size_t total = needed > in ? needed - in : 0;
    return {out, total / 2};
  }
  if (in < kernel) {
    throw ShapeError("input extent " + std::to_string(in) + " smaller than kernel " +
                     std::to_string(kernel) + " under valid padding");
  }
  return {(in - kernel) / stride + 1, 0};
}

namespace ops {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  require(s.size() == r, std::string(what) + " must have rank " + std::to_string(r) + ", got " +
                             shape_str(s));
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         std::size_t stride, Padding padding) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(w.shape(), 4, "conv2d weights");
  const std::size_t n = x.dim(0), ih = x.dim(1), iw = x.dim(2), ci = x.dim(3);
  const std::size_t kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  detail::require(w.dim(2) == ci, "conv2d input channels " + std::to_string(ci) +
                                      " != weight c_in " + std::to_string(w.dim(2)));
  if (bias) {
    detail::require(bias->size() == co, "conv2d bias length " + std::to_string(bias->size()) +
                                            " != c_out " + std::to_string(co));
  }
  const auto gh = conv_geometry(ih, kh, stride, padding);
  const auto gw = conv_geometry(iw, kw, stride, padding);
  Tensor<T> out({n, gh.out, gw.out, co});
  const T* wp = w.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < gh.out; ++oy) {
      for (std::size_t ox = 0; ox < gw.out; ++ox) {
        T* o = &out.at(b, oy, ox, 0);
        if (bias) std::copy(bias->data().begin(), bias->data().end(), o);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                   static_cast<std::ptrdiff_t>(gh.pad_before);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(ih)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(gw.pad_before);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
            const T* in = &x.at(b, static_cast<std::size_t>(y), static_cast<std::size_t>(xx), 0);
            const T* wk = wp + (ky * kw + kx) * ci * co;
            for (std::size_t c = 0; c < ci; ++c) {
              const T v = in[c];
              const T* wrow = wk + c * co;
              for (std::size_t k = 0; k < co; ++k) o[k] += v * wrow[k];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const LayerParams<T>& params, std::size_t stride,
                 Padding padding) {
  detail::require(params.kind == LayerKind::Conv, "conv2d requires Conv layer params");
  params.validate();
  return conv2d_forward(input, params.weights, params.bias ? &*params.bias : nullptr, stride,
                        padding);
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                             std::size_t stride, Padding padding) {
  const std::size_t n = x.dim(0), ih = x.dim(1), iw = x.dim(2), ci = x.dim(3);
  const std::size_t kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  const auto gh = conv_geometry(ih, kh, stride, padding);
  const auto gw = conv_geometry(iw, kw, stride, padding);
  detail::require(gout.shape() == Shape{n, gh.out, gw.out, co}, "conv2d gradient shape mismatch");
  ConvGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(w), Tensor<T>({co})};
  const T* wp = w.data().data();
  T* dwp = g.weights.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < gh.out; ++oy) {
      for (std::size_t ox = 0; ox < gw.out; ++ox) {
        const T* go = &gout.at(b, oy, ox, 0);
        for (std::size_t k = 0; k < co; ++k) g.bias[k] += go[k];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                   static_cast<std::ptrdiff_t>(gh.pad_before);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(ih)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(gw.pad_before);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
            const auto yy = static_cast<std::size_t>(y);
            const auto xs = static_cast<std::size_t>(xx);
            const T* in = &x.at(b, yy, xs, 0);
            T* din = &g.input.at(b, yy, xs, 0);
            const std::size_t base = (ky * kw + kx) * ci * co;
            for (std::size_t c = 0; c < ci; ++c) {
              const T* wrow = wp + base + c * co;
              T* dwrow = dwp + base + c * co;
              const T v = in[c];
              T acc{0};
              for (std::size_t k = 0; k < co; ++k) {
                dwrow[k] += v * go[k];
                acc += wrow[k] * go[k];
              }
              din[c] += acc;
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------- depthwise

inline void check_depthwise_kernel(std::size_t kh, std::size_t kw) {
  auto ok = [](std::size_t k) { return k == 1 || k == 3 || k == 5; };
  if (!ok(kh) || !ok(kw) || kh != kw) {
    throw ShapeError("depthwise kernel must be square with size 1, 3 or 5, got " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
}

template <typename T>
Tensor<T> depthwise_conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                                   Padding padding) {
  detail::require_rank(x.shape(), 4, "depthwise input");
  detail::require_rank(w.shape(), 4, "depthwise weights");
  const std::size_t n = x.dim(0), ih = x.dim(1), iw = x.dim(2), c = x.dim(3);
  const std::size_t kh = w.dim(0), kw = w.dim(1);
  detail::require(w.dim(2) == c, "depthwise input channels " + std::to_string(c) +
                                     " != weight channels " + std::to_string(w.dim(2)));
  detail::require(w.dim(3) == 1, "depthwise weights dimension 3 must be 1");
  check_depthwise_kernel(kh, kw);
  const auto gh = conv_geometry(ih, kh, stride, padding);
  const auto gw = conv_geometry(iw, kw, stride, padding);
  Tensor<T> out({n, gh.out, gw.out, c});
  const T* wp = w.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < gh.out; ++oy) {
      for (std::size_t ox = 0; ox < gw.out; ++ox) {
        T* o = &out.at(b, oy, ox, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                   static_cast<std::ptrdiff_t>(gh.pad_before);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(ih)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(gw.pad_before);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
            const T* in = &x.at(b, static_cast<std::size_t>(y), static_cast<std::size_t>(xx), 0);
            const T* wk = wp + (ky * kw + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += in[ch] * wk[ch];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const LayerParams<T>& params,
                           std::size_t stride, Padding padding) {
  detail::require(params.kind == LayerKind::DepthwiseConv,
                  "depthwise_conv2d requires DepthwiseConv layer params");
  params.validate();
  return depthwise_conv2d_forward(input, params.weights, stride, padding);
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                                       const Tensor<T>& gout, std::size_t stride,
                                       Padding padding) {
  const std::size_t n = x.dim(0), ih = x.dim(1), iw = x.dim(2), c = x.dim(3);
  const std::size_t kh = w.dim(0), kw = w.dim(1);
  const auto gh = conv_geometry(ih, kh, stride, padding);
  const auto gw = conv_geometry(iw, kw, stride, padding);
  detail::require(gout.shape() == Shape{n, gh.out, gw.out, c}, "depthwise gradient shape mismatch");
  ConvGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(w), Tensor<T>({1})};
  const T* wp = w.data().data();
  T* dwp = g.weights.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < gh.out; ++oy) {
      for (std::size_t ox = 0; ox < gw.out; ++ox) {
        const T* go = &gout.at(b, oy, ox, 0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                   static_cast<std::ptrdiff_t>(gh.pad_before);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(ih)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(gw.pad_before);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
            const auto yy = static_cast<std::size_t>(y);
            const auto xs = static_cast<std::size_t>(xx);
            const T* in = &x.at(b, yy, xs, 0);
            T* din = &g.input.at(b, yy, xs, 0);
            const std::size_t base = (ky * kw + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
              dwp[base + ch] += in[ch] * go[ch];
              din[ch] += wp[base + ch] * go[ch];
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------- batch norm

/// Cached quantities from a normalization pass, reused by the backward kernel.
template <typename T>
struct BnForward {
  Tensor<T> out;
  Tensor<T> normalized;
  std::vector<T> mean;
  std::vector<T> variance;
  std::vector<T> inv_std;
};

/// Normalizes over every axis but the last using the batch's own statistics.
template <typename T>
BnForward<T> batch_norm_train_forward(const Tensor<T>& x, const Tensor<T>& scale,
                                      const Tensor<T>& shift, double epsilon) {
  const std::size_t c = x.shape().back();
  detail::require(scale.size() == c && shift.size() == c,
                  "batch norm channel count " + std::to_string(c) + " != stats length " +
                      std::to_string(scale.size()));
  const std::size_t rows = x.size() / c;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * c;
    for (std::size_t k = 0; k < c; ++k) sum[k] += row[k];
  }
  std::vector<double> mean(c);
  for (std::size_t k = 0; k < c; ++k) mean[k] = sum[k] / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * c;
    for (std::size_t k = 0; k < c; ++k) {
      const double d = row[k] - mean[k];
      sq[k] += d * d;
    }
  }
  BnForward<T> f{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(x), std::vector<T>(c),
                 std::vector<T>(c), std::vector<T>(c)};
  for (std::size_t k = 0; k < c; ++k) {
    const double var = sq[k] / static_cast<double>(rows);
    f.mean[k] = static_cast<T>(mean[k]);
    f.variance[k] = static_cast<T>(var);
    f.inv_std[k] = static_cast<T>(1.0 / std::sqrt(var + epsilon));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * c;
    T* nrm = f.normalized.data().data() + r * c;
    T* o = f.out.data().data() + r * c;
    for (std::size_t k = 0; k < c; ++k) {
      nrm[k] = static_cast<T>((row[k] - mean[k]) * f.inv_std[k]);
      o[k] = scale[k] * nrm[k] + shift[k];
    }
  }
  return f;
}

template <typename T>
BnForward<T> batch_norm_infer_forward(const Tensor<T>& x, const Tensor<T>& mean,
                                      const Tensor<T>& variance, const Tensor<T>& scale,
                                      const Tensor<T>& shift, double epsilon) {
  const std::size_t c = x.shape().back();
  detail::require(mean.size() == c && variance.size() == c && scale.size() == c &&
                      shift.size() == c,
                  "batch norm channel count " + std::to_string(c) + " != stats length " +
                      std::to_string(mean.size()));
  BnForward<T> f{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(x),
                 std::vector<T>(mean.data().begin(), mean.data().end()),
                 std::vector<T>(variance.data().begin(), variance.data().end()),
                 std::vector<T>(c)};
  for (std::size_t k = 0; k < c; ++k) {
    f.inv_std[k] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(variance[k]) + epsilon));
  }
  const std::size_t rows = x.size() / c;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * c;
    T* nrm = f.normalized.data().data() + r * c;
    T* o = f.out.data().data() + r * c;
    for (std::size_t k = 0; k < c; ++k) {
      nrm[k] = (row[k] - mean[k]) * f.inv_std[k];
      o[k] = scale[k] * nrm[k] + shift[k];
    }
  }
  return f;
}

template <typename T>
struct BnGrads {
  Tensor<T> input;
  Tensor<T> scale;
  Tensor<T> shift;
};

/// Backward pass. With batch statistics the mean and variance depend on the
/// input, which adds the two centering terms; with stored statistics they do not.
template <typename T>
BnGrads<T> batch_norm_backward(const Tensor<T>& gout, const BnForward<T>& fwd,
                               const Tensor<T>& scale, Mode mode) {
  const std::size_t c = gout.shape().back();
  const std::size_t rows = gout.size() / c;
  BnGrads<T> g{Tensor<T>::zeros_like(gout), Tensor<T>({c}), Tensor<T>({c})};
  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* go = gout.data().data() + r * c;
    const T* nrm = fwd.normalized.data().data() + r * c;
    for (std::size_t k = 0; k < c; ++k) {
      sum_g[k] += go[k];
      sum_gx[k] += static_cast<double>(go[k]) * nrm[k];
    }
  }
  for (std::size_t k = 0; k < c; ++k) {
    g.shift[k] = static_cast<T>(sum_g[k]);
    g.scale[k] = static_cast<T>(sum_gx[k]);
  }
  const double m = static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* go = gout.data().data() + r * c;
    const T* nrm = fwd.normalized.data().data() + r * c;
    T* dx = g.input.data().data() + r * c;
    for (std::size_t k = 0; k < c; ++k) {
      const double a = static_cast<double>(scale[k]) * fwd.inv_std[k];
      if (mode == Mode::Train) {
        dx[k] = static_cast<T>(a * (go[k] - sum_g[k] / m - nrm[k] * sum_gx[k] / m));
      } else {
        dx[k] = static_cast<T>(a * go[k]);
      }
    }
  }
  return g;
}

/// Blends batch statistics into the running statistics:
/// running = momentum * running + (1 - momentum) * batch.
template <typename T>
void update_running_stats(BnStats<T>& stats, const BnForward<T>& fwd, double momentum) {
  for (std::size_t k = 0; k < stats.mean.size(); ++k) {
    stats.mean[k] = static_cast<T>(momentum * stats.mean[k] + (1.0 - momentum) * fwd.mean[k]);
    stats.variance[k] =
        static_cast<T>(momentum * stats.variance[k] + (1.0 - momentum) * fwd.variance[k]);
  }
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, LayerParams<T>& params, Mode mode,
                     double epsilon = kBnEpsilon, double momentum = kBnMomentum) {
  detail::require(params.kind == LayerKind::BatchNorm, "batch_norm requires BatchNorm params");
  params.validate();
  auto& s = *params.bn;
  if (mode == Mode::Infer) {
    return batch_norm_infer_forward(input, s.mean, s.variance, s.scale, s.shift, epsilon).out;
  }
  auto fwd = batch_norm_train_forward(input, s.scale, s.shift, epsilon);
  update_running_stats(s, fwd, momentum);
  return std::move(fwd.out);
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = detail::sigmoid_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gout) {
  Tensor<T> g = Tensor<T>::zeros_like(y);
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = gout[i] * y[i] * (T{1} - y[i]);
  return g;
}

/// x * sigmoid(x).
template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * detail::sigmoid_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> swish_backward(const Tensor<T>& x, const Tensor<T>& gout) {
  Tensor<T> g = Tensor<T>::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = detail::sigmoid_scalar(x[i]);
    g[i] = gout[i] * (s + x[i] * s * (T{1} - s));
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& gout) {
  Tensor<T> g = Tensor<T>::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T{0} ? gout[i] : T{0};
  return g;
}

// ---------------------------------------------------------------- dense

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  detail::require_rank(x.shape(), 2, "dense input");
  detail::require_rank(w.shape(), 2, "dense weights");
  const std::size_t n = x.dim(0), in = x.dim(1), units = w.dim(1);
  detail::require(w.dim(0) == in, "dense input features " + std::to_string(in) +
                                      " != weight features " + std::to_string(w.dim(0)));
  if (bias) {
    detail::require(bias->size() == units, "dense bias length " + std::to_string(bias->size()) +
                                               " != units " + std::to_string(units));
  }
  Tensor<T> out({n, units});
  for (std::size_t b = 0; b < n; ++b) {
    T* o = out.data().data() + b * units;
    if (bias) std::copy(bias->data().begin(), bias->data().end(), o);
    const T* xi = x.data().data() + b * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T v = xi[i];
      const T* wr = w.data().data() + i * units;
      for (std::size_t u = 0; u < units; ++u) o[u] += v * wr[u];
    }
  }
  return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const LayerParams<T>& params) {
  detail::require(params.kind == LayerKind::Dense, "dense requires Dense layer params");
  params.validate();
  return dense_forward(input, params.weights, params.bias ? &*params.bias : nullptr);
}

template <typename T>
ConvGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout) {
  const std::size_t n = x.dim(0), in = x.dim(1), units = w.dim(1);
  detail::require(gout.shape() == Shape{n, units}, "dense gradient shape mismatch");
  ConvGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(w), Tensor<T>({units})};
  for (std::size_t b = 0; b < n; ++b) {
    const T* go = gout.data().data() + b * units;
    const T* xi = x.data().data() + b * in;
    T* dx = g.input.data().data() + b * in;
    for (std::size_t u = 0; u < units; ++u) g.bias[u] += go[u];
    for (std::size_t i = 0; i < in; ++i) {
      const T* wr = w.data().data() + i * units;
      T* dwr = g.weights.data().data() + i * units;
      T acc{0};
      for (std::size_t u = 0; u < units; ++u) {
        dwr[u] += xi[i] * go[u];
        acc += wr[u] * go[u];
      }
      dx[i] = acc;
    }
  }
  return g;
}

// ---------------------------------------------------------------- softmax

/// Row-wise softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t r = 0; r < x.size() / c; ++r) {
    const T* xi = x.data().data() + r * c;
    T* yi = y.data().data() + r * c;
    const T mx = *std::max_element(xi, xi + c);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(static_cast<double>(xi[k] - mx));
    for (std::size_t k = 0; k < c; ++k) {
      yi[k] = static_cast<T>(std::exp(static_cast<double>(xi[k] - mx)) / sum);
    }
  }
  return y;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean categorical cross-entropy of row-wise probabilities against class indices.
template <typename T>
double cross_entropy(const Tensor<T>& probs, std::span<const std::size_t> labels) {
  const std::size_t c = probs.shape().back();
  const std::size_t rows = probs.size() / c;
  detail::require(labels.size() == rows, "label count " + std::to_string(labels.size()) +
                                             " != batch " + std::to_string(rows));
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= c) throw std::out_of_range("label index out of range");
    total -= std::log(std::max(static_cast<double>(probs[r * c + labels[r]]), kProbabilityFloor));
  }
  return total / static_cast<double>(rows);
}

/// d(mean cross-entropy)/d(logits) = (softmax - one_hot) / batch.
template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probs,
                                         std::span<const std::size_t> labels) {
  const std::size_t c = probs.shape().back();
  const std::size_t rows = probs.size() / c;
  Tensor<T> g = probs;
  for (std::size_t r = 0; r < rows; ++r) g[r * c + labels[r]] -= T{1};
  for (auto& v : g.data()) v /= static_cast<T>(rows);
  return g;
}

// ---------------------------------------------------------------- dropout

template <typename T>
struct DropoutResult {
  Tensor<T> out;
  Tensor<T> mask;  // 0 or 1/(1-rate); empty in infer mode
};

/// Inverted dropout: survivors are rescaled at train time so inference is identity.
template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::Infer || rate == 0.0) return {x, {}};
  Rng rng(seed);
  Tensor<T> mask = Tensor<T>::zeros_like(x);
  Tensor<T> out = Tensor<T>::zeros_like(x);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.uniform() < rate ? T{0} : keep_scale;
    out[i] = x[i] * mask[i];
  }
  return {std::move(out), std::move(mask)};
}

// ---------------------------------------------------------------- pooling, add, scale

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> acc(c, 0.0);
    const T* xb = x.data().data() + b * hw * c;
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t k = 0; k < c; ++k) acc[k] += xb[p * c + k];
    }
    for (std::size_t k = 0; k < c; ++k) out[b * c + k] = static_cast<T>(acc[k] / hw);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& gout) {
  const std::size_t n = input_shape[0], hw = input_shape[1] * input_shape[2], c = input_shape[3];
  Tensor<T> g(input_shape);
  const T inv = T{1} / static_cast<T>(hw);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t k = 0; k < c; ++k) g[(b * hw + p) * c + k] = gout[b * c + k] * inv;
    }
  }
  return g;
}

template <typename T>
Tensor<T> residual_add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "residual_add shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
  return out;
}

/// Multiplies every spatial position of x (b,h,w,c) by gate (b,c).
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& gate) {
  detail::require_rank(x.shape(), 4, "channel_scale input");
  detail::require(gate.shape() == Shape{x.dim(0), x.dim(3)},
                  "channel_scale gate " + shape_str(gate.shape()) + " does not match input " +
                      shape_str(x.shape()));
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> out = x;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t k = 0; k < c; ++k) out[(b * hw + p) * c + k] *= gate[b * c + k];
    }
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_scale_backward(const Tensor<T>& x, const Tensor<T>& gate,
                                                       const Tensor<T>& gout) {
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> dx = Tensor<T>::zeros_like(x);
  Tensor<T> dgate = Tensor<T>::zeros_like(gate);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = (b * hw + p) * c + k;
        dx[i] = gout[i] * gate[b * c + k];
        dgate[b * c + k] += gout[i] * x[i];
      }
    }
  }
  return {std::move(dx), std::move(dgate)};
}

}  // namespace ops
}  // namespace cxr

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cxr/ops.hpp"
#include "test_util.hpp"

using namespace cxr;
using testutil::random_tensor;

namespace {

template <typename T>
const Tensor<T>* no_bias = nullptr;

// Nested-loop convolution written without the library's geometry helpers.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride,
                          bool same) {
  const long ih = x.dim(1), iw = x.dim(2), ci = x.dim(3);
  const long kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  long oh, ow, pt = 0, pl = 0;
  if (same) {
    oh = (ih + stride - 1) / stride;
    ow = (iw + stride - 1) / stride;
    pt = std::max(0L, (oh - 1) * long(stride) + kh - ih) / 2;
    pl = std::max(0L, (ow - 1) * long(stride) + kw - iw) / 2;
  } else {
    oh = (ih - kh) / stride + 1;
    ow = (iw - kw) / stride + 1;
  }
  Tensor<double> out({x.dim(0), std::size_t(oh), std::size_t(ow), std::size_t(co)});
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (long y = 0; y < oh; ++y)
      for (long xx = 0; xx < ow; ++xx)
        for (long o = 0; o < co; ++o) {
          double s = 0;
          for (long dy = 0; dy < kh; ++dy)
            for (long dx = 0; dx < kw; ++dx) {
              const long sy = y * stride + dy - pt, sx = xx * stride + dx - pl;
              if (sy < 0 || sx < 0 || sy >= ih || sx >= iw) continue;
              for (long c = 0; c < ci; ++c) s += x.at(b, sy, sx, c) * w.at(dy, dx, c, o);
            }
          out.at(b, y, xx, o) = s;
        }
  return out;
}

void expect_near(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(Tensor, RejectsZeroDimsAndBadLength) {
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(shape_size(t.shape()), t.size());
}

TEST(Conv2d, IdentityOneByOne) {
  auto x = random_tensor<double>({1, 5, 5, 3}, 1);
  Tensor<double> w({1, 1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w.at(0, 0, c, c) = 1.0;
  auto y = ops::conv2d(x, LayerParams<double>::conv(w), 1, Padding::Same);
  EXPECT_EQ(y, x);
}

TEST(Conv2d, AllOnesValidIsWindowSum) {
  Tensor<double> x({1, 4, 4, 1});
  std::iota(x.data().begin(), x.data().end(), 1.0);
  Tensor<double> w({3, 3, 1, 1}, 1.0);
  auto y = ops::conv2d(x, LayerParams<double>::conv(w), 1, Padding::Valid);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 1}));
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double s = 0;
      for (std::size_t dy = 0; dy < 3; ++dy)
        for (std::size_t dx = 0; dx < 3; ++dx) s += x.at(0, oy + dy, ox + dx, 0);
      EXPECT_DOUBLE_EQ(y.at(0, oy, ox, 0), s);
    }
}

TEST(Conv2d, StemShape) {
  Tensor<float> x({1, 224, 224, 3}, 0.5f);
  Tensor<float> w({3, 3, 3, 32}, 0.01f);
  auto y = ops::conv2d(x, LayerParams<float>::conv(w), 2, Padding::Same);
  EXPECT_EQ(y.shape(), (Shape{1, 112, 112, 32}));
}

TEST(Conv2d, MatchesNaiveOnRandomShapes) {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t h = 1 + rng.below(9), w = 1 + rng.below(9), ci = 1 + rng.below(4),
                      co = 1 + rng.below(4), k = 1 + 2 * rng.below(3), s = 1 + rng.below(2);
    const bool same = rng.bernoulli(0.5) || h < k || w < k;
    auto x = random_tensor<double>({2, h, w, ci}, trial);
    auto wt = random_tensor<double>({k, k, ci, co}, trial + 1000);
    auto y = ops::conv2d_forward(x, wt, no_bias<double>, s, same ? Padding::Same : Padding::Valid);
    expect_near(y, naive_conv(x, wt, s, same), 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  Tensor<float> x({1, 4, 4, 3});
  Tensor<float> w({3, 3, 2, 4});
  try {
    ops::conv2d(x, LayerParams<float>::conv(w), 1, Padding::Same);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(DepthwiseConv, OnesOneByOneIsIdentity) {
  auto x = random_tensor<double>({2, 4, 4, 3}, 5);
  auto y = ops::depthwise_conv2d(x, LayerParams<double>::depthwise(Tensor<double>({1, 1, 3, 1}, 1.0)), 1,
                                 Padding::Same);
  EXPECT_EQ(y, x);
}

TEST(DepthwiseConv, EqualsPerChannelConv) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 3 + rng.below(6), c = 1 + rng.below(4), k = rng.bernoulli(0.5) ? 3 : 5,
                      s = 1 + rng.below(2);
    const bool same = rng.bernoulli(0.5) || h < k;
    const auto pad = same ? Padding::Same : Padding::Valid;
    auto x = random_tensor<double>({1, h, h, c}, 100 + trial);
    auto w = random_tensor<double>({k, k, c, 1}, 200 + trial);
    auto y = ops::depthwise_conv2d_forward(x, w, s, pad);
    for (std::size_t ch = 0; ch < c; ++ch) {
      Tensor<double> xc({1, h, h, 1}), wc({k, k, 1, 1});
      for (std::size_t i = 0; i < h * h; ++i) xc[i] = x[i * c + ch];
      for (std::size_t i = 0; i < k * k; ++i) wc[i] = w[i * c + ch];
      auto yc = naive_conv(xc, wc, s, same);
      ASSERT_EQ(yc.dim(1), y.dim(1));
      for (std::size_t i = 0; i < yc.size(); ++i) EXPECT_NEAR(y[i * c + ch], yc[i], 1e-12);
    }
  }
}

TEST(DepthwiseConv, ThreeByThreeValidIsTwoScalarSums) {
  auto x = random_tensor<double>({1, 3, 3, 2}, 11);
  auto w = random_tensor<double>({3, 3, 2, 1}, 12);
  auto y = ops::depthwise_conv2d_forward(x, w, 1, Padding::Valid);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 9; ++i) s += x[i * 2 + c] * w[i * 2 + c];
    EXPECT_NEAR(y[c], s, 1e-12);
  }
}

TEST(DepthwiseConv, RejectsUnsupportedKernel) {
  Tensor<float> x({1, 8, 8, 2});
  EXPECT_THROW(ops::depthwise_conv2d_forward(x, Tensor<float>({7, 7, 2, 1}), 1, Padding::Same), ShapeError);
  EXPECT_THROW(ops::depthwise_conv2d_forward(x, Tensor<float>({3, 3, 3, 1}), 1, Padding::Same), ShapeError);
}

TEST(BatchNorm, FormulaOracle) {
  Tensor<double> x({4, 1}, std::vector<double>{1, 2, 3, 4});
  auto p = LayerParams<double>::batch_norm(1);
  auto y = ops::batch_norm(x, p, Mode::Train);
  const double mu = 2.5, var = 1.25;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], (x[i] - mu) / std::sqrt(var + kBnEpsilon), 1e-12);
  double m = 0, v = 0;
  for (auto e : y.data()) m += e / 4;
  for (auto e : y.data()) v += (e - m) * (e - m) / 4;
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(v, var / (var + kBnEpsilon), 1e-12);
  // running statistics moved towards the batch statistics
  EXPECT_NEAR(p.bn->mean[0], 0.01 * mu, 1e-12);
  EXPECT_NEAR(p.bn->variance[0], 0.99 + 0.01 * var, 1e-12);
}

TEST(BatchNorm, ConstantChannelBecomesZeros) {
  Tensor<float> x({2, 3, 3, 2}, 7.0f);
  auto p = LayerParams<float>::batch_norm(2);
  auto y = ops::batch_norm(x, p, Mode::Train);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, InferAffineCase) {
  auto p = LayerParams<double>::batch_norm(1);
  p.bn->scale[0] = 2.0;
  p.bn->shift[0] = 3.0;
  Tensor<double> x({1, 1}, 1.0);
  EXPECT_NEAR(ops::batch_norm(x, p, Mode::Infer)[0], 2.0 / std::sqrt(1.0 + kBnEpsilon) + 3.0, 1e-12);
  EXPECT_NEAR(ops::batch_norm(x, p, Mode::Infer, 0.0)[0], 5.0, 1e-12);
}

TEST(BatchNorm, StatsLengthMismatch) {
  auto p = LayerParams<float>::batch_norm(3);
  EXPECT_THROW(ops::batch_norm(Tensor<float>({2, 4}), p, Mode::Train), ShapeError);
}

TEST(Activations, Values) {
  Tensor<double> x({5}, std::vector<double>{0, 1, -1, -2, 3});
  auto s = ops::swish(x);
  EXPECT_EQ(s[0], 0.0);
  EXPECT_NEAR(s[1], 0.731059, 1e-6);
  EXPECT_NEAR(s[2], -0.268941, 1e-6);
  EXPECT_NE(s[2], 0.0);
  auto r = ops::relu(x);
  EXPECT_EQ(r[3], 0.0);
  EXPECT_EQ(r[4], 3.0);
  EXPECT_EQ(ops::sigmoid(x)[0], 0.5);
  // d swish / dx at 0 is 0.5
  EXPECT_NEAR(ops::swish_backward(x, Tensor<double>({5}, 1.0))[0], 0.5, 1e-15);
}

TEST(Activations, ExtremesStayFinite) {
  Tensor<float> x({2}, std::vector<float>{-1000.0f, 1000.0f});
  auto s = ops::swish(x);
  EXPECT_TRUE(std::isfinite(s[0]) && std::isfinite(s[1]));
  EXPECT_EQ(s[1], 1000.0f);
}

TEST(Dense, HandArithmetic) {
  Tensor<double> x({1, 2}, std::vector<double>{1, 2});
  Tensor<double> w({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> b({2}, 1.0);
  auto y = ops::dense(x, LayerParams<double>::dense(w, b));
  EXPECT_EQ(y.vec(), (std::vector<double>{2, 3}));
  EXPECT_EQ(ops::dense(x, LayerParams<double>::dense(w)), x);
  EXPECT_THROW(ops::dense(Tensor<double>({1, 3}), LayerParams<double>::dense(w)), ShapeError);
}

TEST(Dense, SumLossGradientIsBroadcastInput) {
  auto x = random_tensor<double>({3, 4}, 4);
  auto w = random_tensor<double>({4, 5}, 5);
  auto g = ops::dense_backward(x, w, Tensor<double>({3, 5}, 1.0));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double col = 0;
      for (std::size_t b = 0; b < 3; ++b) col += x[b * 4 + i];
      EXPECT_NEAR(g.weights[i * 5 + j], col, 1e-12);
    }
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(g.bias[j], 3.0);
}

TEST(Softmax, Properties) {
  Tensor<double> u({1, 3}, 0.0);
  const auto pu = ops::softmax(u);
  for (auto p : pu.data()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  Tensor<float> big({1, 3}, std::vector<float>{1000, 0, 0});
  auto pb = ops::softmax(big);
  EXPECT_NEAR(pb[0], 1.0f, 1e-6);
  EXPECT_TRUE(std::isfinite(pb[1]));
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    auto x = random_tensor<float>({4, 5}, 300 + t, -20, 20);
    auto shifted = x;
    const float c = static_cast<float>(rng.uniform(-50, 50));
    for (auto& v : shifted.data()) v += c;
    auto p = ops::softmax(x), q = ops::softmax(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        const float v = p[r * 5 + k];
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
        EXPECT_NEAR(v, q[r * 5 + k], 1e-6);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(CrossEntropy, ValuesAndGradient) {
  const std::vector<std::size_t> label{0};
  Tensor<double> perfect({1, 3}, std::vector<double>{1, 0, 0});
  EXPECT_EQ(ops::cross_entropy(perfect, label), 0.0);
  Tensor<double> uniform({1, 3}, 1.0 / 3.0);
  EXPECT_NEAR(ops::cross_entropy(uniform, label), std::log(3.0), 1e-12);
  EXPECT_NEAR(ops::cross_entropy(uniform, label), 1.0986, 1e-4);
  // zero probability is clamped, never infinite
  Tensor<double> wrong({1, 3}, std::vector<double>{0, 1, 0});
  EXPECT_NEAR(ops::cross_entropy(wrong, label), -std::log(ops::kProbabilityFloor), 1e-9);
  auto p = ops::softmax(random_tensor<double>({2, 3}, 8));
  const std::vector<std::size_t> labels{2, 1};
  auto g = ops::softmax_cross_entropy_backward(p, labels);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_NEAR(g[r * 3 + k], (p[r * 3 + k] - (k == labels[r] ? 1.0 : 0.0)) / 2.0, 1e-15);
}

TEST(Dropout, Semantics) {
  auto x = random_tensor<float>({100, 100}, 9);
  EXPECT_EQ(ops::dropout(x, 0.0, Mode::Train, 1).out, x);
  EXPECT_EQ(ops::dropout(x, 0.7, Mode::Infer, 1).out, x);
  EXPECT_THROW(ops::dropout(x, 1.0, Mode::Train, 1), std::invalid_argument);
  Tensor<float> ones({10000}, 1.0f);
  auto r = ops::dropout(ones, 0.5, Mode::Train, 1234);
  std::size_t zeros = 0;
  for (auto v : r.out.data()) {
    if (v == 0.0f) ++zeros;
    else EXPECT_EQ(v, 2.0f);
  }
  EXPECT_GE(zeros, 4500u);
  EXPECT_LE(zeros, 5500u);
  EXPECT_EQ(ops::dropout(ones, 0.5, Mode::Train, 1234).out, r.out);
}

TEST(Pooling, AndResidual) {
  Tensor<double> x({1, 2, 2, 1}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(ops::global_avg_pool(x)[0], 2.5);
  Tensor<double> c({2, 3, 3, 4}, 0.75);
  const auto pooled = ops::global_avg_pool(c);
  EXPECT_EQ(pooled.shape(), (Shape{2, 4}));
  for (auto v : pooled.data()) EXPECT_EQ(v, 0.75);
  auto r = random_tensor<double>({1, 3, 3, 2}, 10);
  EXPECT_EQ(ops::residual_add(r, Tensor<double>::zeros_like(r)), r);
  EXPECT_THROW(ops::residual_add(r, Tensor<double>({1, 3, 3, 3})), ShapeError);
}

TEST(ShapeAlgebra, OutputShapeDependsOnlyOnShapes) {
  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 1 + rng.below(20), k = 1 + 2 * rng.below(2), s = 1 + rng.below(3);
    auto a = ops::conv2d_forward(random_tensor<float>({1, h, h, 2}, t), random_tensor<float>({k, k, 2, 3}, t + 1),
                                 no_bias<float>, s, Padding::Same);
    auto b = ops::conv2d_forward(random_tensor<float>({1, h, h, 2}, t + 7), random_tensor<float>({k, k, 2, 3}, t + 8),
                                 no_bias<float>, s, Padding::Same);
    EXPECT_EQ(a.shape(), b.shape());
    EXPECT_EQ(a.dim(1), (h + s - 1) / s);
  }
}

TEST(Determinism, KernelsAreBitIdentical) {
  auto x = random_tensor<float>({2, 6, 6, 3}, 21);
  auto w = random_tensor<float>({3, 3, 3, 4}, 22);
  EXPECT_EQ(ops::conv2d_forward(x, w, no_bias<float>, 2, Padding::Same),
            ops::conv2d_forward(x, w, no_bias<float>, 2, Padding::Same));
  EXPECT_EQ(ops::dropout(x, 0.3, Mode::Train, 5).out, ops::dropout(x, 0.3, Mode::Train, 5).out);
}

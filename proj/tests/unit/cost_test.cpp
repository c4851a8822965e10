#include <gtest/gtest.h>

#include "../oracle/footprint.hpp"
#include "cxr/cost.hpp"

using namespace cxr;

TEST(LayerFormulas, Dense) {
  auto d = dense_cost("d", 2, 3, true);
  EXPECT_EQ(d.params, 9u);
  EXPECT_EQ(d.macs, 6u);
  EXPECT_EQ(dense_cost("d", 2, 3, false).params, 6u);
}

TEST(LayerFormulas, ConvMacsAgainstLoopCount) {
  // 3x3 valid conv, one channel in and out, 4x4 input -> 2x2 output
  std::uint64_t products = 0;
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) ++products;
  EXPECT_EQ(conv_cost("c", 3, 1, 1, 2, 2, false).macs, products);
  EXPECT_EQ(products, 36u);
  auto dw = depthwise_cost("dw", 5, 8, 4, 4);
  EXPECT_EQ(dw.params, 200u);
  EXPECT_EQ(dw.macs, 4u * 4 * 8 * 25);
  auto bn = bn_cost("bn", 16, 160);
  EXPECT_EQ(bn.params, 64u);
  EXPECT_EQ(bn.macs, 0u);
  EXPECT_EQ(bn.elementwise, 160u);
}

TEST(Memory, FourBytesPerParameter) {
  EXPECT_EQ(estimate_memory_bytes(0), 0u);
  for (auto v : kAllVariants) {
    for (Top top : {Top::ImageNet, Top::ProposedHead}) {
      auto spec = build_arch(v, top == Top::ImageNet ? 1000 : 3);
      auto r = cost_report(spec, top);
      EXPECT_EQ(r.memory_bytes, 4 * r.param_count);
      EXPECT_EQ(r.memory_bytes % 4, 0u);
      EXPECT_EQ(estimate_memory(spec, top), r.memory_bytes);
    }
  }
  CostReport r;
  r.memory_bytes = (1u << 20) + 4;
  EXPECT_EQ(r.memory_mib_ceil(), 2u);
}

TEST(Footprint, MatchesIndependentFormulaForEveryVariant) {
  for (auto v : kAllVariants) {
    for (bool se : {true, false}) {
      auto stock = build_arch(v, 1000, se);
      auto f = oracle::footprint(stock, true);
      EXPECT_EQ(count_params(stock, Top::ImageNet), f.params) << to_string(v) << " se " << se;
      EXPECT_EQ(count_macs(stock, Top::ImageNet), f.macs) << to_string(v) << " se " << se;
      auto ours = build_arch(v, 3, se);
      auto g = oracle::footprint(ours, false);
      EXPECT_EQ(count_params(ours), g.params) << to_string(v) << " se " << se;
      EXPECT_EQ(count_macs(ours), g.macs) << to_string(v) << " se " << se;
    }
  }
}

TEST(Footprint, ReferenceBaseModelCounts) {
  const std::uint64_t reference[] = {5330564, 7856232, 9177562, 12320528, 19466816, 30562520};
  const double reference_mb[] = {21, 31, 36, 48, 76, 118};
  for (auto v : kAllVariants) {
    const int i = static_cast<int>(v);
    auto r = cost_report(build_arch(v, 1000), Top::ImageNet);
    const double rel = std::abs(static_cast<double>(r.param_count) - reference[i]) / reference[i];
    EXPECT_LE(rel, 0.002) << to_string(v) << " " << r.param_count;
    EXPECT_LE(std::abs(r.memory_mib() - reference_mb[i]), 3.0) << to_string(v);
  }
  EXPECT_NEAR(cost_report(build_arch(Variant::B0, 1000), Top::ImageNet).memory_mib(), 20.3, 0.05);
  EXPECT_NEAR(cost_report(build_arch(Variant::B4, 1000), Top::ImageNet).memory_mib(), 74.3, 0.05);
}

TEST(Footprint, MonotoneAcrossVariants) {
  for (std::size_t i = 1; i < kAllVariants.size(); ++i) {
    auto a = cost_report(build_arch(kAllVariants[i - 1], 3));
    auto b = cost_report(build_arch(kAllVariants[i], 3));
    EXPECT_LE(a.param_count, b.param_count);
    EXPECT_LE(a.mac_count, b.mac_count);
  }
  EXPECT_LT(count_macs(build_arch(Variant::B0, 3)), count_macs(build_arch(Variant::B3, 3)));
}

TEST(Footprint, LayerListSumsToReport) {
  auto spec = build_arch(Variant::B1, 3);
  std::uint64_t p = 0, m = 0, e = 0;
  for (const auto& l : layer_costs(spec)) {
    p += l.params;
    m += l.macs;
    e += l.elementwise;
  }
  auto r = cost_report(spec);
  EXPECT_EQ(p, r.param_count);
  EXPECT_EQ(m, r.mac_count);
  EXPECT_EQ(e, r.elementwise_ops);
  EXPECT_GT(e, 0u);
}

TEST(Footprint, ReducedArchIsSmall) {
  auto spec = build_reduced_arch(8, 64, 3);
  EXPECT_EQ(spec.stages[0].out_channels, 8);
  for (std::size_t i = 1; i + 1 < spec.stages.size(); ++i) EXPECT_EQ(spec.stages[i].repeats, 1);
  EXPECT_EQ(count_params(spec), oracle::footprint(spec, false).params);
  EXPECT_LT(count_params(spec), 500000u);
}

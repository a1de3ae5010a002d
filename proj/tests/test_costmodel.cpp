#include <gtest/gtest.h>

#include "qe/costmodel.hpp"
#include "qe/error.hpp"

using namespace qe;

TEST(Flops, Examples) {
  const LayerShape tiny{1, 1, 1, 0, 0};
  EXPECT_EQ(flops(tiny, CostVariant::origin), 1u);
  EXPECT_EQ(flops(tiny, CostVariant::qe), 1u);
  const LayerShape big{128, 3584, 3584, 64, 8};
  EXPECT_EQ(flops(big, CostVariant::origin), 1644167168u);
  EXPECT_EQ(flops(big, CostVariant::qe), 1644167168u + 62390272u);
}

TEST(Flops, SquareClosedForm) {
  for (std::uint64_t d : {16u, 100u, 4096u}) {
    const LayerShape s{7, d, d, 32, 4};
    EXPECT_EQ(flops(s, CostVariant::qe), 7 * d * d + 7 * d * (2 * 32 + 4));
  }
}

TEST(Params, Examples) {
  const LayerShape big{128, 3584, 3584, 64, 8};
  EXPECT_EQ(params_formula(big, CostVariant::origin), 12845056u);
  EXPECT_EQ(params_formula(big, CostVariant::qe), 14909440u);
  const LayerShape none{1, 64, 64, 0, 0};
  EXPECT_EQ(params_formula(none, CostVariant::qe), params_formula(none, CostVariant::origin));
  EXPECT_EQ(params_detailed(LayerShape{1, 64, 64, 64, 8}, CostVariant::qe), 41472u);
  EXPECT_THROW(params_formula(LayerShape{1, 64, 32, 8, 2}, CostVariant::qe), InvalidInput);
}

TEST(Shapes, DefaultListContainsTableShapes) {
  const auto shapes = default_shapes();
  bool a = false, b = false, c = false;
  for (const auto& s : shapes) {
    a |= s.d_in == 3584 && s.d_out == 3584;
    b |= s.d_in == 3584 && s.d_out == 18944;
    c |= s.d_in == 18944 && s.d_out == 3584;
  }
  EXPECT_TRUE(a && b && c);
}

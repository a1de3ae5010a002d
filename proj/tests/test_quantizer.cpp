#include <gtest/gtest.h>

#include <cmath>

#include "qe/error.hpp"
#include "qe/quantizer.hpp"
#include "test_util.hpp"

using namespace qe;
using qe::testing::random_matrix;

TEST(Quantizer, SymmetricHandExample) {
  const Tensor2D w{{1.0, -2.0, 0.5}};
  const auto q = quantize_weight(w, QuantScheme::w4a(8));
  EXPECT_EQ(q.codes, (std::vector<std::int32_t>{4, -7, 2}));
  EXPECT_NEAR(q.scales[0], 2.0 / 7.0, 1e-15);
  const Tensor2D d = dequantize_weight(q);
  EXPECT_NEAR(d(0, 0), 8.0 / 7.0, 1e-15);
  EXPECT_NEAR(d(0, 1), -2.0, 1e-15);
  EXPECT_NEAR(d(0, 2), 4.0 / 7.0, 1e-15);
  const Tensor2D e = quant_error(w, q);
  EXPECT_NEAR(e(0, 0), -1.0 / 7.0, 1e-15);
  EXPECT_NEAR(e(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(e(0, 2), -1.0 / 14.0, 1e-15);
}

TEST(Quantizer, AllColumnsSkipped) {
  const Tensor2D w = random_matrix(3, 4, 1);
  const auto q = quantize_weight(w, QuantScheme::w4a(8), {0, 1, 2, 3});
  for (auto c : q.codes) EXPECT_EQ(c, 0);
  EXPECT_EQ(frobenius_norm(dequantize_weight(q)), 0.0);
  EXPECT_EQ(quant_error(w, q), w);
}

TEST(Quantizer, SkippedColumnErrorEqualsWeight) {
  const Tensor2D w = random_matrix(4, 5, 2);
  const auto q = quantize_weight(w, QuantScheme::w4a(8), {0});
  const Tensor2D e = quant_error(w, q);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(e(r, 0), w(r, 0));
}

TEST(Quantizer, AsymmetricHandExample) {
  QuantScheme s = QuantScheme::w3a16();
  s.group_size = 2;
  const auto q = quantize_weight(Tensor2D{{-1.0, 2.0}}, s);
  EXPECT_NEAR(q.scales[0], 3.0 / 7.0, 1e-15);
  EXPECT_EQ(q.zero_points[0], 2);
  EXPECT_EQ(q.codes, (std::vector<std::int32_t>{0, 7}));
  const Tensor2D d = dequantize_weight(q);
  EXPECT_NEAR(d(0, 0), -6.0 / 7.0, 1e-14);
  EXPECT_NEAR(d(0, 1), 15.0 / 7.0, 1e-14);
}

TEST(Quantizer, ZeroCodesGiveZeroMatrix) {
  const auto q = quantize_weight(Tensor2D(3, 3), QuantScheme::w4a(8));
  EXPECT_EQ(frobenius_norm(dequantize_weight(q)), 0.0);
}

TEST(Quantizer, ExactlyRepresentableHasZeroError) {
  const Tensor2D w{{7, -3, 0, 1}, {-7, 2, 5, 6}};
  const auto q = quantize_weight(w, QuantScheme::w4a(8));
  EXPECT_EQ(frobenius_norm(quant_error(w, q)), 0.0);
}

TEST(Quantizer, ElementBoundAndCodeRange) {
  for (int bits : {2, 3, 4, 8}) {
    QuantScheme s = QuantScheme::w4a(8);
    s.weight_bits = bits;
    const Tensor2D w = random_matrix(20, 50, 30 + bits);
    const auto q = quantize_weight(w, s, {3, 7});
    const Tensor2D d = dequantize_weight(q);
    const int qmax = (1 << (bits - 1)) - 1;
    for (std::size_t r = 0; r < 20; ++r)
      for (std::size_t c = 0; c < 50; ++c) {
        const auto code = q.codes[r * 50 + c];
        EXPECT_LE(std::abs(code), qmax);
        if (c == 3 || c == 7) {
          EXPECT_EQ(code, 0);
          continue;
        }
        EXPECT_LE(std::abs(w(r, c) - d(r, c)), q.scales[r] / 2 + 1e-12);
      }
  }
}

TEST(Quantizer, AsymmetricBoundAndIdempotence) {
  QuantScheme s = QuantScheme::w3a16();
  s.group_size = 8;
  const Tensor2D w = random_matrix(6, 20, 4);
  const auto q = quantize_weight(w, s);
  const Tensor2D d = dequantize_weight(q);
  const std::size_t g = q.groups_per_row();
  EXPECT_EQ(g, 3u);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 20; ++c) {
      EXPECT_GE(q.codes[r * 20 + c], 0);
      EXPECT_LE(q.codes[r * 20 + c], 7);
      EXPECT_LE(std::abs(w(r, c) - d(r, c)), q.scales[r * g + c / 8] / 2 + 1e-12);
    }
  const auto q2 = quantize_weight(d, s);
  EXPECT_LE(frobenius_norm(dequantize_weight(q2) - d), 1e-12);
}

TEST(Quantizer, SymmetricIdempotent) {
  const Tensor2D w = random_matrix(5, 9, 8);
  const Tensor2D d = dequantize_weight(quantize_weight(w, QuantScheme::w4a(8)));
  const Tensor2D d2 = dequantize_weight(quantize_weight(d, QuantScheme::w4a(8)));
  EXPECT_LE(frobenius_norm(d - d2), 1e-12);
}

TEST(Quantizer, RoundHalfAwayFromZero) {
  EXPECT_EQ(round_half_away(2.5), 3.0);
  EXPECT_EQ(round_half_away(-2.5), -3.0);
  EXPECT_EQ(round_half_away(0.49), 0.0);
}

TEST(Activations, Examples) {
  const Tensor2D x = random_matrix(3, 4, 1);
  EXPECT_EQ(quantize_activations(x, 0), x);
  const auto r = quantize_activation_row(std::vector<double>{1.0, -1.0}, 8);
  EXPECT_EQ(r, (std::vector<double>{1.0, -1.0}));
  const auto z = quantize_activation_row(std::vector<double>{0.0, 0.0, 0.0}, 6);
  EXPECT_EQ(z, (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(Activations, PerTokenBound) {
  const Tensor2D x = random_matrix(30, 16, 5, 3.0);
  const Tensor2D q = quantize_activations(x, 6);
  for (std::size_t t = 0; t < 30; ++t) {
    double m = 0;
    for (double v : x.row(t)) m = std::max(m, std::abs(v));
    const double scale = m / 31.0;
    for (std::size_t c = 0; c < 16; ++c) EXPECT_LE(std::abs(q(t, c) - x(t, c)), scale / 2 + 1e-12);
  }
}

TEST(Scheme, Validation) {
  QuantScheme s;
  s.weight_bits = 1;
  EXPECT_THROW(s.validate(), InvalidInput);
  s = QuantScheme::w3a16();
  s.group_size = 0;
  EXPECT_THROW(s.validate(), InvalidInput);
  EXPECT_NO_THROW(QuantScheme::w4a(6).validate());
}

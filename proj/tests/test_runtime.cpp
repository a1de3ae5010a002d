#include <gtest/gtest.h>

#include <cmath>

#include "qe/error.hpp"
#include "qe/pipeline.hpp"
#include "qe/runtime.hpp"
#include "qe/synth.hpp"
#include "test_util.hpp"

using namespace qe;
using qe::testing::random_matrix;

namespace {

struct Built {
  Tensor2D w, x_cal, x_hold;
  ExpertPack pack;
};

Built build_layer(std::uint64_t seed, int act_bits = 8) {
  Built b;
  b.w = synth_weight(64, 64, seed);
  b.x_cal = synth_calibration(64, 1024, 2, seed + 1, SynthProfile{}).x;
  b.x_hold = synth_calibration(64, 256, 2, seed + 1, SynthProfile{}, 1).x;
  RunConfig cfg;
  cfg.scheme = QuantScheme::w4a(act_bits);
  if (act_bits == 0) cfg.scheme.act_mode = ActMode::none;
  cfg.k = 8;
  cfg.n_routed = 4;
  cfg.rank = 16;
  cfg.seed = seed;
  b.pack = quantize_layer("l", b.w, b.x_cal, cfg).pack;
  return b;
}

}  // namespace

TEST(Route, Examples) {
  const Router r{Tensor2D{{0.1, 0.3}, {0.2, 0.1}}};
  auto res = route(r, std::vector<double>{1.0, -1.0});
  EXPECT_NEAR(res.scores[0], 0.3, 1e-15);
  EXPECT_NEAR(res.scores[1], 0.4, 1e-15);
  EXPECT_EQ(res.expert, 0u);
  res = route(Router{Tensor2D(2, 3)}, std::vector<double>{1.0, 2.0});
  EXPECT_EQ(res.expert, 0u);
  res = route(r, std::vector<double>{0.0, 0.0});
  EXPECT_EQ(res.expert, 0u);
}

TEST(Forward, ZeroWeightGivesZeroOutput) {
  RunConfig cfg;
  cfg.k = 4;
  cfg.n_routed = 2;
  cfg.rank = 8;
  const Tensor2D x = synth_calibration(16, 64, 2, 3, SynthProfile{}).x;
  const auto pack = quantize_layer("z", Tensor2D(8, 16), x, cfg).pack;
  EXPECT_EQ(frobenius_norm(forward_compensated(pack, x).output), 0.0);
}

TEST(Forward, LosslessConfiguration) {
  std::mt19937_64 rng(2);
  Tensor2D w(12, 16);
  for (std::size_t r = 0; r < 12; ++r) {
    for (std::size_t c = 0; c < 16; ++c) w(r, c) = static_cast<double>(static_cast<int>(rng() % 15) - 7);
    w(r, 15) = 7.0;
  }
  const Tensor2D x = random_matrix(200, 16, 4);
  RunConfig cfg;
  cfg.scheme = QuantScheme::w4a(0);
  cfg.scheme.act_mode = ActMode::none;
  cfg.k = 2;
  cfg.n_routed = 2;
  cfg.rank = 8;
  const auto pack = quantize_layer("l", w, x, cfg).pack;
  const Tensor2D y = forward_compensated(pack, x).output;
  const Tensor2D ref = matmul_nt(x, w);
  EXPECT_LE(frobenius_norm(y - ref), 1e-6 * frobenius_norm(ref));
}

TEST(Forward, DecompositionIdentity) {
  const auto b = build_layer(11);
  const auto trace = forward_compensated(b.pack, b.x_hold);
  const Tensor2D dq = dequantize_weight(b.pack.quantized);
  for (std::size_t t = 0; t < 20; ++t) {
    const auto xh = prepare_activation(b.pack, b.x_hold.row(t));
    const auto base = matvec(dq, xh);
    const auto s = b.pack.shared.adapter.apply(xh);
    const auto r = b.pack.routed.adapters[trace.chosen_expert[t]].apply(xh);
    EXPECT_EQ(route(b.pack.router, xh).expert, trace.chosen_expert[t]);
    for (std::size_t o = 0; o < b.pack.d_out(); ++o)
      EXPECT_NEAR(trace.output(t, o), base[o] + s[o] + r[o], 1e-12);
  }
}

TEST(Forward, RoutingIndependentOfBatchComposition) {
  const auto b = build_layer(5);
  const auto full = forward_compensated(b.pack, b.x_hold);
  Tensor2D single(1, 64);
  for (std::size_t t = 0; t < 30; ++t) {
    std::copy(b.x_hold.row(t).begin(), b.x_hold.row(t).end(), single.row(0).begin());
    const auto one = forward_compensated(b.pack, single);
    EXPECT_EQ(one.chosen_expert[0], full.chosen_expert[t]);
    for (std::size_t o = 0; o < 64; ++o) EXPECT_EQ(one.output(0, o), full.output(t, o));
  }
}

TEST(Forward, QeBeatsSharedOnly) {
  const auto b = build_layer(21);
  const Tensor2D ref = matmul_nt(b.x_hold, b.w);
  const Tensor2D qe_out = forward_variant(b.pack, b.w, b.x_hold, Variant::qe).output;
  const Tensor2D sh = forward_variant(b.pack, b.w, b.x_hold, Variant::shared_only).output;
  std::size_t wins = 0;
  double mq = 0, ms = 0;
  for (std::size_t t = 0; t < ref.rows(); ++t) {
    double eq = 0, es = 0;
    for (std::size_t o = 0; o < ref.cols(); ++o) {
      eq += std::pow(qe_out(t, o) - ref(t, o), 2);
      es += std::pow(sh(t, o) - ref(t, o), 2);
    }
    wins += eq <= es;
    mq += std::sqrt(eq);
    ms += std::sqrt(es);
  }
  EXPECT_GE(2 * wins, ref.rows());
  EXPECT_LT(mq, ms);
}

TEST(Variants, OracleDominatesPerToken) {
  const auto b = build_layer(31);
  const Tensor2D ref = matmul_nt(b.x_hold, b.w);
  const auto oracle = forward_variant(b.pack, b.w, b.x_hold, Variant::qe_oracle_route);
  const auto learned = forward_variant(b.pack, b.w, b.x_hold, Variant::qe);
  const auto fp = forward_variant(b.pack, b.w, b.x_hold, Variant::fp);
  EXPECT_EQ(fp.output, ref);
  const std::size_t nr = b.pack.routed.adapters.size();
  for (std::size_t t = 0; t < ref.rows(); ++t) {
    auto err = [&](const Tensor2D& y) {
      double e = 0;
      for (std::size_t o = 0; o < ref.cols(); ++o) e += std::pow(y(t, o) - ref(t, o), 2);
      return std::sqrt(e);
    };
    EXPECT_LE(err(oracle.output), err(learned.output) + 1e-12);
    const auto xh = prepare_activation(b.pack, b.x_hold.row(t));
    const auto base = matvec(dequantize_weight(b.pack.quantized), xh);
    const auto s = b.pack.shared.adapter.apply(xh);
    double worst = 0;
    for (std::size_t i = 0; i < nr; ++i) {
      const auto r = b.pack.routed.adapters[i].apply(xh);
      double e = 0;
      for (std::size_t o = 0; o < ref.cols(); ++o) e += std::pow(base[o] + s[o] + r[o] - ref(t, o), 2);
      worst = std::max(worst, std::sqrt(e));
    }
    EXPECT_LE(err(learned.output), worst + 1e-12);
  }
  const auto random = forward_variant(b.pack, b.w, b.x_hold, Variant::qe_random_route, 3);
  EXPECT_GE(layer_metrics(ref, random.output).mean_l2, layer_metrics(ref, oracle.output).mean_l2);
}

TEST(Variants, MissingRoutedExperts) {
  RunConfig cfg;
  cfg.k = 4;
  cfg.n_routed = 0;
  cfg.rank = 8;
  const Tensor2D x = random_matrix(64, 16, 2);
  const Tensor2D w = random_matrix(8, 16, 3);
  const auto pack = quantize_layer("l", w, x, cfg).pack;
  EXPECT_FALSE(pack.has_routed());
  EXPECT_EQ(pack.shared.adapter.rank(), 8u);
  EXPECT_THROW(forward_variant(pack, w, x, Variant::qe), MissingMember);
  EXPECT_NO_THROW(forward_variant(pack, w, x, Variant::shared_only));
}

TEST(Variants, NamesRoundTrip) {
  for (Variant v : {Variant::fp, Variant::rtn, Variant::shared_only, Variant::qe_random_route,
                    Variant::qe_oracle_route, Variant::qe})
    EXPECT_EQ(variant_from_string(to_string(v)), v);
  EXPECT_THROW(variant_from_string("bogus"), InvalidInput);
}

TEST(Metrics, Examples) {
  const Tensor2D a = random_matrix(3, 4, 1);
  const auto z = layer_metrics(a, a);
  EXPECT_EQ(z.mean_l2, 0.0);
  EXPECT_EQ(z.max_l2, 0.0);
  EXPECT_EQ(z.rel_fro, 0.0);
  Tensor2D b = a;
  b(1, 2) += 1.0;
  EXPECT_NEAR(layer_metrics(a, b).max_l2, 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(layer_metrics(Tensor2D{{3, 4}}, Tensor2D(1, 2)).mean_l2, 5.0);
}

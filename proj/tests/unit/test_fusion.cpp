#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "csim/attention.hpp"
#include "csim/errors.hpp"
#include "csim/fusion.hpp"
#include "csim/ops.hpp"
#include "test_util.hpp"

namespace csim {
namespace {

using test::Mat;

TEST(MinShift, ConstantMatrixBecomesZero) {
  const Tensor out = sd::min_shift_distance(Tensor::full({3, 3}, 2.5));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(MinShift, ZeroMinimumIsUnchanged) {
  const Tensor d = Tensor::from_rows({{0, 1}, {2, 3}});
  EXPECT_EQ(test::to_vec(sd::min_shift_distance(d)), test::to_vec(d));
}

TEST(MinShift, IdentityAndIdempotence) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Mat d = test::random_mat(rng, 5, 5, 0.5, 4.0);
    const Tensor once = sd::min_shift_distance(test::to_tensor(d));
    EXPECT_LE(std::abs(min_all(once).item()), 1e-15);
    const double m = test::naive_min(d);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(once.at(i, j) + m, d[i][j], 1e-15);
    EXPECT_EQ(test::to_vec(sd::min_shift_distance(once)), test::to_vec(once));
  }
}

TEST(DistanceAggregation, SharesOperatorWithSimilarity) {
  std::mt19937_64 rng(4);
  const Tensor m = test::to_tensor(test::random_mat(rng, 6, 6, 0.0, 2.0));
  EXPECT_EQ(test::to_vec(sd::aggregate_distance_key_side(m)), test::to_vec(csa::aggregate_key_side(m)));
  EXPECT_EQ(test::to_vec(sd::aggregate_distance_query_side(m)), test::to_vec(csa::aggregate_query_side(m)));
  const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  for (double v : test::to_vec(sd::aggregate_distance_key_side(eye))) EXPECT_EQ(v, 1.0);
}

TEST(DistanceAggregation, MatchesNaiveOracle) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    Mat d = test::random_mat(rng, 6, 6, 0.0, 3.0);
    const double m = test::naive_min(d);
    for (auto& r : d)
      for (auto& x : r) x -= m;
    const Tensor out = sd::aggregate_distance_key_side(test::to_tensor(d));
    EXPECT_LE(test::max_abs_diff(test::naive_key_side(d), out.values()), 1e-12);
  }
}

TEST(Gate, StaysInsideOpenInterval) {
  for (double theta : {-1e3, -20.0, -1.0, 0.0, 0.5, 3.0, 18.0, 1e3}) {
    for (double gamma : {0.1, 1.0, 5.0}) {
      const double g = sd::gate(sd::FusionParams::make(gamma, theta)).item();
      EXPECT_GE(g, 0.0);
      EXPECT_LE(g, 2.0);
      if (std::abs(gamma * theta) < 18.0) {
        EXPECT_GT(g, 0.0);
        EXPECT_LT(g, 2.0);
      }
    }
  }
}

TEST(Gate, NonPositiveGammaRejected) {
  EXPECT_THROW(sd::FusionParams::make(0.0), ConfigError);
  EXPECT_THROW(sd::FusionParams::make(-1.0), ConfigError);
}

TEST(FuseSd, ZeroThetaIsExactSum) {
  std::mt19937_64 rng(9);
  const auto s = test::random_vec(rng, 16), d = test::random_vec(rng, 16);
  const Tensor out = sd::fuse_sd(Tensor::vector(s), Tensor::vector(d), sd::FusionParams::make());
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(out[i], s[i] + d[i]);
}

TEST(FuseSd, NegativeSaturationSuppressesD) {
  std::mt19937_64 rng(10);
  const auto s = test::random_vec(rng, 8), d = test::random_vec(rng, 8);
  const auto p = sd::FusionParams::make(1.0, -20.0);
  const double g = sd::gate(p).item();
  EXPECT_LT(g, 1e-8);
  const Tensor out = sd::fuse_sd(Tensor::vector(s), Tensor::vector(d), p);
  double err = 0.0;
  for (std::size_t i = 0; i < 8; ++i) err += std::pow(out[i] - s[i] - g * d[i], 2);
  EXPECT_LT(std::sqrt(err), 1e-8);
}

TEST(FuseSd, MatchesScalarOracleAndThetaGradient) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto s = test::random_vec(rng, 9), d = test::random_vec(rng, 9), w = test::random_vec(rng, 9);
    auto p = sd::FusionParams::make(1.0, 0.3);
    const double gate = 1.0 + std::tanh(0.3);
    const Tensor out = sd::fuse_sd(Tensor::vector(s), Tensor::vector(d), p);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(out[i], s[i] + gate * d[i], 1e-12);

    auto loss_at = [&](double theta) {
      double l = 0.0;
      for (std::size_t i = 0; i < 9; ++i) l += w[i] * (s[i] + (1.0 + std::tanh(theta)) * d[i]);
      return l;
    };
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(sum(mul(sd::fuse_sd(Tensor::vector(s), Tensor::vector(d), p), Tensor::vector(w))));
    }
    const double h = 1e-5;
    const double numeric = (loss_at(0.3 + h) - loss_at(0.3 - h)) / (2 * h);
    EXPECT_NEAR(p.theta.grad()[0], numeric, 1e-5);
  }
}

TEST(FuseSd, LengthMismatchThrows) {
  EXPECT_THROW(sd::fuse_sd(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3}), sd::FusionParams::make()),
               DimensionError);
}

TEST(SelectMatrixMode, ModesIgnoreTheUnusedSignal) {
  std::mt19937_64 rng(12);
  const Tensor s = Tensor::vector(test::random_vec(rng, 5));
  const Tensor d1 = Tensor::vector(test::random_vec(rng, 5));
  const Tensor d2 = Tensor::vector(test::random_vec(rng, 5));
  const auto p = sd::FusionParams::make();
  EXPECT_EQ(test::to_vec(sd::select_matrix_mode(sd::MatrixMode::S, s, d1, p)),
            test::to_vec(sd::select_matrix_mode(sd::MatrixMode::S, s, d2, p)));
  EXPECT_EQ(test::to_vec(sd::select_matrix_mode(sd::MatrixMode::D, s, d1, p)),
            test::to_vec(sd::select_matrix_mode(sd::MatrixMode::D, d2, d1, p)));
  const Tensor both = sd::select_matrix_mode(sd::MatrixMode::SD, s, d1, p);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(both[i], s[i] + d1[i]);
}

TEST(SelectMatrixMode, MissingInputThrows) {
  const auto p = sd::FusionParams::make();
  const Tensor v = Tensor::vector({1, 2});
  EXPECT_THROW(sd::select_matrix_mode(sd::MatrixMode::S, std::nullopt, v, p), ConfigError);
  EXPECT_THROW(sd::select_matrix_mode(sd::MatrixMode::D, v, std::nullopt, p), ConfigError);
  EXPECT_THROW(sd::select_matrix_mode(sd::MatrixMode::SD, v, std::nullopt, p), ConfigError);
}

TEST(SelectMatrixMode, ParseAndPrint) {
  for (auto m : {sd::MatrixMode::S, sd::MatrixMode::D, sd::MatrixMode::SD})
    EXPECT_EQ(sd::parse_matrix_mode(sd::to_string(m)), m);
  EXPECT_THROW(sd::parse_matrix_mode("sxd"), ConfigError);
}

TEST(Theta, ReceivesGradientWhenAttentionFeedsTheLoss) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor qa = test::to_tensor(test::random_mat(rng, 9, 4));
    const Tensor qp = test::to_tensor(test::random_mat(rng, 9, 4));
    const Tensor qn = test::to_tensor(test::random_mat(rng, 9, 4));
    const Tensor va = test::to_tensor(test::random_mat(rng, 9, 3));
    const Tensor w = test::to_tensor(test::random_mat(rng, 9, 3));
    auto p = sd::FusionParams::make();
    Tape tape;
    {
      TapeScope scope(tape);
      const Tensor s = csa::aggregate_key_side(csa::similarity_matrix(qp, qa).data);
      const Tensor d = sd::aggregate_distance_key_side(sd::min_shift_distance(pairwise_euclidean(qn, qa)));
      const Tensor out = csa::apply_spatial_attention(sd::fuse_sd(s, d, p), va);
      tape.backward(sum(mul(out, w)));
    }
    ASSERT_TRUE(p.theta.has_grad());
    EXPECT_NE(p.theta.grad()[0], 0.0);
  }
}

}  // namespace
}  // namespace csim

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "csim/attention.hpp"
#include "csim/errors.hpp"
#include "csim/ops.hpp"
#include "test_util.hpp"

namespace csim {
namespace {

using test::Mat;

constexpr double kOracleTol = 1e-12;

std::size_t row_argmax(const Tensor& m, std::size_t i) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < m.cols(); ++j)
    if (m.at(i, j) > m.at(i, best)) best = j;
  return best;
}

Tensor self_weights_output(const Tensor& qa, const Tensor& qb, const Tensor& va) {
  const Tensor s = csa::similarity_matrix(qb, qa).data;
  return csa::apply_spatial_attention(csa::aggregate_key_side(s), va);
}

// --- similarity matrix ----------------------------------------------------------

TEST(SimilarityMatrix, SelfPairPutsGlobalMaxOnDiagonal) {
  std::mt19937_64 rng(1);
  const Tensor q = test::to_tensor(test::random_mat(rng, 7, 3));
  const Tensor s = csa::similarity_matrix(q, q).data;
  const double top = max_all(s).item();
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_NEAR(s.at(i, i), top, 1e-5);
    EXPECT_EQ(row_argmax(s, i), i);
  }
}

TEST(SimilarityMatrix, SinglePositionIsZero) {
  const Tensor s = csa::similarity_matrix(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{4, -1}})).data;
  EXPECT_EQ(s.item(), 0.0);
}

TEST(SimilarityMatrix, PlusDistanceEqualsMax) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Mat q = test::random_mat(rng, 6, 3), k = test::random_mat(rng, 6, 3);
    const Tensor s = csa::similarity_matrix(test::to_tensor(q), test::to_tensor(k)).data;
    const Mat d = test::naive_euclidean(q, k);
    const double dmax = test::naive_max(d);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_NEAR(s.at(i, j) + d[i][j], dmax, kOracleTol);
        EXPECT_GE(s.at(i, j), -kOracleTol);
        EXPECT_LE(s.at(i, j), dmax + kOracleTol);
      }
  }
}

TEST(SimilarityMatrix, DistanceMatrixIsNonNegative) {
  std::mt19937_64 rng(8);
  const auto m = csa::distance_matrix(test::to_tensor(test::random_mat(rng, 5, 4)),
                                      test::to_tensor(test::random_mat(rng, 5, 4)));
  EXPECT_EQ(m.kind, csa::MatrixKind::Distance);
  for (double v : m.data.values()) EXPECT_GE(v, 0.0);
}

TEST(SimilarityMatrix, LevelMismatchThrows) {
  std::mt19937_64 rng(2);
  csa::FeatureMap a{test::to_tensor(test::random_mat(rng, 4, 3)), 2, 2, 0};
  csa::FeatureMap b{test::to_tensor(test::random_mat(rng, 4, 3)), 2, 2, 1};
  EXPECT_THROW(csa::similarity_matrix(a, b), ContractError);
  b.level = 0;
  EXPECT_NO_THROW(csa::similarity_matrix(a, b));
}

TEST(FeatureMap, ValidateRejectsBadGeometryAndNonFinite) {
  csa::FeatureMap m{Tensor::zeros({5, 2}), 2, 2, 0};
  EXPECT_THROW(csa::validate(m), ContractError);
  m = {Tensor::from_rows({{1, std::nan("")}}), 1, 1, 0};
  EXPECT_THROW(csa::validate(m), ContractError);
}

TEST(SimilarityMatrix, CrossMatrixIsAsymmetric) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor s = csa::similarity_matrix(test::to_tensor(test::random_mat(rng, 6, 3)),
                                            test::to_tensor(test::random_mat(rng, 6, 3)))
                         .data;
    double asym = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) asym += std::abs(s.at(i, j) - s.at(j, i));
    EXPECT_GT(asym, 0.0);
  }
}

// --- diagonal dominance ---------------------------------------------------------

TEST(DiagonalDominance, EuclideanAndCosineOnFiftyMaps) {
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const Tensor q = test::to_tensor(test::random_mat(rng, 16, 8));
    const Tensor s = csa::similarity_matrix(q, q).data;
    const Tensor c = csa::cosine_similarity_matrix(q, q).data;
    for (std::size_t i = 0; i < 16; ++i) {
      EXPECT_EQ(row_argmax(s, i), i) << "seed " << seed;
      EXPECT_EQ(row_argmax(c, i), i) << "seed " << seed;
    }
  }
}

TEST(DiagonalDominance, DotProductCounterexample) {
  // A short vector is closer to itself than to a long neighbour in direction,
  // but the neighbour's norm wins the dot product.
  const Tensor q = Tensor::from_rows({{1.0, 0.0}, {10.0, 1.0}});
  const Tensor dot = csa::dot_product_matrix(q, q).data;
  EXPECT_NE(row_argmax(dot, 0), 0u);
  EXPECT_EQ(row_argmax(csa::similarity_matrix(q, q).data, 0), 0u);
  EXPECT_EQ(row_argmax(csa::cosine_similarity_matrix(q, q).data, 0), 0u);
}

TEST(CosineSimilarity, Examples) {
  const Tensor q = Tensor::from_rows({{2, 0, 0}, {0, 3, 0}, {0, 0, 0.5}});
  const Tensor c = csa::cosine_similarity_matrix(q, q).data;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c.at(i, j), i == j ? 1.0 : 0.0, 1e-15);
}

// --- aggregation ------------------------------------------------------------------

TEST(Aggregation, IdentityGivesOnes) {
  const Tensor eye = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  for (double v : test::to_vec(csa::aggregate_key_side(eye))) EXPECT_EQ(v, 1.0);
  for (double v : test::to_vec(csa::aggregate_query_side(eye))) EXPECT_EQ(v, 1.0);
}

TEST(Aggregation, IdenticalRowsGiveScaledUnitVector) {
  const std::vector<double> v{1.0, 2.0, 2.0, 4.0};
  const Tensor m = Tensor::from_rows({{1, 2, 2, 4}, {1, 2, 2, 4}, {1, 2, 2, 4}, {1, 2, 2, 4}});
  const Tensor out = csa::aggregate_key_side(m);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[j], 4.0 * v[j] / 5.0, 1e-15);
}

TEST(Aggregation, SymmetricMatrixSidesAgree) {
  std::mt19937_64 rng(3);
  Mat m = test::random_mat(rng, 5, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < i; ++j) m[i][j] = m[j][i];
  const Tensor t = test::to_tensor(m);
  EXPECT_EQ(test::to_vec(csa::aggregate_key_side(t)), test::to_vec(csa::aggregate_query_side(t)));
}

TEST(Aggregation, QuerySideEqualsKeySideOfTranspose) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor m = test::to_tensor(test::random_mat(rng, 5, 5));
    EXPECT_LE(test::max_abs_diff(csa::aggregate_query_side(m).values(),
                                 csa::aggregate_key_side(transpose(m)).values()),
              1e-15);
  }
}

// --- attention application ------------------------------------------------------

TEST(SpatialAttention, UniformRawIsIdentity) {
  std::mt19937_64 rng(6);
  const Tensor v = test::to_tensor(test::random_mat(rng, 4, 3));
  const Tensor out = csa::apply_spatial_attention(Tensor::vector({0.3, 0.3, 0.3, 0.3}), v);
  EXPECT_EQ(test::to_vec(out), test::to_vec(v));
}

TEST(SpatialAttention, SharpRawKeepsOnePosition) {
  const Tensor v = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const Tensor out = csa::apply_spatial_attention(Tensor::vector({0, 200, 0}), v);
  EXPECT_NEAR(out.at(1, 0), 9.0, 1e-12);
  EXPECT_NEAR(out.at(1, 1), 12.0, 1e-12);
  EXPECT_NEAR(out.at(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(out.at(2, 1), 0.0, 1e-12);
}

TEST(SpatialAttention, LengthMismatchThrows) {
  EXPECT_THROW(csa::apply_spatial_attention(Tensor::vector({0, 0}), Tensor::zeros({3, 2})), DimensionError);
}

TEST(Sdpa, SinglePositionReturnsValues) {
  const Tensor v = Tensor::from_rows({{1.5, -2}});
  const Tensor out = csa::sdpa_cross_attention(Tensor::from_rows({{1, 2, 3}}), Tensor::from_rows({{-1, 0, 4}}), v);
  EXPECT_EQ(test::to_vec(out), test::to_vec(v));
}

TEST(Sdpa, OrthonormalRowsGiveNearUniformWeights) {
  const std::size_t d = 64;
  std::vector<double> eye(4 * d, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * d + i] = 1.0;
  const Tensor q = Tensor::matrix(4, d, eye);
  const Tensor v = Tensor::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  const Tensor out = csa::sdpa_cross_attention(q, q, v);
  for (double w : out.values()) EXPECT_NEAR(w, 0.25, 0.05);
}

TEST(Sdpa, DimensionMismatchThrows) {
  EXPECT_THROW(csa::sdpa_cross_attention(Tensor::zeros({3, 2}), Tensor::zeros({3, 4}), Tensor::zeros({3, 2})),
               DimensionError);
  EXPECT_THROW(csa::sdpa_cross_attention(Tensor::zeros({3, 2}), Tensor::zeros({3, 2}), Tensor::zeros({2, 2})),
               DimensionError);
}

// --- oracle equivalence, 100 instances up to 16 x 16 -----------------------------

class AttentionOracle : public ::testing::TestWithParam<int> {
 protected:
  std::mt19937_64 rng{static_cast<std::uint64_t>(GetParam()) + 500u};
};

TEST_P(AttentionOracle, KeyAndQuerySideAggregation) {
  const std::size_t l = test::random_size(rng, 1, 16), c = test::random_size(rng, 1, 16);
  const Mat q = test::random_mat(rng, l, c), k = test::random_mat(rng, l, c);
  const Mat d = test::naive_euclidean(q, k);
  Mat s = d;
  const double dmax = test::naive_max(d);
  for (auto& row : s)
    for (auto& x : row) x = dmax - x;
  const Tensor ts = csa::similarity_matrix(test::to_tensor(q), test::to_tensor(k)).data;
  EXPECT_LE(test::max_abs_diff(s, ts), kOracleTol);
  EXPECT_LE(test::max_abs_diff(test::naive_key_side(s), csa::aggregate_key_side(ts).values()), kOracleTol);
  EXPECT_LE(test::max_abs_diff(test::naive_query_side(s), csa::aggregate_query_side(ts).values()), kOracleTol);
}

TEST_P(AttentionOracle, SpatialAttention) {
  const std::size_t l = test::random_size(rng, 1, 16), c = test::random_size(rng, 1, 16);
  const auto raw = test::random_vec(rng, l, -3.0, 3.0);
  const Mat v = test::random_mat(rng, l, c);
  const auto w = test::naive_softmax(raw);
  Mat expect = v;
  double total = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    total += w[i];
    for (auto& x : expect[i]) x *= static_cast<double>(l) * w[i];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_LE(test::max_abs_diff(expect, csa::apply_spatial_attention(Tensor::vector(raw), test::to_tensor(v))),
            kOracleTol);
}

TEST_P(AttentionOracle, Sdpa) {
  const std::size_t l = test::random_size(rng, 1, 16), m = test::random_size(rng, 1, 16);
  const std::size_t d = test::random_size(rng, 1, 16), dv = test::random_size(rng, 1, 16);
  const Mat q = test::random_mat(rng, l, d), k = test::random_mat(rng, m, d), v = test::random_mat(rng, m, dv);
  EXPECT_LE(test::max_abs_diff(test::naive_sdpa(q, k, v), csa::sdpa_cross_attention(test::to_tensor(q), test::to_tensor(k),
                                                                                    test::to_tensor(v))),
            kOracleTol);
}

INSTANTIATE_TEST_SUITE_P(Random, AttentionOracle, ::testing::Range(0, 100));

// --- direct feedback --------------------------------------------------------------

TEST(DirectFeedback, CsaOutputDependsOnlyOnOwnValues) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor qa = test::to_tensor(test::random_mat(rng, 9, 4));
    const Tensor qb = test::to_tensor(test::random_mat(rng, 9, 4));
    const Mat va = test::random_mat(rng, 9, 3), vb = test::random_mat(rng, 9, 3);
    const Tensor base = self_weights_output(qa, qb, test::to_tensor(va));

    Mat va2 = va;
    va2[4][1] += 0.25;
    const Tensor own = self_weights_output(qa, qb, test::to_tensor(va2));
    EXPECT_GT(test::max_abs_diff(own.values(), base.values()), 1e-3);

    // Both branches built from the shared matrix; branch A's output must not
    // see the partner's values.
    Tensor ta = test::to_tensor(va, true), tb = test::to_tensor(vb, true);
    Tape tape;
    {
      TapeScope scope(tape);
      const Tensor s = csa::similarity_matrix(qb, qa).data;
      const Tensor a_out = csa::apply_spatial_attention(csa::aggregate_key_side(s), ta);
      (void)csa::apply_spatial_attention(csa::aggregate_query_side(s), tb);
      tape.backward(sum(a_out));
    }
    double own_grad = 0.0;
    for (double g : ta.grad()) own_grad += std::abs(g);
    EXPECT_GT(own_grad, 0.0);
    for (double g : tb.grad()) EXPECT_EQ(g, 0.0);
  }
}

TEST(DirectFeedback, SdpaOutputDependsOnlyOnPartnerValues) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor qa = test::to_tensor(test::random_mat(rng, 9, 4));
    const Tensor qb = test::to_tensor(test::random_mat(rng, 9, 4));
    Tensor va = test::to_tensor(test::random_mat(rng, 9, 3), true);
    Tensor vb = test::to_tensor(test::random_mat(rng, 9, 3), true);
    Tape tape;
    {
      TapeScope scope(tape);
      // Branch A queries with its own features and mixes the partner's values.
      const Tensor a_out = csa::sdpa_cross_attention(qa, qb, vb);
      (void)mul(va, va);
      tape.backward(sum(a_out));
    }
    EXPECT_FALSE(va.has_grad() && [&] {
      for (double g : va.grad())
        if (g != 0.0) return true;
      return false;
    }());
    double partner = 0.0;
    for (double g : vb.grad()) partner += std::abs(g);
    EXPECT_GT(partner, 0.0);

    const Mat vb_shift = [&] {
      Mat m = test::to_mat(vb);
      m[0][0] += 0.5;
      return m;
    }();
    const Tensor before = csa::sdpa_cross_attention(qa, qb, vb.detach());
    const Tensor after = csa::sdpa_cross_attention(qa, qb, test::to_tensor(vb_shift));
    EXPECT_GT(test::max_abs_diff(before.values(), after.values()), 1e-4);
  }
}

}  // namespace
}  // namespace csim

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "csim/checkpoint.hpp"
#include "csim/errors.hpp"
#include "csim/model.hpp"
#include "csim/ops.hpp"
#include "csim/trainer.hpp"
#include "test_util.hpp"

namespace csim {
namespace {

ModelConfig small_config(Topology t = Topology::Qcs) {
  ModelConfig m;
  m.grid = 3;
  m.patch = 2;
  m.channels = 6;
  m.qk_dim = 5;
  m.mlp_hidden = 8;
  m.classes = 3;
  m.topology = t;
  return m;
}

Tensor random_patches(const ModelConfig& m, std::mt19937_64& rng) {
  return Tensor::matrix(m.positions(), m.patch * m.patch,
                        test::random_vec(rng, m.positions() * m.patch * m.patch, -0.5, 0.5));
}

std::array<ImageInput, 4> random_quad(const ModelConfig& m, std::mt19937_64& rng) {
  return {ImageInput{random_patches(m, rng), 0}, ImageInput{random_patches(m, rng), 0},
          ImageInput{random_patches(m, rng), 1}, ImageInput{random_patches(m, rng), 1}};
}

std::vector<double> values_of(const Tensor& t) { return test::to_vec(t); }

double loss_of(const GraphOutput& g, std::span<const int> labels) {
  BatchOutputs bo;
  for (std::size_t b = 0; b < g.base_logits.size(); ++b) {
    if (!g.base_logits[b].defined()) continue;
    bo.base_logits.push_back(g.base_logits[b]);
    bo.cross_logits.push_back(g.cross_logits[b]);
    bo.labels.push_back({labels[b]});
  }
  return total_loss(bo, LossWeights{}, bo.base_logits.size()).total.item();
}

// --- configuration and enums ------------------------------------------------------

TEST(ModelConfig, EnumsRoundTrip) {
  for (auto t : {Topology::Baseline, Topology::Dcs, Topology::Qcs, Topology::TripletControl})
    EXPECT_EQ(parse_topology(to_string(t)), t);
  for (auto a : {AttentionKind::Csa, AttentionKind::Sdpa}) EXPECT_EQ(parse_attention(to_string(a)), a);
  for (auto r : {ResidualKind::None, ResidualKind::GapAdd, ResidualKind::BilinearPool, ResidualKind::VitAdd})
    EXPECT_EQ(parse_residual(to_string(r)), r);
  EXPECT_THROW(parse_topology("pentuplet"), ConfigError);
  EXPECT_THROW(parse_residual("concat"), ConfigError);
  EXPECT_THROW(parse_attention("mha"), ConfigError);
}

TEST(ModelConfig, ValidationRejectsBadValues) {
  ModelConfig m = small_config();
  m.dropout = 0.5;
  EXPECT_THROW(m.validate(), ConfigError);
  m = small_config();
  m.classes = 1;
  EXPECT_THROW(m.validate(), ConfigError);
  m = small_config();
  m.gamma = 0.0;
  EXPECT_THROW(m.validate(), ConfigError);
  m = small_config();
  m.frozen_neg = true;
  EXPECT_THROW(m.validate(), ConfigError);
  EXPECT_NO_THROW(small_config().validate());
}

TEST(Topology, PairingRings) {
  EXPECT_EQ(branch_count(Topology::Baseline), 1u);
  EXPECT_EQ(branch_count(Topology::Dcs), 2u);
  EXPECT_EQ(branch_count(Topology::Qcs), 4u);
  EXPECT_EQ(branch_count(Topology::TripletControl), 3u);
  const auto ring = topology_pairings(Topology::Qcs);
  ASSERT_EQ(ring.size(), 4u);
  std::array<int, 4> s_count{}, d_count{};
  for (const auto& p : ring) {
    auto& counts = p.kind == 'S' ? s_count : d_count;
    ++counts[p.key];
    ++counts[p.query];
  }
  for (std::size_t b = 0; b < 4; ++b) {
    EXPECT_EQ(s_count[b], 1);
    EXPECT_EQ(d_count[b], 1);
  }
  EXPECT_EQ(topology_pairings(Topology::Dcs).size(), 1u);
}

TEST(Topology, LabelContracts) {
  const int qcs_ok[] = {0, 0, 1, 1};
  const int qcs_pos[] = {0, 1, 1, 1};
  const int qcs_neg[] = {0, 0, 1, 2};
  const int qcs_same[] = {0, 0, 0, 0};
  EXPECT_NO_THROW(check_branch_labels(Topology::Qcs, qcs_ok));
  EXPECT_THROW(check_branch_labels(Topology::Qcs, qcs_pos), ContractError);
  EXPECT_THROW(check_branch_labels(Topology::Qcs, qcs_neg), ContractError);
  EXPECT_THROW(check_branch_labels(Topology::Qcs, qcs_same), ContractError);
  const int dcs_bad[] = {0, 1};
  EXPECT_THROW(check_branch_labels(Topology::Dcs, dcs_bad), ContractError);

  const Model model(small_config(Topology::Dcs), 1);
  std::mt19937_64 rng(1);
  EXPECT_THROW(model.forward_dcs({random_patches(model.config(), rng), 0}, {random_patches(model.config(), rng), 2}),
               ContractError);
  const ImageInput one[] = {{random_patches(model.config(), rng), 0}};
  EXPECT_THROW(model.forward(one), ContractError);
}

// --- baseline forward ---------------------------------------------------------------

TEST(Baseline, FiniteLogitsAndDeterminism) {
  const Model a(small_config(Topology::Baseline), 5);
  const Model b(small_config(Topology::Baseline), 5);
  std::mt19937_64 rng(2);
  const Tensor x = random_patches(a.config(), rng);
  const Tensor la = a.forward_inference(x);
  EXPECT_EQ(la.numel(), 3u);
  for (double v : la.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(values_of(la), values_of(a.forward_inference(x)));
  EXPECT_EQ(values_of(la), values_of(b.forward_inference(x)));
  EXPECT_EQ(values_of(la), values_of(a.forward_baseline({x, 0})));
}

TEST(Baseline, WrongPatchShapeThrows) {
  const Model m(small_config(Topology::Baseline), 1);
  EXPECT_THROW(m.forward_inference(Tensor::zeros({4, 4})), ConfigError);
}

TEST(Baseline, ChannelPermutationEquivariance) {
  // Permuting the channel axis of every width-c space, with the weights
  // permuted to match, must leave the logits unchanged.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ModelConfig cfg = small_config(Topology::Baseline);
    const Model model(cfg, seed);
    Model permuted = model.clone();
    const std::size_t c = cfg.channels;
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 prng(seed);
    std::shuffle(perm.begin(), perm.end(), prng);

    auto permute = [&](const std::string& name, bool rows, bool cols) {
      const Tensor& src = model.parameters().get(name);
      auto dst = Tensor(permuted.parameters().get(name)).mutable_values();
      const std::size_t r = src.rank() == 1 ? 1 : src.rows();
      const std::size_t k = src.rank() == 1 ? src.numel() : src.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t si = rows ? perm[i] : i, sj = cols ? perm[j] : j;
          dst[i * k + j] = src.values()[si * k + sj];
        }
    };
    permute("backbone.stage0.weight", false, true);
    for (int s = 0; s < 3; ++s) {
      if (s > 0) permute("backbone.stage" + std::to_string(s) + ".weight", true, true);
      permute("backbone.stage" + std::to_string(s) + ".bias", false, true);
    }
    permute("base.cls_token", false, true);
    for (const char* ln : {"base.block.norm1", "base.block.norm2", "base.norm"}) {
      permute(std::string(ln) + ".gamma", false, true);
      permute(std::string(ln) + ".beta", false, true);
    }
    for (const char* lin : {"base.block.query", "base.block.key", "base.block.value", "base.block.fc1"})
      permute(std::string(lin) + ".weight", true, false);
    permute("base.block.out.weight", false, true);
    permute("base.block.out.bias", false, true);
    permute("base.block.fc2.weight", false, true);
    permute("base.block.fc2.bias", false, true);
    permute("base.classifier.weight", true, false);

    std::mt19937_64 rng(seed + 100);
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor x = random_patches(cfg, rng);
      EXPECT_LE(test::max_abs_diff(model.forward_inference(x).values(), permuted.forward_inference(x).values()),
                1e-12);
    }
  }
}

// --- two-branch graph --------------------------------------------------------------

TEST(Dcs, SwappingBranchesSwapsOutputs) {
  for (auto residual : {ResidualKind::None, ResidualKind::GapAdd, ResidualKind::BilinearPool, ResidualKind::VitAdd}) {
    ModelConfig cfg = small_config(Topology::Dcs);
    cfg.residual = residual;
    const Model model(cfg, 3);
    std::mt19937_64 rng(4);
    const ImageInput a{random_patches(cfg, rng), 1}, p{random_patches(cfg, rng), 1};
    const GraphOutput ap = model.forward_dcs(a, p);
    const GraphOutput pa = model.forward_dcs(p, a);
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_LE(test::max_abs_diff(ap.base_logits[b].values(), pa.base_logits[1 - b].values()), 1e-12);
      EXPECT_LE(test::max_abs_diff(ap.cross_logits[b].values(), pa.cross_logits[1 - b].values()), 1e-12);
    }
  }
}

TEST(Dcs, IdenticalImagesGiveIdenticalBranches) {
  const Model model(small_config(Topology::Dcs), 6);
  std::mt19937_64 rng(6);
  const ImageInput a{random_patches(model.config(), rng), 0};
  ForwardOptions opt;
  opt.record_attention = true;
  const GraphOutput g = model.forward_dcs(a, a, opt);
  EXPECT_EQ(values_of(g.cross_logits[0]), values_of(g.cross_logits[1]));
  EXPECT_EQ(g.attention[0][0].weights, g.attention[1][0].weights);
  const Tensor qk = model.project_qk(a.patches, 0);
  const Tensor s = csa::similarity_matrix(qk, qk).data;
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j) EXPECT_LE(s.at(i, j), s.at(i, i) + 1e-5);
}

TEST(Dcs, UniformFeaturesGiveIdentityAttention) {
  // Identical rows make S all zeros, so the raw weights are uniform.
  const Tensor q = Tensor::from_rows({{0.3, -0.2}, {0.3, -0.2}, {0.3, -0.2}, {0.3, -0.2}});
  const Tensor v = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}, {7, 8}});
  const Tensor s = csa::similarity_matrix(q, q).data;
  EXPECT_EQ(test::to_vec(csa::apply_spatial_attention(csa::aggregate_key_side(s), v)), test::to_vec(v));
}

// --- four-branch graph ---------------------------------------------------------------

TEST(Qcs, ExactlyTwoSAndTwoDPerLevel) {
  const Model model(small_config(), 7);
  std::mt19937_64 rng(7);
  const GraphOutput g = model.forward_qcs(random_quad(model.config(), rng));
  for (std::size_t lv = 0; lv < kLevels; ++lv) {
    EXPECT_EQ(g.stats.s_matrices[lv], 2);
    EXPECT_EQ(g.stats.d_matrices[lv], 2);
  }
  EXPECT_EQ(g.base_logits.size(), 4u);
  for (std::size_t b = 0; b < 4; ++b) {
    EXPECT_TRUE(g.base_logits[b].defined());
    EXPECT_TRUE(g.cross_logits[b].defined());
  }
}

TEST(Qcs, SharedProjectionTransposeSymmetry) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Model model(small_config(), seed);
    std::mt19937_64 rng(seed);
    ForwardOptions opt;
    opt.audit = true;
    const GraphOutput g = model.forward_qcs(random_quad(model.config(), rng), opt);
    EXPECT_LE(g.stats.max_transpose_error, 1e-12);
    EXPECT_LE(g.stats.max_weight_sum_error, 1e-12);

    const Tensor a = random_patches(model.config(), rng), p = random_patches(model.config(), rng);
    const Tensor qa = model.project_qk(a, 1), qp = model.project_qk(p, 1);
    const Tensor ap = csa::similarity_matrix(qa, qp).data, pa = csa::similarity_matrix(qp, qa).data;
    EXPECT_LE(test::max_abs_diff(ap.values(), transpose(pa).values()), 1e-12);
  }
}

TEST(Qcs, IdenticalImagesGiveIdenticalBranches) {
  const Model model(small_config(), 8);
  std::mt19937_64 rng(8);
  const Tensor x = random_patches(model.config(), rng);
  const std::array<ImageInput, 4> quad{ImageInput{x, -1}, ImageInput{x, -1}, ImageInput{x, -1}, ImageInput{x, -1}};
  ForwardOptions opt;
  opt.record_attention = true;
  const GraphOutput g = model.forward_qcs(quad, opt);
  for (std::size_t b = 1; b < 4; ++b) {
    EXPECT_EQ(values_of(g.base_logits[b]), values_of(g.base_logits[0]));
    EXPECT_EQ(values_of(g.cross_logits[b]), values_of(g.cross_logits[0]));
    for (std::size_t lv = 0; lv < kLevels; ++lv) {
      EXPECT_EQ(g.attention[b][lv].s_raw, g.attention[0][lv].s_raw);
      EXPECT_EQ(g.attention[b][lv].d_raw, g.attention[0][lv].d_raw);
    }
  }
}

TEST(Qcs, CyclicRelabelPermutesOutputs) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Model model(small_config(), seed);
    std::mt19937_64 rng(seed * 3);
    const auto q = random_quad(model.config(), rng);
    const GraphOutput g = model.forward_qcs(q);
    const GraphOutput r = model.forward_qcs({q[2], q[3], q[0], q[1]});
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_LE(test::max_abs_diff(r.base_logits[b].values(), g.base_logits[(b + 2) % 4].values()), 1e-12);
      EXPECT_LE(test::max_abs_diff(r.cross_logits[b].values(), g.cross_logits[(b + 2) % 4].values()), 1e-12);
    }
  }
}

TEST(Qcs, RoleSwapLeavesLossUnchanged) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Model model(small_config(), seed);
    std::mt19937_64 rng(seed * 5);
    const auto q = random_quad(model.config(), rng);
    const int labels[] = {0, 0, 1, 1};
    const double before = loss_of(model.forward_qcs(q), labels);
    const double after = loss_of(model.forward_qcs({q[1], q[0], q[3], q[2]}), labels);
    EXPECT_NEAR(before, after, 1e-10);
  }
}

TEST(Qcs, InferenceMatchesTrainingBasePath) {
  const Model model(small_config(), 9);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_quad(model.config(), rng);
    const GraphOutput g = model.forward_qcs(q);
    for (std::size_t b = 0; b < 4; ++b)
      EXPECT_EQ(values_of(model.forward_inference(q[b].patches)), values_of(g.base_logits[b]));
  }
}

TEST(Qcs, InferenceCostIsTopologyIndependent) {
  std::mt19937_64 rng(10);
  const Tensor x = random_patches(small_config(), rng);
  std::vector<std::uint64_t> costs;
  for (auto t : {Topology::Baseline, Topology::Dcs, Topology::Qcs, Topology::TripletControl}) {
    const Model model(small_config(t), 1);
    reset_op_count();
    (void)model.forward_inference(x);
    costs.push_back(op_count());
  }
  for (auto c : costs) EXPECT_EQ(c, costs[0]);
  EXPECT_GT(costs[0], 0u);
}

TEST(Qcs, VitResidualSendsGradientToBaseAndCross) {
  const Model model(small_config(), 11);
  std::mt19937_64 rng(11);
  const auto q = random_quad(model.config(), rng);
  Tape tape;
  {
    TapeScope scope(tape);
    GraphOutput g = model.forward_qcs(q);
    BatchOutputs bo;
    for (std::size_t b = 0; b < 4; ++b) {
      bo.base_logits.push_back(g.base_logits[b]);
      bo.cross_logits.push_back(g.cross_logits[b]);
      bo.labels.push_back({q[b].label});
    }
    tape.backward(total_loss(bo, LossWeights{}, 4).total);
  }
  auto grad_norm = [&](const std::string& name) {
    const Tensor& t = model.parameters().get(name);
    double s = 0.0;
    for (double g : t.grad()) s += std::abs(g);
    return s;
  };
  EXPECT_GT(grad_norm("base.classifier.weight"), 0.0);
  EXPECT_GT(grad_norm("backbone.stage0.weight"), 0.0);
  EXPECT_GT(grad_norm("cross.block.fc1.weight"), 0.0);
  EXPECT_GT(grad_norm("cross.classifier.weight"), 0.0);
  EXPECT_GT(grad_norm("cross.level0.qk.weight"), 0.0);
  EXPECT_GT(grad_norm("cross.level2.v.weight"), 0.0);
  EXPECT_GT(grad_norm("cross.level1.theta"), 0.0);
}

TEST(Qcs, ModeSHasZeroThetaGradient) {
  ModelConfig cfg = small_config();
  cfg.matrix_mode = sd::MatrixMode::S;
  const Model model(cfg, 12);
  std::mt19937_64 rng(12);
  const auto q = random_quad(cfg, rng);
  const GraphOutput probe = model.forward_qcs(q);
  for (std::size_t lv = 0; lv < kLevels; ++lv) EXPECT_EQ(probe.stats.d_matrices[lv], 0);
  Tape tape;
  {
    TapeScope scope(tape);
    GraphOutput g = model.forward_qcs(q);
    BatchOutputs bo;
    for (std::size_t b = 0; b < 4; ++b) {
      bo.base_logits.push_back(g.base_logits[b]);
      bo.cross_logits.push_back(g.cross_logits[b]);
      bo.labels.push_back({q[b].label});
    }
    tape.backward(total_loss(bo, LossWeights{}, 4).total);
  }
  for (std::size_t lv = 0; lv < kLevels; ++lv) {
    const Tensor& theta = model.parameters().get("cross.level" + std::to_string(lv) + ".theta");
    for (double g : theta.grad()) EXPECT_EQ(g, 0.0);
  }
}

TEST(Sdpa, BuildsNoInteractionMatrices) {
  ModelConfig cfg = small_config(Topology::Dcs);
  cfg.attention = AttentionKind::Sdpa;
  const Model model(cfg, 13);
  std::mt19937_64 rng(13);
  const GraphOutput g = model.forward_dcs({random_patches(cfg, rng), 0}, {random_patches(cfg, rng), 0});
  for (std::size_t lv = 0; lv < kLevels; ++lv) EXPECT_EQ(g.stats.s_matrices[lv], 0);
  for (double v : g.cross_logits[0].values()) EXPECT_TRUE(std::isfinite(v));
}

// --- triplet control ---------------------------------------------------------------

TEST(Triplet, NegativeBranchIsUnsupervised) {
  const Model model(small_config(Topology::TripletControl), 14);
  std::mt19937_64 rng(14);
  const auto& cfg = model.config();
  const GraphOutput g =
      model.forward_triplet({ImageInput{random_patches(cfg, rng), 0}, ImageInput{random_patches(cfg, rng), 0},
                             ImageInput{random_patches(cfg, rng), 2}});
  EXPECT_TRUE(g.base_logits[0].defined());
  EXPECT_TRUE(g.cross_logits[1].defined());
  EXPECT_FALSE(g.base_logits[2].defined());
  EXPECT_FALSE(g.cross_logits[2].defined());
  for (std::size_t lv = 0; lv < kLevels; ++lv) {
    EXPECT_EQ(g.stats.s_matrices[lv], 1);
    EXPECT_EQ(g.stats.d_matrices[lv], 1);
  }
}

TEST(Triplet, FrozenNegativePathCarriesNoGradient) {
  ModelConfig cfg = small_config(Topology::TripletControl);
  cfg.frozen_neg = true;
  std::mt19937_64 rng(15);
  const std::array<ImageInput, 3> t{ImageInput{random_patches(cfg, rng), 0}, ImageInput{random_patches(cfg, rng), 0},
                                    ImageInput{random_patches(cfg, rng), 1}};
  auto grads = [&](const ModelConfig& c) {
    const Model model(c, 15);
    Tape tape;
    GraphOutput g;
    {
      TapeScope scope(tape);
      g = model.forward_triplet(t);
      BatchOutputs bo;
      for (std::size_t b = 0; b < 2; ++b) {
        bo.base_logits.push_back(g.base_logits[b]);
        bo.cross_logits.push_back(g.cross_logits[b]);
        bo.labels.push_back({t[b].label});
      }
      tape.backward(total_loss(bo, LossWeights{}, 2).total);
    }
    for (const auto& level : g.features[2]) EXPECT_EQ(level.requires_grad(), !c.frozen_neg);
    std::vector<double> all;
    for (const auto& e : model.parameters().entries())
      all.insert(all.end(), e.tensor.grad().begin(), e.tensor.grad().end());
    return all;
  };
  const auto frozen = grads(cfg);
  ModelConfig live = cfg;
  live.frozen_neg = false;
  const auto unfrozen = grads(live);
  // The frozen path removes the neg branch's share of the backbone gradient.
  EXPECT_GT(test::max_abs_diff(frozen, unfrozen), 0.0);
}

// --- residual identity -----------------------------------------------------------------

TEST(Residual, GapWithZeroCrossFeaturesPoolsBaseTokens) {
  ModelConfig cfg = small_config(Topology::Dcs);
  cfg.residual = ResidualKind::GapAdd;
  Model model(cfg, 16);
  for (int lv = 0; lv < 3; ++lv) {
    for (const char* part : {".v.weight", ".v.bias"}) {
      auto v = Tensor(model.parameters().get("cross.level" + std::to_string(lv) + part)).mutable_values();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
  std::mt19937_64 rng(16);
  const ImageInput a{random_patches(cfg, rng), 0}, p{random_patches(cfg, rng), 0};
  const GraphOutput g = model.forward_dcs(a, p);
  const Tensor tokens = concat_rows(std::span<const Tensor>(g.features[0].data(), kLevels));
  const auto& ps = model.parameters();
  const Tensor h = layer_norm_rows(mean_rows(tokens).reshape({1, cfg.channels}), ps.get("cross.norm.gamma"),
                                   ps.get("cross.norm.beta"));
  const Tensor logits = add_row_vector(matmul(h, ps.get("cross.classifier.weight")), ps.get("cross.classifier.bias"));
  EXPECT_LE(test::max_abs_diff(logits.values(), g.cross_logits[0].values()), 1e-12);
}

TEST(Residual, BilinearPoolOfOrthonormalMapsIsGram) {
  const Tensor a = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor out = bilinear_pool(a, a);
  const std::vector<double> expect{0.5, 0.0, 0.0, 0.5};
  EXPECT_LE(test::max_abs_diff(expect, out.values()), 1e-12);
}

// --- checkpoint ---------------------------------------------------------------------

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() /
                              ("csim_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                               ::testing::UnitTest::GetInstance()->current_test_info()->name());
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  for (auto t : {Topology::Baseline, Topology::Dcs, Topology::Qcs}) {
    ModelConfig cfg = small_config(t);
    cfg.residual = ResidualKind::BilinearPool;
    Model model(cfg, 21);
    Tensor(model.parameters().get("base.norm.beta")).mutable_values()[0] = 0.1 + 0.2;
    save_checkpoint(model, dir / "m.json");
    const Model back = load_checkpoint(dir / "m.json");
    EXPECT_EQ(back.seed(), 21u);
    EXPECT_EQ(model_config_to_string(back.config()), model_config_to_string(cfg));
    const auto& a = model.parameters().entries();
    const auto& b = back.parameters().entries();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].name, b[i].name);
      EXPECT_EQ(test::to_vec(a[i].tensor), test::to_vec(b[i].tensor));
    }
    std::mt19937_64 rng(21);
    const Tensor x = random_patches(cfg, rng);
    EXPECT_EQ(values_of(model.forward_inference(x)), values_of(back.forward_inference(x)));
    EXPECT_EQ(serialize_checkpoint(model), serialize_checkpoint(back));
  }
}

TEST_F(CheckpointTest, MismatchesFailLoudly) {
  const Model model(small_config(), 22);
  const std::string text = serialize_checkpoint(model);
  auto replaced = [&](const std::string& from, const std::string& to) {
    std::string t = text;
    const auto pos = t.find(from);
    EXPECT_NE(pos, std::string::npos) << from;
    if (pos != std::string::npos) t.replace(pos, from.size(), to);
    return t;
  };
  EXPECT_THROW(deserialize_checkpoint(replaced("\"version\": 1", "\"version\": 2")), ConfigError);
  EXPECT_THROW(deserialize_checkpoint(replaced("backbone.stage1.weight", "backbone.stageX.weight")), ConfigError);
  EXPECT_THROW(deserialize_checkpoint(replaced("\"csim-checkpoint\"", "\"other\"")), ConfigError);
  EXPECT_THROW(deserialize_checkpoint("{not json"), ConfigError);
  EXPECT_THROW(load_checkpoint(dir / "missing.json"), IoError);
}

TEST_F(CheckpointTest, ShapeMismatchFailsLoudly) {
  const Model model(small_config(), 23);
  std::string text = serialize_checkpoint(model);
  // Claim a different channel count in the stored config.
  const auto pos = text.find("\"channels\": 6");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 13, "\"channels\": 7");
  EXPECT_THROW(deserialize_checkpoint(text), ConfigError);
}

}  // namespace
}  // namespace csim

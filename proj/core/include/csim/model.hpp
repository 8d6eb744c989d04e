#pragma once

// Multi-branch cross-similarity networks.
//
// Every branch runs the same backbone stub and the same base classifier. In
// training topologies, branches are additionally paired through interaction
// matrices; each branch's cross features (its own values re-weighted by the
// aggregated interaction signal) feed a shared cross classifier that is
// residually connected to the base features. Inference only ever runs the
// base path of a single image.

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csim/attention.hpp"
#include "csim/fusion.hpp"
#include "csim/layers.hpp"
#include "csim/tensor.hpp"

namespace csim {

inline constexpr std::size_t kLevels = 3;

enum class Topology { Baseline, Dcs, Qcs, TripletControl };
enum class AttentionKind { Csa, Sdpa };
enum class ResidualKind { None, GapAdd, BilinearPool, VitAdd };

std::string_view to_string(Topology t);
std::string_view to_string(AttentionKind a);
std::string_view to_string(ResidualKind r);
Topology parse_topology(std::string_view text);
AttentionKind parse_attention(std::string_view text);
ResidualKind parse_residual(std::string_view text);

/// Number of branches a topology runs during training.
std::size_t branch_count(Topology t);

struct ModelConfig {
  std::size_t grid = 7;  // h = w of every feature map
  std::size_t patch = 8;  // pixel side of one grid cell
  std::size_t channels = 16;
  std::size_t qk_dim = 16;
  std::size_t mlp_hidden = 32;
  std::size_t classes = 7;
  Topology topology = Topology::Qcs;
  AttentionKind attention = AttentionKind::Csa;
  sd::MatrixMode matrix_mode = sd::MatrixMode::SD;
  ResidualKind residual = ResidualKind::VitAdd;
  double gamma = 1.0;
  double dropout = 0.0;  // cross transformer block only
  bool frozen_neg = false;  // triplet control: neg branch runs without gradients

  std::size_t positions() const { return grid * grid; }
  std::size_t image_side() const { return grid * patch; }
  void validate() const;
};

/// Rearranges a row-major side x side image into l = grid^2 rows of
/// patch^2 pixels, one row per grid cell.
Tensor patchify(std::span<const float> pixels, std::size_t side, std::size_t patch);

struct ImageInput {
  Tensor patches;  // l x patch^2
  int label = -1;
};

/// Per-branch, per-level attention snapshot (plain values, no graph).
struct AttentionRecord {
  std::vector<double> s_raw;    // aggregated S signal, empty if unused
  std::vector<double> d_raw;    // aggregated shifted-D signal, empty if unused
  std::vector<double> weights;  // softmax weights actually applied
};

struct ForwardStats {
  std::array<int, kLevels> s_matrices{};
  std::array<int, kLevels> d_matrices{};
  /// max |M(x,y) - M(y,x)^T| over audited pairings.
  double max_transpose_error = 0.0;
  /// max |sum(weights) - 1| over every applied attention vector.
  double max_weight_sum_error = 0.0;
};

struct GraphOutput {
  std::vector<Tensor> base_logits;   // per branch, 1 x K; undefined if unsupervised
  std::vector<Tensor> cross_logits;  // per branch, 1 x K; undefined if unsupervised
  std::vector<std::array<Tensor, kLevels>> features;  // backbone levels per branch
  std::vector<std::array<AttentionRecord, kLevels>> attention;
  std::array<double, kLevels> theta{};
  ForwardStats stats;
};

struct ForwardOptions {
  /// Non-null enables dropout in the cross block.
  std::mt19937_64* rng = nullptr;
  bool record_attention = false;
  /// Recompute every interaction matrix in the reverse orientation and record
  /// the transpose mismatch.
  bool audit = false;
};

/// Raw S/D aggregations and applied weights for one (key, query) image pair.
struct PairSignals {
  std::vector<double> s_key, s_query;
  std::vector<double> d_key, d_query;
  std::vector<double> s_key_weights, d_key_weights;
};

/// Ring of pairings used by each topology, in (key, query, kind) form over
/// branch indices anchor=0, pos=1, neg=2, neg2=3.
struct PairingSpec {
  std::size_t key;
  std::size_t query;
  char kind;  // 'S' or 'D'
};
std::vector<PairingSpec> topology_pairings(Topology t);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Deep copy with independent parameter storage.
  Model clone() const;

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  bool has_cross_module() const { return config_.topology != Topology::Baseline; }

  /// Single base branch; the only path used at test time.
  Tensor forward_inference(const Tensor& patches) const;
  Tensor forward_baseline(const ImageInput& image) const;
  GraphOutput forward_dcs(const ImageInput& anchor, const ImageInput& pos,
                          const ForwardOptions& options = {}) const;
  GraphOutput forward_qcs(const std::array<ImageInput, 4>& quad,
                          const ForwardOptions& options = {}) const;
  GraphOutput forward_triplet(const std::array<ImageInput, 3>& triple,
                              const ForwardOptions& options = {}) const;
  /// Dispatches on the configured topology; `branches` must hold
  /// branch_count(topology) images in role order.
  GraphOutput forward(std::span<const ImageInput> branches, const ForwardOptions& options = {}) const;

  /// S and D signals between two images at one level, with `key` on the
  /// key side. Requires a cross module.
  PairSignals pair_signals(const Tensor& key_patches, const Tensor& query_patches,
                           std::size_t level) const;

  /// Projected QK features of one image at one level.
  Tensor project_qk(const Tensor& patches, std::size_t level) const;

 private:
  struct Backbone {
    Linear stage[kLevels];
  };
  struct BaseHead {
    Tensor cls_token;
    TransformerBlock block;
    LayerNorm norm;
    Linear classifier;
  };
  struct CrossLevel {
    Linear qk;
    Linear v;
    sd::FusionParams fusion;
  };
  struct CrossHead {
    std::vector<CrossLevel> levels;
    TransformerBlock block;  // VitAdd only
    LayerNorm norm;
    Linear classifier;
  };

  void build(std::mt19937_64& rng);
  std::array<Tensor, kLevels> run_backbone(const Tensor& patches) const;
  static Tensor tokens_of(const std::array<Tensor, kLevels>& levels);
  Tensor run_base_head(const Tensor& tokens) const;
  Tensor run_cross_head(const Tensor& tokens, const Tensor& cross, std::mt19937_64* rng) const;
  GraphOutput run_graph(std::span<const ImageInput> images, const ForwardOptions& options) const;

  ModelConfig config_;
  std::uint64_t seed_;
  ParameterStore params_;
  Backbone backbone_;
  BaseHead base_;
  CrossHead cross_;
};

/// Label constraints of each topology's role order; throws ContractError.
void check_branch_labels(Topology t, std::span<const int> labels);

}  // namespace csim

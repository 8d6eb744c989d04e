#include "csim/model.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "csim/errors.hpp"
#include "csim/ops.hpp"

namespace csim {

std::string_view to_string(Topology t) {
  switch (t) {
    case Topology::Baseline: return "baseline";
    case Topology::Dcs: return "dcs";
    case Topology::Qcs: return "qcs";
    case Topology::TripletControl: return "triplet-control";
  }
  return "?";
}

std::string_view to_string(AttentionKind a) { return a == AttentionKind::Csa ? "csa" : "sdpa"; }

std::string_view to_string(ResidualKind r) {
  switch (r) {
    case ResidualKind::None: return "none";
    case ResidualKind::GapAdd: return "gap";
    case ResidualKind::BilinearPool: return "bp";
    case ResidualKind::VitAdd: return "vit";
  }
  return "?";
}

Topology parse_topology(std::string_view text) {
  if (text == "baseline") return Topology::Baseline;
  if (text == "dcs") return Topology::Dcs;
  if (text == "qcs") return Topology::Qcs;
  if (text == "triplet-control" || text == "triplet") return Topology::TripletControl;
  throw ConfigError("unknown topology '" + std::string(text) +
                    "' (expected baseline, dcs, qcs or triplet-control)");
}

AttentionKind parse_attention(std::string_view text) {
  if (text == "csa") return AttentionKind::Csa;
  if (text == "sdpa") return AttentionKind::Sdpa;
  throw ConfigError("unknown attention '" + std::string(text) + "' (expected csa or sdpa)");
}

ResidualKind parse_residual(std::string_view text) {
  if (text == "none") return ResidualKind::None;
  if (text == "gap") return ResidualKind::GapAdd;
  if (text == "bp") return ResidualKind::BilinearPool;
  if (text == "vit") return ResidualKind::VitAdd;
  throw ConfigError("unknown residual '" + std::string(text) + "' (expected none, gap, bp or vit)");
}

std::size_t branch_count(Topology t) {
  switch (t) {
    case Topology::Baseline: return 1;
    case Topology::Dcs: return 2;
    case Topology::Qcs: return 4;
    case Topology::TripletControl: return 3;
  }
  return 0;
}

std::vector<PairingSpec> topology_pairings(Topology t) {
  switch (t) {
    case Topology::Baseline: return {};
    case Topology::Dcs: return {{0, 1, 'S'}};
    // Ring anchor-pos (S), pos-neg (D), neg-neg2 (S), neg2-anchor (D). The
    // orientation is chosen so that relabeling (a,p,n,n2) -> (n,n2,a,p) maps
    // every pairing onto another pairing with the same orientation.
    case Topology::Qcs: return {{0, 1, 'S'}, {2, 1, 'D'}, {2, 3, 'S'}, {0, 3, 'D'}};
    case Topology::TripletControl: return {{0, 1, 'S'}, {0, 2, 'D'}};
  }
  return {};
}

void check_branch_labels(Topology t, std::span<const int> labels) {
  if (labels.size() != branch_count(t)) {
    throw ContractError("expected " + std::to_string(branch_count(t)) + " branch labels, got " +
                        std::to_string(labels.size()));
  }
  if (std::any_of(labels.begin(), labels.end(), [](int y) { return y < 0; })) return;  // unlabeled
  auto fail = [&](const char* what) {
    throw ContractError(std::string("sampling contract violated: ") + what);
  };
  switch (t) {
    case Topology::Baseline: break;
    case Topology::Dcs:
      if (labels[0] != labels[1]) fail("anchor and pos must share a label");
      break;
    case Topology::Qcs:
      if (labels[0] != labels[1]) fail("anchor and pos must share a label");
      if (labels[2] != labels[3]) fail("neg and neg2 must share a label");
      if (labels[0] == labels[2]) fail("anchor and neg must have different labels");
      break;
    case Topology::TripletControl:
      if (labels[0] != labels[1]) fail("anchor and pos must share a label");
      if (labels[0] == labels[2]) fail("anchor and neg must have different labels");
      break;
  }
}

void ModelConfig::validate() const {
  if (grid < 1 || patch < 1 || channels < 1 || qk_dim < 1 || mlp_hidden < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
  if (dropout < 0.0 || dropout > 0.4) throw ConfigError("dropout must be in [0, 0.4]");
  if (frozen_neg && topology != Topology::TripletControl) {
    throw ConfigError("frozen_neg only applies to the triplet-control topology");
  }
}

Tensor patchify(std::span<const float> pixels, std::size_t side, std::size_t patch) {
  if (pixels.size() != side * side) throw DimensionError("patchify: pixel count does not match side");
  if (side % patch != 0) throw DimensionError("patchify: side is not a multiple of the patch size");
  const std::size_t g = side / patch;
  const std::size_t width = patch * patch;
  std::vector<double> out(g * g * width);
  for (std::size_t cy = 0; cy < g; ++cy)
    for (std::size_t cx = 0; cx < g; ++cx) {
      double* dst = out.data() + (cy * g + cx) * width;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) {
          // centred so that mid-grey maps to zero
          dst[y * patch + x] =
              static_cast<double>(pixels[(cy * patch + y) * side + cx * patch + x]) - 0.5;
        }
    }
  return Tensor::matrix(g * g, width, std::move(out));
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

void Model::build(std::mt19937_64& rng) {
  const std::size_t c = config_.channels;
  const std::size_t in = config_.patch * config_.patch;
  for (std::size_t s = 0; s < kLevels; ++s) {
    backbone_.stage[s] = Linear::make(params_, "backbone.stage" + std::to_string(s),
                                      s == 0 ? in : c, c, rng);
  }
  std::normal_distribution<double> small(0.0, 0.02);
  std::vector<double> cls(c);
  for (auto& x : cls) x = small(rng);
  base_.cls_token = params_.add("base.cls_token", Tensor::matrix(1, c, std::move(cls)));
  base_.block = TransformerBlock::make(params_, "base.block", c, config_.mlp_hidden, 0.0, rng);
  base_.norm = LayerNorm::make(params_, "base.norm", c);
  base_.classifier = Linear::make(params_, "base.classifier", c, config_.classes, rng);

  if (!has_cross_module()) return;
  for (std::size_t lv = 0; lv < kLevels; ++lv) {
    const std::string p = "cross.level" + std::to_string(lv);
    CrossLevel level;
    level.qk = Linear::make(params_, p + ".qk", c, config_.qk_dim, rng);
    level.v = Linear::make(params_, p + ".v", c, c, rng);
    level.fusion.gamma = config_.gamma;
    level.fusion.theta = params_.add(p + ".theta", Tensor::scalar(0.0));
    cross_.levels.push_back(std::move(level));
  }
  if (config_.residual == ResidualKind::VitAdd) {
    cross_.block = TransformerBlock::make(params_, "cross.block", c, config_.mlp_hidden,
                                          config_.dropout, rng);
  }
  const std::size_t pooled = config_.residual == ResidualKind::BilinearPool ? c * c : c;
  cross_.norm = LayerNorm::make(params_, "cross.norm", pooled);
  cross_.classifier = Linear::make(params_, "cross.classifier", pooled, config_.classes, rng);
}

Model Model::clone() const {
  Model copy(config_, seed_);
  auto& dst = copy.params_.entries();
  const auto& src = params_.entries();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].tensor.values();
    auto to = dst[i].tensor.mutable_values();
    std::copy(from.begin(), from.end(), to.begin());
  }
  return copy;
}

std::array<Tensor, kLevels> Model::run_backbone(const Tensor& patches) const {
  if (patches.rows() != config_.positions() || patches.cols() != config_.patch * config_.patch) {
    throw ConfigError("input patches " + shape_str(patches.shape()) + " do not match the model grid");
  }
  std::array<Tensor, kLevels> levels;
  Tensor x = patches;
  for (std::size_t s = 0; s < kLevels; ++s) {
    x = gelu(backbone_.stage[s].forward(x));
    levels[s] = x;
  }
  return levels;
}

Tensor Model::tokens_of(const std::array<Tensor, kLevels>& levels) {
  return concat_rows(std::span<const Tensor>(levels.data(), levels.size()));
}

Tensor Model::run_base_head(const Tensor& tokens) const {
  const Tensor seq[] = {base_.cls_token, tokens};
  Tensor x = base_.block.forward(concat_rows(seq));
  Tensor cls = base_.norm.forward(slice_rows(x, 0, 1));
  return base_.classifier.forward(cls);
}

Tensor Model::run_cross_head(const Tensor& tokens, const Tensor& cross, std::mt19937_64* rng) const {
  Tensor pooled;
  switch (config_.residual) {
    case ResidualKind::None:
      pooled = mean_rows(cross);
      break;
    case ResidualKind::GapAdd:
      pooled = mean_rows(add(tokens, cross));
      break;
    case ResidualKind::BilinearPool: {
      Tensor z = add(tokens, cross);
      pooled = bilinear_pool(z, z);
      break;
    }
    case ResidualKind::VitAdd:
      pooled = mean_rows(add(tokens, cross_.block.forward(cross, rng)));
      break;
  }
  Tensor h = cross_.norm.forward(pooled.reshape({1, pooled.numel()}));
  return cross_.classifier.forward(h);
}

Tensor Model::project_qk(const Tensor& patches, std::size_t level) const {
  if (!has_cross_module()) throw ConfigError("baseline models have no cross module");
  if (level >= kLevels) throw IndexError("level out of range");
  auto levels = run_backbone(patches);
  return cross_.levels[level].qk.forward(levels[level]);
}

Tensor Model::forward_inference(const Tensor& patches) const {
  NoGradScope no_grad;
  return run_base_head(tokens_of(run_backbone(patches)));
}

Tensor Model::forward_baseline(const ImageInput& image) const {
  return run_base_head(tokens_of(run_backbone(image.patches)));
}

GraphOutput Model::forward_dcs(const ImageInput& anchor, const ImageInput& pos,
                               const ForwardOptions& options) const {
  if (config_.topology != Topology::Dcs) throw ConfigError("model is not configured as dcs");
  const ImageInput images[] = {anchor, pos};
  return forward(images, options);
}

GraphOutput Model::forward_qcs(const std::array<ImageInput, 4>& quad,
                               const ForwardOptions& options) const {
  if (config_.topology != Topology::Qcs) throw ConfigError("model is not configured as qcs");
  return forward(quad, options);
}

GraphOutput Model::forward_triplet(const std::array<ImageInput, 3>& triple,
                                   const ForwardOptions& options) const {
  if (config_.topology != Topology::TripletControl) {
    throw ConfigError("model is not configured as triplet-control");
  }
  return forward(triple, options);
}

GraphOutput Model::forward(std::span<const ImageInput> branches, const ForwardOptions& options) const {
  if (branches.size() != branch_count(config_.topology)) {
    throw ContractError("topology " + std::string(to_string(config_.topology)) + " needs " +
                        std::to_string(branch_count(config_.topology)) + " images");
  }
  std::vector<int> labels;
  for (const auto& b : branches) labels.push_back(b.label);
  check_branch_labels(config_.topology, labels);
  return run_graph(branches, options);
}

namespace {

double max_abs_transpose_diff(const Tensor& m, const Tensor& reverse) {
  const std::size_t r = m.rows(), c = m.cols();
  double worst = 0.0;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      worst = std::max(worst, std::abs(m.at(i, j) - reverse.at(j, i)));
  return worst;
}

std::vector<double> copy_values(const Tensor& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace

GraphOutput Model::run_graph(std::span<const ImageInput> images,
                             const ForwardOptions& options) const {
  const Topology topo = config_.topology;
  const std::size_t n = images.size();
  const double l = static_cast<double>(config_.positions());
  auto frozen = [&](std::size_t b) {
    return topo == Topology::TripletControl && config_.frozen_neg && b == 2;
  };
  auto supervised = [&](std::size_t b) { return !(topo == Topology::TripletControl && b == 2); };

  GraphOutput out;
  out.base_logits.resize(n);
  out.cross_logits.resize(n);
  out.features.resize(n);
  out.attention.resize(n);
  std::vector<Tensor> tokens(n);

  for (std::size_t b = 0; b < n; ++b) {
    std::optional<NoGradScope> freeze;
    if (frozen(b)) freeze.emplace();
    out.features[b] = run_backbone(images[b].patches);
    if (supervised(b)) {
      tokens[b] = tokens_of(out.features[b]);
      out.base_logits[b] = run_base_head(tokens[b]);
    }
  }
  if (!has_cross_module()) return out;

  const auto pairings = topology_pairings(topo);
  const sd::MatrixMode mode = config_.matrix_mode;
  const bool want_s = topo == Topology::Dcs || mode != sd::MatrixMode::D;
  const bool want_d = topo != Topology::Dcs && mode != sd::MatrixMode::S;
  std::vector<std::array<Tensor, kLevels>> attended(n);

  for (std::size_t lv = 0; lv < kLevels; ++lv) {
    const CrossLevel& level = cross_.levels[lv];
    out.theta[lv] = level.fusion.theta.item();
    std::vector<Tensor> qk(n), v(n);
    for (std::size_t b = 0; b < n; ++b) {
      std::optional<NoGradScope> freeze;
      if (frozen(b)) freeze.emplace();
      qk[b] = level.qk.forward(out.features[b][lv]);
      v[b] = level.v.forward(out.features[b][lv]);
    }

    if (config_.attention == AttentionKind::Sdpa) {
      for (std::size_t b = 0; b < n; ++b) {
        if (!supervised(b)) continue;
        std::size_t partner = b;
        for (const auto& p : pairings) {
          if (p.kind != 'S') continue;
          if (p.key == b) partner = p.query;
          if (p.query == b) partner = p.key;
        }
        attended[b][lv] = csa::sdpa_cross_attention(qk[b], qk[partner], v[partner]);
      }
      continue;
    }

    std::vector<std::optional<Tensor>> s_raw(n), d_raw(n);
    for (const auto& p : pairings) {
      const bool similarity = p.kind == 'S';
      if (similarity ? !want_s : !want_d) continue;
      // Rows: query positions, columns: key positions.
      Tensor dist = pairwise_euclidean(qk[p.query], qk[p.key]);
      if (options.audit) {
        NoGradScope no_grad;
        out.stats.max_transpose_error =
            std::max(out.stats.max_transpose_error,
                     max_abs_transpose_diff(dist, pairwise_euclidean(qk[p.key], qk[p.query])));
      }
      if (similarity) {
        Tensor s = add_scalar_tensor(scale(dist, -1.0), max_all(dist));
        s_raw[p.key] = csa::aggregate_key_side(s);
        s_raw[p.query] = csa::aggregate_query_side(s);
        ++out.stats.s_matrices[lv];
      } else {
        Tensor shifted = sd::min_shift_distance(dist);
        d_raw[p.key] = sd::aggregate_distance_key_side(shifted);
        d_raw[p.query] = sd::aggregate_distance_query_side(shifted);
        ++out.stats.d_matrices[lv];
      }
    }

    for (std::size_t b = 0; b < n; ++b) {
      if (!supervised(b)) continue;
      sd::MatrixMode effective = mode;
      if (topo == Topology::Dcs || !d_raw[b]) effective = sd::MatrixMode::S;
      if (!s_raw[b]) effective = sd::MatrixMode::D;
      Tensor raw = sd::select_matrix_mode(effective, s_raw[b], d_raw[b], level.fusion);
      Tensor scales = csa::spatial_scales(raw);
      attended[b][lv] = row_scale(v[b], scales);

      double total = 0.0;
      for (double x : scales.values()) total += x;
      out.stats.max_weight_sum_error =
          std::max(out.stats.max_weight_sum_error, std::abs(total / l - 1.0));
      if (options.record_attention) {
        AttentionRecord& rec = out.attention[b][lv];
        if (s_raw[b]) rec.s_raw = copy_values(*s_raw[b]);
        if (d_raw[b]) rec.d_raw = copy_values(*d_raw[b]);
        rec.weights = copy_values(scales);
        for (auto& w : rec.weights) w /= l;
      }
    }
  }

  for (std::size_t b = 0; b < n; ++b) {
    if (!supervised(b)) continue;
    Tensor cross = concat_rows(std::span<const Tensor>(attended[b].data(), kLevels));
    out.cross_logits[b] = run_cross_head(tokens[b], cross, options.rng);
  }
  return out;
}

PairSignals Model::pair_signals(const Tensor& key_patches, const Tensor& query_patches,
                                std::size_t level) const {
  NoGradScope no_grad;
  Tensor qk_key = project_qk(key_patches, level);
  Tensor qk_query = project_qk(query_patches, level);
  Tensor dist = pairwise_euclidean(qk_query, qk_key);
  Tensor s = csa::similarity_matrix(qk_query, qk_key).data;
  Tensor shifted = sd::min_shift_distance(dist);
  PairSignals sig;
  sig.s_key = copy_values(csa::aggregate_key_side(s));
  sig.s_query = copy_values(csa::aggregate_query_side(s));
  sig.d_key = copy_values(sd::aggregate_distance_key_side(shifted));
  sig.d_query = copy_values(sd::aggregate_distance_query_side(shifted));
  sig.s_key_weights = copy_values(softmax_vec(Tensor::vector(sig.s_key)));
  sig.d_key_weights = copy_values(softmax_vec(Tensor::vector(sig.d_key)));
  return sig;
}

}  // namespace csim

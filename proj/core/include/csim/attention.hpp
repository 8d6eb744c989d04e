#pragma once

// Cross Similarity Attention and the attention baselines it is compared to.
//
// Orientation convention used throughout: an interaction matrix M has one
// row per position of the *query* image and one column per position of the
// *key* image. Key-side aggregation yields one raw weight per key position,
// query-side aggregation one per query position.

#include <cstddef>

#include "csim/tensor.hpp"

namespace csim::csa {

/// l x c features of one image at one abstraction level, l = h * w.
struct FeatureMap {
  Tensor data;
  std::size_t height = 0;
  std::size_t width = 0;
  int level = 0;

  std::size_t positions() const { return height * width; }
  std::size_t channels() const { return data.cols(); }
};

/// Checks l == h * w and finiteness; throws ContractError otherwise.
void validate(const FeatureMap& map);

enum class MatrixKind { Distance, Similarity };

struct InteractionMatrix {
  Tensor data;
  MatrixKind kind = MatrixKind::Distance;
};

/// Raw Euclidean distances between query and key rows.
InteractionMatrix distance_matrix(const Tensor& q, const Tensor& k);

/// S = max(D) - D with D the Euclidean distance matrix and the maximum taken
/// over all entries.
InteractionMatrix similarity_matrix(const Tensor& q, const Tensor& k);
/// Same, checking that both maps come from the same abstraction level.
InteractionMatrix similarity_matrix(const FeatureMap& q, const FeatureMap& k);

/// Row-wise L2 normalization followed by a sum down each column: one raw
/// weight per key position.
Tensor aggregate_key_side(const Tensor& m);
/// Column-wise normalization followed by a sum along each row: one raw
/// weight per query position. Equal to aggregate_key_side(M^T).
Tensor aggregate_query_side(const Tensor& m);

/// Softmax over positions, rescaled by l so a uniform distribution is the
/// identity, then applied as a per-row scale of the branch's own values.
Tensor apply_spatial_attention(const Tensor& raw, const Tensor& v);
/// l * softmax(raw): the per-position multipliers apply_spatial_attention uses.
Tensor spatial_scales(const Tensor& raw);

/// softmax(q k^T / sqrt(d)) v: standard cross-attention where the weights
/// mix the *paired* image's values.
Tensor sdpa_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// (i, j) = <q_i, k_j> / (|q_i| |k_j|), norms guarded by 1e-12. Used only to
/// contrast similarity measures; not part of the trained model.
InteractionMatrix cosine_similarity_matrix(const Tensor& q, const Tensor& k);

/// q k^T, the unscaled dot-product interaction.
InteractionMatrix dot_product_matrix(const Tensor& q, const Tensor& k);

}  // namespace csim::csa

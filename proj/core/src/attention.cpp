#include "csim/attention.hpp"

#include <algorithm>
#include <cmath>
#include <vector>
#include <string>

#include "csim/errors.hpp"
#include "csim/ops.hpp"

namespace csim::csa {

void validate(const FeatureMap& map) {
  if (!map.data.defined() || map.data.rank() != 2) throw ContractError("feature map must be a matrix");
  if (map.data.rows() != map.positions()) {
    throw ContractError("feature map has " + std::to_string(map.data.rows()) +
                        " rows, expected h*w = " + std::to_string(map.positions()));
  }
  for (double x : map.data.values()) {
    if (!std::isfinite(x)) throw ContractError("feature map contains non-finite values");
  }
}

InteractionMatrix distance_matrix(const Tensor& q, const Tensor& k) {
  return {pairwise_euclidean(q, k), MatrixKind::Distance};
}

InteractionMatrix similarity_matrix(const Tensor& q, const Tensor& k) {
  if (q.rows() != k.rows()) {
    throw ContractError("similarity_matrix: position counts differ (" + std::to_string(q.rows()) +
                        " vs " + std::to_string(k.rows()) + ")");
  }
  Tensor d = pairwise_euclidean(q, k);
  return {add_scalar_tensor(scale(d, -1.0), max_all(d)), MatrixKind::Similarity};
}

InteractionMatrix similarity_matrix(const FeatureMap& q, const FeatureMap& k) {
  if (q.level != k.level) {
    throw ContractError("similarity_matrix: cannot compare level " + std::to_string(q.level) +
                        " with level " + std::to_string(k.level));
  }
  return similarity_matrix(q.data, k.data);
}

Tensor aggregate_key_side(const Tensor& m) {
  if (m.rank() != 2 || m.rows() != m.cols()) {
    throw DimensionError("aggregate_key_side: expected a square matrix, got " + shape_str(m.shape()));
  }
  return sum_rows(l2_normalize_rows(m));
}

Tensor aggregate_query_side(const Tensor& m) { return aggregate_key_side(transpose(m)); }

Tensor spatial_scales(const Tensor& raw) {
  // l * softmax(raw), evaluated as exp_i * (l / sum) so that a uniform input
  // yields exactly 1 at every position.
  detail::count_op();
  const std::size_t n = raw.numel();
  const double l = static_cast<double>(n);
  auto x = raw.values();
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> out(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(x[i] - mx);
    s += out[i];
  }
  const double factor = l / s;
  for (auto& v : out) v *= factor;
  Tensor result = Tensor::vector(std::move(out));
  Tensor in = raw;
  detail::maybe_record("spatial_scales", {in}, result, [in, result, n, l](std::span<const double> g) mutable {
    auto gi = in.grad_storage();
    auto y = result.values();
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
    dot /= l;
    for (std::size_t i = 0; i < n; ++i) gi[i] += y[i] * (g[i] - dot);
  });
  return result;
}

Tensor apply_spatial_attention(const Tensor& raw, const Tensor& v) {
  if (raw.numel() != v.rows()) {
    throw DimensionError("apply_spatial_attention: " + std::to_string(raw.numel()) +
                         " weights for " + std::to_string(v.rows()) + " positions");
  }
  return row_scale(v, spatial_scales(raw));
}

Tensor sdpa_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.cols() != k.cols()) throw DimensionError("sdpa_cross_attention: q/k width mismatch");
  if (k.rows() != v.rows()) throw DimensionError("sdpa_cross_attention: k/v length mismatch");
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return matmul(softmax_rows(scale(matmul(q, transpose(k)), s)), v);
}

InteractionMatrix cosine_similarity_matrix(const Tensor& q, const Tensor& k) {
  return {matmul(l2_normalize_rows(q), transpose(l2_normalize_rows(k))), MatrixKind::Similarity};
}

InteractionMatrix dot_product_matrix(const Tensor& q, const Tensor& k) {
  return {matmul(q, transpose(k)), MatrixKind::Similarity};
}

}  // namespace csim::csa

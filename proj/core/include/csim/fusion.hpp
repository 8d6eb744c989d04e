#pragma once

// Fusion of the intra-class similarity signal S with the inter-class distance
// signal D into the attention input SD = S + (1 + tanh(gamma * theta)) * D.

#include <optional>
#include <string>
#include <string_view>

#include "csim/tensor.hpp"

namespace csim::sd {

enum class MatrixMode { S, D, SD };

std::string_view to_string(MatrixMode mode);
MatrixMode parse_matrix_mode(std::string_view text);

struct FusionParams {
  /// Fixed positive hyperparameter.
  double gamma = 1.0;
  /// Learnable one-element tensor, initialised at 0.
  Tensor theta;

  static FusionParams make(double gamma = 1.0, double theta = 0.0);
};

/// D - min(D) with the minimum taken over all entries.
Tensor min_shift_distance(const Tensor& d);

/// Key-side aggregation of a shifted distance matrix. This is the very same
/// operator used for S, so both signals live on the same scale.
Tensor aggregate_distance_key_side(const Tensor& d_shifted);
Tensor aggregate_distance_query_side(const Tensor& d_shifted);

/// 1 + tanh(gamma * theta) as a one-element tensor, always in (0, 2).
Tensor gate(const FusionParams& params);

/// s_raw + gate * d_raw.
Tensor fuse_sd(const Tensor& s_raw, const Tensor& d_raw, const FusionParams& params);

/// S -> s_raw, D -> d_raw, SD -> fuse_sd. Throws ConfigError when the signal
/// a mode needs is missing.
Tensor select_matrix_mode(MatrixMode mode, const std::optional<Tensor>& s_raw,
                          const std::optional<Tensor>& d_raw, const FusionParams& params);

}  // namespace csim::sd

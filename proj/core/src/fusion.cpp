#include "csim/fusion.hpp"

#include "csim/attention.hpp"
#include "csim/errors.hpp"
#include "csim/ops.hpp"

namespace csim::sd {

std::string_view to_string(MatrixMode mode) {
  switch (mode) {
    case MatrixMode::S: return "s";
    case MatrixMode::D: return "d";
    case MatrixMode::SD: return "sd";
  }
  return "?";
}

MatrixMode parse_matrix_mode(std::string_view text) {
  if (text == "s" || text == "S") return MatrixMode::S;
  if (text == "d" || text == "D") return MatrixMode::D;
  if (text == "sd" || text == "SD") return MatrixMode::SD;
  throw ConfigError("unknown matrix mode '" + std::string(text) + "' (expected s, d or sd)");
}

FusionParams FusionParams::make(double gamma, double theta) {
  if (!(gamma > 0.0)) throw ConfigError("fusion gamma must be positive");
  return FusionParams{gamma, Tensor::scalar(theta, true)};
}

Tensor min_shift_distance(const Tensor& d) {
  return add_scalar_tensor(d, scale(min_all(d), -1.0));
}

Tensor aggregate_distance_key_side(const Tensor& d_shifted) {
  return csa::aggregate_key_side(d_shifted);
}

Tensor aggregate_distance_query_side(const Tensor& d_shifted) {
  return csa::aggregate_query_side(d_shifted);
}

Tensor gate(const FusionParams& params) {
  if (!(params.gamma > 0.0)) throw ConfigError("fusion gamma must be positive");
  return add_scalar(scalar_tanh(scale(params.theta, params.gamma)), 1.0);
}

Tensor fuse_sd(const Tensor& s_raw, const Tensor& d_raw, const FusionParams& params) {
  if (s_raw.numel() != d_raw.numel()) {
    throw DimensionError("fuse_sd: S has " + std::to_string(s_raw.numel()) + " entries, D has " +
                         std::to_string(d_raw.numel()));
  }
  return add(s_raw, mul_scalar_tensor(d_raw, gate(params)));
}

Tensor select_matrix_mode(MatrixMode mode, const std::optional<Tensor>& s_raw,
                          const std::optional<Tensor>& d_raw, const FusionParams& params) {
  const bool has_s = s_raw && s_raw->defined();
  const bool has_d = d_raw && d_raw->defined();
  switch (mode) {
    case MatrixMode::S:
      if (!has_s) throw ConfigError("matrix mode S needs the similarity signal");
      return *s_raw;
    case MatrixMode::D:
      if (!has_d) throw ConfigError("matrix mode D needs the distance signal");
      return *d_raw;
    case MatrixMode::SD:
      if (!has_s || !has_d) throw ConfigError("matrix mode SD needs both S and D signals");
      return fuse_sd(*s_raw, *d_raw, params);
  }
  throw ConfigError("unknown matrix mode");
}

}  // namespace csim::sd

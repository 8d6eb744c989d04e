#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "csim/gradcheck.hpp"
#include "csim/tensor.hpp"

namespace csim {

/// Ordered, named collection of trainable tensors. Layers keep handles to the
/// tensors registered here, so updating values through the store updates the
/// layers.
class ParameterStore {
 public:
  Tensor add(std::string name, Tensor value);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<NamedTensor>& entries() { return entries_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t total_size() const;
  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  static Linear make(ParameterStore& store, const std::string& name, std::size_t in,
                     std::size_t out, std::mt19937_64& rng);
  /// x[n x in] -> [n x out]
  Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm make(ParameterStore& store, const std::string& name, std::size_t width);
  Tensor forward(const Tensor& x) const;
};

/// Pre-norm single-head encoder block: x + Attn(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNorm norm1;
  Linear query, key, value, out;
  LayerNorm norm2;
  Linear fc1, fc2;
  double dropout = 0.0;

  static TransformerBlock make(ParameterStore& store, const std::string& name, std::size_t width,
                               std::size_t hidden, double dropout, std::mt19937_64& rng);
  /// Dropout is applied only when `rng` is non-null.
  Tensor forward(const Tensor& x, std::mt19937_64* rng = nullptr) const;
};

}  // namespace csim

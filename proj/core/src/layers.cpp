#include "csim/layers.hpp"

#include <algorithm>
#include <cmath>

#include "csim/errors.hpp"
#include "csim/ops.hpp"

namespace csim {

Tensor ParameterStore::add(std::string name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  entries_.push_back({std::move(name), value});
  return value;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw ConfigError("no parameter named '" + name + "'");
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const NamedTensor& e) { return e.name == name; });
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Linear Linear::make(ParameterStore& store, const std::string& name, std::size_t in,
                    std::size_t out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(in * out);
  for (auto& x : w) x = dist(rng);
  Linear layer;
  layer.weight = store.add(name + ".weight", Tensor::matrix(in, out, std::move(w)));
  layer.bias = store.add(name + ".bias", Tensor::zeros({out}));
  return layer;
}

Tensor Linear::forward(const Tensor& x) const {
  return add_row_vector(matmul(x, weight), bias);
}

LayerNorm LayerNorm::make(ParameterStore& store, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Tensor::full({width}, 1.0));
  ln.beta = store.add(name + ".beta", Tensor::zeros({width}));
  return ln;
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm_rows(x, gamma, beta); }

TransformerBlock TransformerBlock::make(ParameterStore& store, const std::string& name,
                                        std::size_t width, std::size_t hidden, double dropout,
                                        std::mt19937_64& rng) {
  TransformerBlock b;
  b.norm1 = LayerNorm::make(store, name + ".norm1", width);
  b.query = Linear::make(store, name + ".query", width, width, rng);
  b.key = Linear::make(store, name + ".key", width, width, rng);
  b.value = Linear::make(store, name + ".value", width, width, rng);
  b.out = Linear::make(store, name + ".out", width, width, rng);
  b.norm2 = LayerNorm::make(store, name + ".norm2", width);
  b.fc1 = Linear::make(store, name + ".fc1", width, hidden, rng);
  b.fc2 = Linear::make(store, name + ".fc2", hidden, width, rng);
  b.dropout = dropout;
  return b;
}

Tensor TransformerBlock::forward(const Tensor& x, std::mt19937_64* rng) const {
  auto drop = [&](const Tensor& t) { return rng ? csim::dropout(t, dropout, *rng) : t; };
  Tensor h = norm1.forward(x);
  Tensor q = query.forward(h);
  Tensor k = key.forward(h);
  Tensor v = value.forward(h);
  const double s = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Tensor attn = matmul(softmax_rows(scale(matmul(q, transpose(k)), s)), v);
  Tensor y = add(x, drop(out.forward(attn)));
  Tensor m = fc2.forward(gelu(fc1.forward(norm2.forward(y))));
  return add(y, drop(m));
}

}  // namespace csim

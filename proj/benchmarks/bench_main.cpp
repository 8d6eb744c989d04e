#include <benchmark/benchmark.h>

#include <random>

#include "csim/attention.hpp"
#include "csim/model.hpp"
#include "csim/ops.hpp"

namespace {

csim::Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<double> v(r * c);
  for (auto& x : v) x = n(rng);
  return csim::Tensor::matrix(r, c, std::move(v));
}

void BM_PairwiseEuclidean(benchmark::State& state) {
  const auto l = static_cast<std::size_t>(state.range(0));
  const auto q = random_matrix(l, 16, 1), k = random_matrix(l, 16, 2);
  for (auto _ : state) benchmark::DoNotOptimize(csim::pairwise_euclidean(q, k));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_PairwiseEuclidean)->Arg(16)->Arg(49)->Arg(196)->Complexity();

void BM_CsaWeights(benchmark::State& state) {
  const auto l = static_cast<std::size_t>(state.range(0));
  const auto q = random_matrix(l, 16, 1), k = random_matrix(l, 16, 2), v = random_matrix(l, 16, 3);
  for (auto _ : state) {
    auto s = csim::csa::similarity_matrix(q, k).data;
    benchmark::DoNotOptimize(csim::csa::apply_spatial_attention(csim::csa::aggregate_key_side(s), v));
  }
}
BENCHMARK(BM_CsaWeights)->Arg(16)->Arg(49);

void BM_Inference(benchmark::State& state) {
  csim::ModelConfig cfg;
  cfg.topology = csim::Topology::Qcs;
  const csim::Model model(cfg, 1);
  const auto patches = random_matrix(cfg.positions(), cfg.patch * cfg.patch, 4);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward_inference(patches));
}
BENCHMARK(BM_Inference);

void BM_QcsTrainStep(benchmark::State& state) {
  csim::ModelConfig cfg;
  cfg.grid = 4;
  const csim::Model model(cfg, 1);
  std::array<csim::ImageInput, 4> quad;
  const int labels[] = {0, 0, 1, 1};
  for (std::size_t b = 0; b < 4; ++b) quad[b] = {random_matrix(cfg.positions(), cfg.patch * cfg.patch, b), labels[b]};
  for (auto _ : state) {
    csim::Tape tape;
    csim::TapeScope scope(tape);
    auto g = model.forward_qcs(quad);
    csim::Tensor loss = csim::cross_entropy(g.base_logits[0], std::span<const int>(labels, 1));
    tape.backward(loss);
  }
}
BENCHMARK(BM_QcsTrainStep);

}  // namespace
BENCHMARK_MAIN();

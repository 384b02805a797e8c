#include <benchmark/benchmark.h>

#include <random>

#include "spikmamba/model.hpp"
#include "spikmamba/ops.hpp"
#include "spikmamba/snn.hpp"

using namespace spikmamba;

static void BM_MatmulTokensByWeight(benchmark::State& state) {
  std::mt19937_64 rng(0);
  auto tokens = static_cast<std::int64_t>(state.range(0));
  Tensor a = Tensor::rand_uniform({tokens, 64}, DType::F32, rng, -1, 1);
  Tensor w = Tensor::rand_uniform({64, 64}, DType::F32, rng, -1, 1);
  for (auto _ : state) {
    Tensor y = matmul(a, w);
    benchmark::DoNotOptimize(y.data<float>());
  }
  state.SetItemsProcessed(state.iterations() * tokens * 64 * 64);
}
BENCHMARK(BM_MatmulTokensByWeight)->Arg(512)->Arg(4096)->Arg(16384);

static void BM_Conv3dPatchify(benchmark::State& state) {
  std::mt19937_64 rng(0);
  Tensor x = Tensor::rand_uniform({1, 3, 8, 64, 64}, DType::F32, rng, 0, 1);
  Tensor w = Tensor::rand_uniform({64, 3, 1, 8, 8}, DType::F32, rng, -1, 1);
  for (auto _ : state) {
    Tensor y = conv3d(x, w, {1, 8, 8});
    benchmark::DoNotOptimize(y.data<float>());
  }
}
BENCHMARK(BM_Conv3dPatchify);

static void BM_LifSequence(benchmark::State& state) {
  std::mt19937_64 rng(0);
  LifConfig cfg;
  Tensor x = Tensor::rand_uniform({8, static_cast<std::int64_t>(state.range(0))}, DType::F32, rng,
                                  -2, 2);
  for (auto _ : state) {
    SpikeTensor s = lif_sequence(x, cfg);
    benchmark::DoNotOptimize(s.values.data<float>());
  }
  state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_LifSequence)->Arg(4096)->Arg(65536);

static void BM_LinearAttention(benchmark::State& state) {
  std::mt19937_64 rng(0);
  auto l = static_cast<std::int64_t>(state.range(0));
  std::bernoulli_distribution bit(0.15);
  std::vector<double> qv(static_cast<std::size_t>(l * 64)), kv(qv.size());
  for (auto& e : qv) e = bit(rng) ? 1.0 : 0.0;
  for (auto& e : kv) e = bit(rng) ? 1.0 : 0.0;
  Tensor q = Tensor::from_values({1, l, 64}, qv, DType::F32);
  Tensor k = Tensor::from_values({1, l, 64}, kv, DType::F32);
  Tensor v = Tensor::rand_uniform({1, l, 64}, DType::F32, rng, -1, 1);
  for (auto _ : state) {
    Tensor y = linear_attention(q, k, v);
    benchmark::DoNotOptimize(y.data<float>());
  }
  state.SetItemsProcessed(state.iterations() * l);
}
BENCHMARK(BM_LinearAttention)->Arg(256)->Arg(1024);

static void BM_SelectiveScan(benchmark::State& state) {
  std::mt19937_64 rng(0);
  auto l = static_cast<std::int64_t>(state.range(0));
  Tensor u = Tensor::rand_uniform({1, l, 128}, DType::F32, rng, 0, 1);
  Tensor a_bar = Tensor::rand_uniform({1, l, 128, 16}, DType::F32, rng, 0, 1);
  Tensor b_bar = Tensor::rand_uniform({1, l, 128, 16}, DType::F32, rng, -1, 1);
  Tensor c = Tensor::rand_uniform({1, l, 16}, DType::F32, rng, -1, 1);
  for (auto _ : state) {
    Tensor y = selective_scan(u, a_bar, b_bar, c);
    benchmark::DoNotOptimize(y.data<float>());
  }
  state.SetItemsProcessed(state.iterations() * l * 128 * 16);
}
BENCHMARK(BM_SelectiveScan)->Arg(128)->Arg(512);

static void BM_FusedZohScan(benchmark::State& state) {
  std::mt19937_64 rng(0);
  auto l = static_cast<std::int64_t>(state.range(0));
  Tensor u = Tensor::rand_uniform({1, l, 128}, DType::F32, rng, 0, 1);
  Tensor delta = Tensor::rand_uniform({1, l, 128}, DType::F32, rng, 0.001, 0.1);
  Tensor a = Tensor::rand_uniform({128, 16}, DType::F32, rng, -2, -0.1);
  Tensor b = Tensor::rand_uniform({1, l, 16}, DType::F32, rng, -1, 1);
  Tensor c = Tensor::rand_uniform({1, l, 16}, DType::F32, rng, -1, 1);
  for (auto _ : state) {
    Tensor y = ssm_zoh_scan(u, delta, a, b, c);
    benchmark::DoNotOptimize(y.data<float>());
  }
  state.SetItemsProcessed(state.iterations() * l * 128 * 16);
}
BENCHMARK(BM_FusedZohScan)->Arg(128)->Arg(512);

BENCHMARK_MAIN();

#include <benchmark/benchmark.h>

#include <random>

#include "spikmamba/model.hpp"
#include "spikmamba/train.hpp"

using namespace spikmamba;

static Tensor random_frames(std::int64_t batch, const ModelConfig& cfg, std::mt19937_64& rng) {
  return Tensor::rand_uniform({batch, 3, cfg.t_frames, cfg.input_h, cfg.input_w}, DType::F32, rng,
                              0.0, 1.0);
}

static void BM_DeskForward(benchmark::State& state) {
  std::mt19937_64 rng(0);
  ModelConfig cfg = ModelConfig::desk();
  SpikMambaModel model(cfg, DType::F32, 0);
  Tensor x = random_frames(state.range(0), cfg, rng);
  NoGradScope ng;
  for (auto _ : state) {
    Tensor logits = model.forward(x, false);
    benchmark::DoNotOptimize(logits.data<float>());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DeskForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_DeskTrainStep(benchmark::State& state) {
  std::mt19937_64 rng(0);
  ModelConfig cfg = ModelConfig::desk();
  SpikMambaModel model(cfg, DType::F32, 0);
  auto batch = static_cast<std::int64_t>(state.range(0));
  Tensor x = random_frames(batch, cfg, rng);
  std::vector<int> labels;
  for (std::int64_t i = 0; i < batch; ++i) labels.push_back(static_cast<int>(i % 4));
  Adam adam(model.parameters(), AdamConfig{});
  for (auto _ : state) {
    Tape tape;
    {
      TapeScope scope(tape);
      Tensor loss = cross_entropy(model.forward(x, true), labels);
      tape.backward(loss);
    }
    adam.step(1e-4);
    adam.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_DeskTrainStep)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

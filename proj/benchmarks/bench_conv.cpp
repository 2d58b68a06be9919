#include <benchmark/benchmark.h>

#include "patchgd/ops.hpp"
#include "patchgd/random.hpp"
#include "patchgd/tensor.hpp"

using namespace patchgd;

static void BM_Conv2dForward(benchmark::State& state) {
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const std::size_t channels = static_cast<std::size_t>(state.range(1));
  const std::size_t size = static_cast<std::size_t>(state.range(2));
  const std::size_t filters = static_cast<std::size_t>(state.range(3));
  Rng rng(1);
  auto x = Tensor<float>::uniform({batch, channels, size, size}, rng, -1.0, 1.0);
  auto w = Tensor<float>::uniform({filters, channels, 3, 3}, rng, -0.3, 0.3);
  auto b = Tensor<float>::zeros({filters});
  for (auto _ : state) {
    NoGradGuard no_grad;
    auto y = conv2d(x, w, b, 2, 1);
    benchmark::DoNotOptimize(y.values().data());
  }
  const std::size_t out = size / 2;
  state.SetItemsProcessed(state.iterations() * batch);
  state.counters["GFLOPs"] = benchmark::Counter(
      static_cast<double>(2 * batch * filters * channels * 9 * out * out) * state.iterations(),
      benchmark::Counter::kIsRate, benchmark::Counter::OneK::kIs1000);
}
BENCHMARK(BM_Conv2dForward)
    ->Args({52, 1, 32, 8})
    ->Args({52, 8, 16, 16})
    ->Args({52, 16, 8, 16})
    ->Args({1, 1, 128, 8})
    ->Args({8, 8, 64, 16});

static void BM_Conv2dBackward(benchmark::State& state) {
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  auto x = Tensor<float>::uniform({batch, 8, 16, 16}, rng, -1.0, 1.0, true);
  auto w = Tensor<float>::uniform({16, 8, 3, 3}, rng, -0.3, 0.3, true);
  auto b = Tensor<float>::zeros({16}, true);
  for (auto _ : state) {
    auto loss = sum(conv2d(x, w, b, 2, 1));
    loss.backward();
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_Conv2dBackward)->Arg(4)->Arg(16)->Arg(52);

static void BM_MaxPool(benchmark::State& state) {
  Rng rng(3);
  auto x = Tensor<float>::uniform({16, 16, 32, 32}, rng, -1.0, 1.0);
  for (auto _ : state) {
    NoGradGuard no_grad;
    auto y = max_pool2d(x, 2, 2);
    benchmark::DoNotOptimize(y.values().data());
  }
}
BENCHMARK(BM_MaxPool);

static void BM_SoftmaxCrossEntropy(benchmark::State& state) {
  Rng rng(4);
  auto logits = Tensor<float>::uniform({256, 10}, rng, -3.0, 3.0, true);
  std::vector<int> labels(256);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<int>(rng.below(10));
  }
  for (auto _ : state) {
    auto loss = softmax_cross_entropy(logits, labels);
    loss.backward();
    logits.zero_grad();
  }
}
BENCHMARK(BM_SoftmaxCrossEntropy);

BENCHMARK_MAIN();

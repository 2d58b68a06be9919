#include <benchmark/benchmark.h>

#include "patchgd/data.hpp"
#include "patchgd/trainer.hpp"
#include "patchgd/zblock.hpp"

using namespace patchgd;

namespace {

TrainConfig desk_config() {
  TrainConfig cfg;
  cfg.patch_size = 32;
  cfg.embed_dim = 16;
  cfg.head_channels = 16;
  cfg.backbone_channels = {8, 16, 16, 16, 16};
  cfg.inner_iters = 8;
  cfg.patches_per_iter = 2;
  cfg.batch_size = 16;
  cfg.seed = 5;
  return cfg;
}

std::vector<Tensor<float>> desk_images(std::size_t count) {
  DigitBank bank = procedural_digits();
  GenerateConfig gc{.count = count, .image_size = 128, .seed = 11};
  Dataset ds = generate_ultramnist(bank, gc);
  std::vector<Tensor<float>> images;
  for (auto& s : ds.samples) images.push_back(s.image);
  return images;
}

}  // namespace

static void BM_ZFill(benchmark::State& state) {
  TrainConfig cfg = desk_config();
  auto model = PatchGDModel<float>::build(cfg, 1);
  auto images = desk_images(static_cast<std::size_t>(state.range(0)));
  GridSpec grid = GridSpec::for_image(128, 128, 32);
  for (auto _ : state) {
    ZBlock<float> z(images.size(), grid, cfg.embed_dim);
    z.fill(images, [&](const Tensor<float>& p) { return model.features.forward(p); });
    benchmark::DoNotOptimize(z.values().values().data());
  }
  state.SetItemsProcessed(state.iterations() * images.size());
}
BENCHMARK(BM_ZFill)->Arg(4)->Arg(16);

static void BM_PatchGDOuterIteration(benchmark::State& state) {
  TrainConfig cfg = desk_config();
  cfg.batch_size = static_cast<std::size_t>(state.range(0));
  auto model = PatchGDModel<float>::build(cfg, 1);
  auto params = model.parameters();
  Adam<float> opt(params, cfg.adam);
  GradAccumulator<float> accum(params);
  auto images = desk_images(cfg.batch_size);
  std::vector<int> labels(images.size(), 3);
  std::uint64_t outer = 0;
  for (auto _ : state) {
    auto result = patchgd_outer_iteration(images, labels, model, opt, accum, cfg,
                                          1e-3, derive_seed(9, outer++));
    benchmark::DoNotOptimize(result.mean_loss);
  }
  state.SetItemsProcessed(state.iterations() * images.size());
}
BENCHMARK(BM_PatchGDOuterIteration)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

static void BM_GDIteration(benchmark::State& state) {
  TrainConfig cfg = desk_config();
  cfg.mode = TrainMode::kGD;
  cfg.batch_size = static_cast<std::size_t>(state.range(0));
  auto model = build_composite<float>(cfg, 1, 128);
  auto params = model.parameters();
  Adam<float> opt(params, cfg.adam);
  auto images = desk_images(cfg.batch_size);
  std::vector<int> labels(images.size(), 3);
  auto batch = stack(images);
  for (auto _ : state) {
    auto result = gd_iteration(batch, labels, model, opt, 1e-3);
    benchmark::DoNotOptimize(result.loss);
  }
  state.SetItemsProcessed(state.iterations() * images.size());
}
BENCHMARK(BM_GDIteration)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_Inference(benchmark::State& state) {
  TrainConfig cfg = desk_config();
  auto model = PatchGDModel<float>::build(cfg, 1);
  auto images = desk_images(8);
  for (auto _ : state) {
    auto probs = patchgd_infer_batch(images, model);
    benchmark::DoNotOptimize(probs.values().data());
  }
  state.SetItemsProcessed(state.iterations() * images.size());
}
BENCHMARK(BM_Inference);

static void BM_GenerateSample(benchmark::State& state) {
  DigitBank bank = procedural_digits();
  GenerateConfig gc{.count = 1, .image_size = 128, .seed = 0};
  std::uint64_t seed = 0;
  for (auto _ : state) {
    gc.seed = seed++;
    Dataset ds = generate_ultramnist(bank, gc);
    benchmark::DoNotOptimize(ds.samples[0].image.values().data());
  }
}
BENCHMARK(BM_GenerateSample);

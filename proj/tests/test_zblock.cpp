#include <doctest.h>
#include <filesystem>
#include <vector>

#include "patchgd/model.hpp"
#include "patchgd/ops.hpp"
#include "patchgd/tensor_record.hpp"
#include "patchgd/zblock.hpp"
#include "support/fd_check.hpp"

using namespace patchgd;
using patchgd::testing::check_gradients;

namespace {

// Mean-of-patch stub embedder: every embedding entry is the patch mean.
template <typename S>
auto mean_stub(std::size_t embed_dim) {
  return [embed_dim](const Tensor<S>& patches) {
    const std::size_t k = patches.dim(0);
    const std::size_t per = patches.size() / k;
    std::vector<S> out(k * embed_dim);
    for (std::size_t i = 0; i < k; ++i) {
      S acc = S(0);
      for (std::size_t j = 0; j < per; ++j) acc += patches.value_at(i * per + j);
      for (std::size_t e = 0; e < embed_dim; ++e) {
        out[i * embed_dim + e] = acc / static_cast<S>(per);
      }
    }
    return Tensor<S>::from_values({k, embed_dim}, std::move(out));
  };
}

}  // namespace

TEST_CASE("fill with a mean stub maps a constant image to constant cells") {
  GridSpec grid{64, 64, 16};
  ZBlock<float> z(1, grid, 4);
  z.fill({Tensor<float>::filled({1, 64, 64}, 3.0f)}, mean_stub<float>(4));
  CHECK(z.filled());
  for (float v : z.values().values()) CHECK(v == doctest::Approx(3.0f));
  CHECK(z.active_count() == 0);
  for (auto m : z.active_mask()) CHECK(m == 0);
}

TEST_CASE("a 512x512 image at p=256 yields a 2x2xs grid") {
  GridSpec grid = GridSpec::for_image(512, 512, 256);
  ZBlock<float> z(1, grid, 8);
  z.fill({Tensor<float>::zeros({1, 512, 512})}, mean_stub<float>(8));
  CHECK(z.values().shape() == Shape{1, 2, 2, 8});
}

TEST_CASE("fill order cannot matter: per-cell embedding matches the batched fill") {
  Rng rng(31);
  FeatureExtractor<float> f(8, 1, 4, {4, 4, 4}, rng);
  auto img = Tensor<float>::uniform({1, 24, 16}, rng, 0.0, 1.0);
  GridSpec grid = GridSpec::for_image(24, 16, 8);

  ZBlock<float> z(1, grid, 4);
  z.fill({img}, [&f](const Tensor<float>& p) { return f.forward(p); }, 3);

  // Recompute each cell independently, in reverse order, one patch at a time.
  NoGradGuard no_grad;
  for (std::size_t cell = grid.cell_count(); cell-- > 0;) {
    const std::size_t r = cell / grid.cols(), c = cell % grid.cols();
    auto single = f.forward(stack<float>({extract_patch(img, r, c, 8)}));
    for (std::size_t e = 0; e < 4; ++e) {
      CHECK(single.value_at(e) ==
            z.values().value_at((r * grid.cols() + c) * 4 + e));
    }
  }
}

TEST_CASE("two fills with unchanged parameters are bit-identical") {
  Rng rng(32);
  FeatureExtractor<float> f(8, 1, 4, {4, 4, 4}, rng);
  auto img = Tensor<float>::uniform({1, 16, 16}, rng, 0.0, 1.0);
  GridSpec grid = GridSpec::for_image(16, 16, 8);
  ZBlock<float> a(1, grid, 4), b(1, grid, 4);
  a.fill({img}, [&f](const Tensor<float>& p) { return f.forward(p); });
  b.fill({img}, [&f](const Tensor<float>& p) { return f.forward(p); });
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    CHECK(a.values().value_at(i) == b.values().value_at(i));
  }
}

TEST_CASE("update marks exactly the listed cells active") {
  GridSpec grid{32, 32, 16};
  ZBlock<float> z(1, grid, 4);
  auto img = Tensor<float>::filled({1, 32, 32}, 1.0f);
  z.fill({img}, mean_stub<float>(4));

  PatchBatch<float> batch;
  batch.positions = {{1, 0}};
  batch.patches = {extract_patch(img, 1, 0, 16)};
  z.update(std::vector<PatchBatch<float>>{batch}, mean_stub<float>(4));

  CHECK(z.active_count() == 1);
  std::size_t active = 0;
  for (std::size_t i = 0; i < z.active_mask().size(); ++i) {
    if (z.active_mask()[i]) {
      ++active;
      CHECK(i == 1 * grid.cols() + 0);
    }
  }
  CHECK(active == 1);
  CHECK(z.staleness()[grid.cols()] == 0);  // refreshed cell
  CHECK(z.staleness()[0] == 1);            // stale cell aged by one update
}

TEST_CASE("update rejects duplicate cells in one call") {
  GridSpec grid{32, 32, 16};
  ZBlock<float> z(1, grid, 4);
  auto img = Tensor<float>::filled({1, 32, 32}, 1.0f);
  z.fill({img}, mean_stub<float>(4));
  PatchBatch<float> batch;
  batch.positions = {{0, 1}, {0, 1}};
  batch.patches = {extract_patch(img, 0, 1, 16), extract_patch(img, 0, 1, 16)};
  CHECK_THROWS_AS(z.update(std::vector<PatchBatch<float>>{batch}, mean_stub<float>(4)),
                  ValueError);
}

TEST_CASE("read before fill is a state error; update before fill too") {
  GridSpec grid{32, 32, 16};
  ZBlock<float> z(1, grid, 4);
  CHECK_THROWS_AS(z.read(), StateError);
  CHECK_THROWS_AS(z.update({PatchBatch<float>{}}, mean_stub<float>(4)), StateError);
}

TEST_CASE("read combines detached stale cells with live active cells") {
  Rng rng(33);
  FeatureExtractor<float> f(8, 1, 4, {4, 4, 4}, rng);
  auto img = Tensor<float>::uniform({1, 16, 16}, rng, 0.0, 1.0);
  GridSpec grid = GridSpec::for_image(16, 16, 8);
  ZBlock<float> z(1, grid, 4);
  auto embed = [&f](const Tensor<float>& p) { return f.forward(p); };
  z.fill({img}, embed);

  // After fill only: fully detached.
  auto detached = z.read();
  CHECK_FALSE(detached.requires_grad());

  PatchBatch<float> batch;
  batch.positions = {{0, 0}};
  batch.patches = {extract_patch(img, 0, 0, 8)};
  z.update(std::vector<PatchBatch<float>>{batch}, embed);
  auto live = z.read();
  CHECK(live.requires_grad());

  // The active cell equals the fresh f output; stale cells kept their values.
  NoGradGuard no_grad;
  auto fresh = f.forward(stack<float>({extract_patch(img, 0, 0, 8)}));
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(live.value_at(e) == fresh.value_at(e));
  }
  double read_sum = 0.0, cell_sum = 0.0;
  for (std::size_t i = 0; i < live.size(); ++i) read_sum += live.value_at(i);
  for (std::size_t i = 0; i < z.values().size(); ++i) cell_sum += z.values().value_at(i);
  CHECK(read_sum == doctest::Approx(cell_sum).epsilon(1e-6));
}

TEST_CASE("gradient masking: backward reaches theta1 only through active cells") {
  Rng rng(34);
  FeatureExtractor<double> f(8, 1, 3, {4, 4, 4}, rng);
  HeadNet<double> head(3, 5, 4, rng);
  auto img = Tensor<double>::uniform({1, 24, 24}, rng, 0.0, 1.0);
  GridSpec grid = GridSpec::for_image(24, 24, 8);  // 3x3 grid
  const std::vector<int> labels{2};

  ZBlock<double> z(1, grid, 3);
  auto embed = [&f](const Tensor<double>& p) { return f.forward(p); };
  z.fill({img}, embed);

  // Freeze the stale grid for the isolated-graph oracle.
  auto frozen = z.values().detach();

  PatchBatch<double> batch;
  batch.positions = {{0, 1}, {2, 2}};
  batch.patches = {extract_patch(img, 0, 1, 8), extract_patch(img, 2, 2, 8)};
  auto patches = stack<double>(batch.patches);
  const std::vector<GridPos> positions{{0, 0, 1}, {0, 2, 2}};

  // Full pipeline gradient.
  z.update(std::vector<PatchBatch<double>>{batch}, embed);
  auto loss = softmax_cross_entropy(head.forward_grid(z.read()), labels);
  loss.backward();
  auto f_params = f.parameters("f");
  std::vector<std::vector<double>> pipeline_grads;
  for (auto& p : f_params) {
    REQUIRE(p.tensor.has_grad());
    pipeline_grads.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    p.tensor.zero_grad();
  }
  for (auto p : head.parameters("g")) p.tensor.zero_grad();

  // Isolated graph: only the two active patches are live; stale cells are
  // constants. Analytic gradients must agree with the pipeline's, and the
  // finite-difference oracle must confirm them.
  auto isolated_loss = [&]() {
    auto cells = f.forward(patches);
    auto grid_view = assemble_grid(frozen, cells, positions);
    return softmax_cross_entropy(head.forward_grid(grid_view), labels);
  };
  isolated_loss().backward();
  for (std::size_t i = 0; i < f_params.size(); ++i) {
    auto g = f_params[i].tensor.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      CHECK(g[j] == doctest::Approx(pipeline_grads[i][j]).epsilon(1e-12));
    }
    f_params[i].tensor.zero_grad();
  }
  for (auto p : head.parameters("g")) p.tensor.zero_grad();

  auto report = check_gradients<double>(f_params, isolated_loss);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("an update with no live cells leaves the read detached") {
  GridSpec grid{32, 32, 16};
  ZBlock<float> z(2, grid, 4);
  auto img = Tensor<float>::filled({1, 32, 32}, 0.5f);
  z.fill({img, img}, mean_stub<float>(4));
  z.update(std::vector<PatchBatch<float>>(2), mean_stub<float>(4));
  CHECK(z.active_count() == 0);
  CHECK_FALSE(z.read().requires_grad());
}

TEST_CASE("full refresh: mu=1 with k*zeta >= cells touches every cell once") {
  Rng rng(35);
  auto img = Tensor<float>::uniform({1, 32, 32}, rng, 0.0, 1.0);
  GridSpec grid = GridSpec::for_image(32, 32, 8);  // 4x4
  ZBlock<float> z(1, grid, 2);
  z.fill({img}, mean_stub<float>(2));

  PatchSampler sampler(grid, 1.0, 55);
  std::size_t refreshed = 0;
  for (std::size_t j = 0; j < 4; ++j) {  // zeta=4, k=4 covers 16 cells
    auto batch = sample_patches(img, 4, sampler);
    z.update(std::vector<PatchBatch<float>>{batch}, mean_stub<float>(2));
    refreshed += z.active_count();
  }
  CHECK(refreshed == grid.cell_count());
  CHECK(sampler.exhausted());
  // Every cell was refreshed during this outer iteration: staleness < zeta.
  for (auto s : z.staleness()) CHECK(s < 4);
}

TEST_CASE("dump writes a loadable tensor record") {
  GridSpec grid{32, 32, 16};
  ZBlock<float> z(1, grid, 4);
  auto img = Tensor<float>::filled({1, 32, 32}, 0.25f);
  z.fill({img}, mean_stub<float>(4));
  const auto path =
      (std::filesystem::temp_directory_path() / "patchgd_zdump.bin").string();
  z.dump(path);
  auto rec = read_tensor_record(path);
  CHECK(rec.shape == Shape{1, 2, 2, 4});
  REQUIRE(rec.f32.size() == z.values().size());
  for (std::size_t i = 0; i < rec.f32.size(); ++i) {
    CHECK(rec.f32[i] == z.values().value_at(i));
  }
}

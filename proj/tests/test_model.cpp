#include <cmath>
#include <doctest.h>
#include <vector>

#include "patchgd/model.hpp"
#include "patchgd/ops.hpp"
#include "patchgd/random.hpp"
#include "patchgd/zblock.hpp"

using namespace patchgd;

TEST_CASE("feature extractor collapses a patch to a finite embedding") {
  Rng rng(1);
  FeatureExtractor<float> f(16, 1, 8, {}, rng);
  auto out = f.forward(Tensor<float>::zeros({1, 1, 16, 16}));
  REQUIRE(out.shape() == Shape{1, 8});
  for (float v : out.values()) CHECK(std::isfinite(v));
}

TEST_CASE("embedding shape is independent of the patch size") {
  Rng rng(2);
  FeatureExtractor<float> f16(16, 1, 8, {}, rng);
  FeatureExtractor<float> f32(32, 1, 8, {}, rng);
  auto o16 = f16.forward(Tensor<float>::zeros({3, 1, 16, 16}));
  auto o32 = f32.forward(Tensor<float>::zeros({3, 1, 32, 32}));
  CHECK(o16.shape() == o32.shape());
}

TEST_CASE("spatial collapse holds for every valid patch size") {
  Rng rng(3);
  for (std::size_t p : {8u, 16u, 32u, 64u}) {
    FeatureExtractor<float> f(p, 2, 5, {}, rng);
    auto out = f.forward(Tensor<float>::zeros({2, 2, p, p}));
    CHECK(out.shape() == Shape{2, 5});
  }
}

TEST_CASE("feature extractor parameter count matches the closed form") {
  Rng rng(4);
  const std::vector<std::size_t> spec{4, 8, 8, 8};
  FeatureExtractor<float> f(16, 1, 8, spec, rng);
  std::size_t expected = 0, ch = 1;
  for (std::size_t c : spec) {
    expected += c * ch * 9 + c;
    ch = c;
  }
  expected += 8 * ch + 8;  // 1x1 projection
  CHECK(f.parameter_count() == expected);
  std::size_t from_list = 0;
  for (auto& p : f.parameters()) from_list += p.tensor.size();
  CHECK(from_list == expected);
}

TEST_CASE("feature extractor rejects bad geometry") {
  Rng rng(5);
  CHECK_THROWS_AS(FeatureExtractor<float>(12, 1, 8, {}, rng), ConfigError);
  CHECK_THROWS_AS(FeatureExtractor<float>(4, 1, 8, {}, rng), ConfigError);
  // Depth spec that cannot reduce 16 -> 1 (needs exactly 4 halvings).
  CHECK_THROWS_AS(FeatureExtractor<float>(16, 1, 8, {4, 8}, rng), ConfigError);
  CHECK_THROWS_AS(FeatureExtractor<float>(16, 1, 8, {4, 8, 8, 8, 8}, rng), ConfigError);
}

TEST_CASE("head on an all-zero grid yields the uniform distribution") {
  Rng rng(6);
  HeadNet<float> head(8, 16, 10, rng);
  auto logits = head.forward(Tensor<float>::zeros({2, 8, 3, 3}));
  REQUIRE(logits.shape() == Shape{2, 10});
  for (float v : logits.values()) CHECK(v == 0.0f);  // zero biases
  auto loss = softmax_cross_entropy(logits, {4, 7});
  CHECK(loss.scalar() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("head accepts every grid extent from 1x1 to 8x8") {
  Rng rng(7);
  HeadNet<float> head(4, 8, 6, rng);
  for (std::size_t m = 1; m <= 8; ++m) {
    for (std::size_t n = 1; n <= 8; ++n) {
      auto logits = head.forward(Tensor<float>::zeros({1, 4, m, n}));
      CHECK(logits.shape() == Shape{1, 6});
    }
  }
}

TEST_CASE("head rejects a width mismatch") {
  Rng rng(8);
  HeadNet<float> head(8, 16, 10, rng);
  CHECK_THROWS_AS(head.forward(Tensor<float>::zeros({1, 4, 3, 3})), ShapeError);
}

TEST_CASE("a trained head is not invariant to spatial permutations of Z") {
  Rng rng(9);
  HeadNet<float> head(4, 8, 3, rng);
  auto params = head.parameters();
  Adam<float> opt(params);

  // A few steps on a fixed random batch so the head is a trained artifact,
  // not just random init.
  auto z = Tensor<float>::uniform({4, 4, 2, 2}, rng, -1.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 0};
  for (int step = 0; step < 5; ++step) {
    auto loss = softmax_cross_entropy(head.forward(z), labels);
    loss.backward();
    opt.step_from_grads(1e-2);
    for (auto p : params) p.tensor.zero_grad();
  }

  auto probe = Tensor<float>::uniform({1, 4, 2, 2}, rng, -1.0, 1.0);
  // Swap the two grid columns.
  auto permuted = Tensor<float>::zeros({1, 4, 2, 2});
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t r = 0; r < 2; ++r) {
      permuted.values_mut()[(c * 2 + r) * 2 + 0] = probe.value_at((c * 2 + r) * 2 + 1);
      permuted.values_mut()[(c * 2 + r) * 2 + 1] = probe.value_at((c * 2 + r) * 2 + 0);
    }
  }
  auto a = head.forward(probe);
  auto b = head.forward(permuted);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += std::abs(a.value_at(i) - b.value_at(i));
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("composite forward produces one logit row per image") {
  Rng rng(10);
  CompositeModel<float> gd(1, 10, {8, 16, 16}, false, 16, rng);
  auto logits = gd.forward(Tensor<float>::zeros({3, 1, 32, 32}));
  CHECK(logits.shape() == Shape{3, 10});
  for (float v : logits.values()) CHECK(std::isfinite(v));
}

TEST_CASE("composite rejects sizes the stride product does not divide") {
  Rng rng(11);
  CompositeModel<float> gd(1, 10, {8, 16, 16}, false, 16, rng);
  CHECK_THROWS_AS(gd.forward(Tensor<float>::zeros({1, 1, 36, 36})), ShapeError);
  CHECK_THROWS_AS(gd.plan(1, 36, 36), ShapeError);
}

TEST_CASE("gd-extended differs from gd on shared backbone init") {
  Rng rng_a(12), rng_b(12);
  CompositeModel<float> gd(1, 4, {8, 16}, false, 8, rng_a);
  CompositeModel<float> ext(1, 4, {8, 16}, true, 8, rng_b);
  Rng img_rng(13);
  auto x = Tensor<float>::uniform({1, 1, 16, 16}, img_rng, 0.0, 1.0);
  auto la = gd.forward(x);
  auto lb = ext.forward(x);
  double diff = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) {
    diff += std::abs(la.value_at(i) - lb.value_at(i));
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("gd-extended exceeds gd by exactly the head's parameter count") {
  Rng rng_a(14), rng_b(14), rng_h(14);
  CompositeModel<float> gd(1, 10, {8, 16, 32}, false, 24, rng_a);
  CompositeModel<float> ext(1, 10, {8, 16, 32}, true, 24, rng_b);
  HeadNet<float> head(10, 24, 10, rng_h);
  CHECK(ext.parameter_count() - gd.parameter_count() == head.parameter_count());
}

TEST_CASE("patchwise composite equals z-fill plus head exactly") {
  Rng rng(15);
  FeatureExtractor<float> f(8, 1, 4, {4, 4, 4}, rng);
  HeadNet<float> head(4, 6, 3, rng);

  Rng img_rng(16);
  std::vector<Tensor<float>> images{
      Tensor<float>::uniform({1, 16, 16}, img_rng, 0.0, 1.0),
      Tensor<float>::uniform({1, 16, 16}, img_rng, 0.0, 1.0)};

  auto composite_logits = patchwise_composite_forward(images, f, head);

  GridSpec grid = GridSpec::for_image(16, 16, 8);
  ZBlock<float> z(2, grid, 4);
  z.fill(images, [&f](const Tensor<float>& p) { return f.forward(p); });
  auto pipeline_logits = head.forward_grid(z.read());

  REQUIRE(composite_logits.size() == pipeline_logits.size());
  for (std::size_t i = 0; i < composite_logits.size(); ++i) {
    CHECK(composite_logits.value_at(i) == pipeline_logits.value_at(i));
  }
}

TEST_CASE("model initialization is deterministic per seed") {
  Rng a(17), b(17);
  FeatureExtractor<float> fa(16, 1, 8, {}, a), fb(16, 1, 8, {}, b);
  auto pa = fa.parameters(), pb = fb.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    const auto va = pa[i].tensor.values(), vb = pb[i].tensor.values();
    REQUIRE(va.size() == vb.size());
    for (std::size_t k = 0; k < va.size(); ++k) CHECK(va[k] == vb[k]);
  }
}

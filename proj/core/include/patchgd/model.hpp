#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "patchgd/adam.hpp"
#include "patchgd/memcost.hpp"
#include "patchgd/ops.hpp"
#include "patchgd/random.hpp"
#include "patchgd/tensor.hpp"

namespace patchgd {

namespace detail {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t log2_exact(std::size_t n) {
  std::size_t k = 0;
  while ((std::size_t{1} << k) < n) ++k;
  return k;
}

// Kaiming-uniform fan-in init; biases start at zero.
template <typename S>
Tensor<S> init_conv_weight(std::size_t filters, std::size_t channels,
                           std::size_t kernel, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(channels * kernel * kernel));
  return Tensor<S>::uniform({filters, channels, kernel, kernel}, rng, -bound, bound,
                            /*requires_grad=*/true);
}

template <typename S>
Tensor<S> init_linear_weight(std::size_t out_dim, std::size_t in_dim, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim));
  return Tensor<S>::uniform({out_dim, in_dim}, rng, -bound, bound,
                            /*requires_grad=*/true);
}

}  // namespace detail

template <typename S>
struct ConvBlock {
  Tensor<S> weight;
  Tensor<S> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Patch feature extractor f: stride-2 3x3 blocks halve the spatial extent of
// a p x p patch down to 1, then a 1x1 projection maps onto the embedding.
template <typename S>
class FeatureExtractor {
 public:
  FeatureExtractor(std::size_t patch_size, std::size_t in_channels,
                   std::size_t embed_dim, std::vector<std::size_t> block_channels,
                   Rng& rng, S bias_init = S(0))
      : patch_size_(patch_size), in_channels_(in_channels), embed_dim_(embed_dim) {
    if (patch_size < 8 || !detail::is_power_of_two(patch_size)) {
      throw ConfigError("feature extractor: patch size must be a power of two >= 8, got " +
                        std::to_string(patch_size));
    }
    if (embed_dim == 0) throw ConfigError("feature extractor: embed_dim must be >= 1");
    if (block_channels.empty()) block_channels = default_block_channels(patch_size);
    const std::size_t halvings = detail::log2_exact(patch_size);
    if (block_channels.size() != halvings) {
      throw ConfigError("feature extractor: depth spec has " +
                        std::to_string(block_channels.size()) + " blocks but patch size " +
                        std::to_string(patch_size) + " needs exactly " +
                        std::to_string(halvings) + " halvings to reach 1x1");
    }
    std::size_t ch = in_channels;
    for (std::size_t c : block_channels) {
      if (c == 0) throw ConfigError("feature extractor: zero-width block");
      blocks_.push_back({detail::init_conv_weight<S>(c, ch, 3, rng),
                         Tensor<S>::filled({c}, bias_init, /*requires_grad=*/true), 2, 1});
      ch = c;
    }
    proj_ = {detail::init_conv_weight<S>(embed_dim, ch, 1, rng),
             Tensor<S>::zeros({embed_dim}, /*requires_grad=*/true), 1, 0};
  }

  static std::vector<std::size_t> default_block_channels(std::size_t patch_size) {
    std::vector<std::size_t> spec;
    std::size_t ch = 8;
    for (std::size_t sz = patch_size; sz > 1; sz /= 2) {
      spec.push_back(ch);
      ch = std::min<std::size_t>(ch * 2, 64);
    }
    return spec;
  }

  // [K,C,p,p] -> [K,s]
  Tensor<S> forward(const Tensor<S>& patches) const {
    detail::check_4d(patches, "feature_extractor", "patches");
    if (patches.dim(1) != in_channels_ || patches.dim(2) != patch_size_ ||
        patches.dim(3) != patch_size_) {
      throw ShapeError("feature_extractor: expected patches [K," +
                       std::to_string(in_channels_) + "," + std::to_string(patch_size_) +
                       "," + std::to_string(patch_size_) + "], got " +
                       shape_str(patches.shape()));
    }
    Tensor<S> x = patches;
    for (const auto& b : blocks_) {
      x = relu(conv2d(x, b.weight, b.bias, b.stride, b.padding));
    }
    x = conv2d(x, proj_.weight, proj_.bias, proj_.stride, proj_.padding);
    return reshape(x, {patches.dim(0), embed_dim_});
  }

  Tensor<S> operator()(const Tensor<S>& patches) const { return forward(patches); }

  std::vector<NamedParam<S>> parameters(const std::string& prefix = "f") {
    std::vector<NamedParam<S>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      out.push_back({prefix + ".block" + std::to_string(i) + ".weight", blocks_[i].weight});
      out.push_back({prefix + ".block" + std::to_string(i) + ".bias", blocks_[i].bias});
    }
    out.push_back({prefix + ".proj.weight", proj_.weight});
    out.push_back({prefix + ".proj.bias", proj_.bias});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.weight.size() + b.bias.size();
    return n + proj_.weight.size() + proj_.bias.size();
  }

  // Per-layer shapes for a batch of `k` patches.
  std::vector<LayerShape> plan(std::size_t k) const {
    std::vector<LayerShape> out;
    std::size_t ch = in_channels_, sz = patch_size_;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::size_t oc = blocks_[i].weight.dim(0);
      out.push_back({"block" + std::to_string(i) + ".conv", k * ch * sz * sz,
                     k * oc * (sz / 2) * (sz / 2),
                     blocks_[i].weight.size() + blocks_[i].bias.size()});
      sz /= 2;
      out.push_back({"block" + std::to_string(i) + ".relu", k * oc * sz * sz,
                     k * oc * sz * sz, 0});
      ch = oc;
    }
    out.push_back({"proj.conv", k * ch * sz * sz, k * embed_dim_ * sz * sz,
                   proj_.weight.size() + proj_.bias.size()});
    return out;
  }

  std::size_t patch_size() const { return patch_size_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t embed_dim() const { return embed_dim_; }
  const std::vector<ConvBlock<S>>& blocks() const { return blocks_; }
  const ConvBlock<S>& projection() const { return proj_; }

 private:
  std::size_t patch_size_, in_channels_, embed_dim_;
  std::vector<ConvBlock<S>> blocks_;
  ConvBlock<S> proj_;
};

// Classification head g over the latent grid: four 3x3 convs at constant
// width, global average pooling, and a linear map onto the class logits.
// Accepts any m x n spatial extent.
template <typename S>
class HeadNet {
 public:
  static constexpr std::size_t kConvLayers = 4;

  HeadNet(std::size_t embed_dim, std::size_t channels, std::size_t classes, Rng& rng,
          S bias_init = S(0))
      : embed_dim_(embed_dim), channels_(channels), classes_(classes) {
    if (channels == 0 || classes == 0) {
      throw ConfigError("head: channels and classes must be >= 1");
    }
    std::size_t ch = embed_dim;
    for (std::size_t i = 0; i < kConvLayers; ++i) {
      convs_.push_back({detail::init_conv_weight<S>(channels, ch, 3, rng),
                        Tensor<S>::filled({channels}, bias_init, /*requires_grad=*/true), 1, 1});
      ch = channels;
    }
    fc_weight_ = detail::init_linear_weight<S>(classes, channels, rng);
    fc_bias_ = Tensor<S>::zeros({classes}, /*requires_grad=*/true);
  }

  // [B,s,m,n] -> [B,c] logits.
  Tensor<S> forward(const Tensor<S>& zmap) const {
    detail::check_4d(zmap, "head", "input");
    if (zmap.dim(1) != embed_dim_) {
      throw ShapeError("head: input width (" + std::to_string(zmap.dim(1)) +
                       ") != embed width (" + std::to_string(embed_dim_) + ")");
    }
    Tensor<S> x = zmap;
    for (const auto& c : convs_) {
      x = relu(conv2d(x, c.weight, c.bias, c.stride, c.padding));
    }
    return linear(global_avg_pool(x), fc_weight_, fc_bias_);
  }

  // [B,m,n,s] grid layout -> logits.
  Tensor<S> forward_grid(const Tensor<S>& grid) const {
    return forward(grid_to_nchw(grid));
  }

  std::vector<NamedParam<S>> parameters(const std::string& prefix = "g") {
    std::vector<NamedParam<S>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i) + ".weight", convs_[i].weight});
      out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", convs_[i].bias});
    }
    out.push_back({prefix + ".fc.weight", fc_weight_});
    out.push_back({prefix + ".fc.bias", fc_bias_});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = fc_weight_.size() + fc_bias_.size();
    for (const auto& c : convs_) n += c.weight.size() + c.bias.size();
    return n;
  }

  std::vector<LayerShape> plan(std::size_t batch, std::size_t rows,
                               std::size_t cols) const {
    std::vector<LayerShape> out;
    std::size_t ch = embed_dim_;
    const std::size_t area = rows * cols;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      out.push_back({"head.conv" + std::to_string(i), batch * ch * area,
                     batch * channels_ * area,
                     convs_[i].weight.size() + convs_[i].bias.size()});
      out.push_back({"head.relu" + std::to_string(i), batch * channels_ * area,
                     batch * channels_ * area, 0});
      ch = channels_;
    }
    out.push_back({"head.gap", batch * channels_ * area, batch * channels_, 0});
    out.push_back({"head.fc", batch * channels_, batch * classes_,
                   fc_weight_.size() + fc_bias_.size()});
    return out;
  }

  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t channels() const { return channels_; }
  std::size_t classes() const { return classes_; }
  const std::vector<ConvBlock<S>>& convs() const { return convs_; }

  // Zeroing the final bias makes an all-zero grid produce uniform
  // probabilities; biases already start at zero.
  Tensor<S>& fc_bias() { return fc_bias_; }

 private:
  std::size_t embed_dim_, channels_, classes_;
  std::vector<ConvBlock<S>> convs_;
  Tensor<S> fc_weight_, fc_bias_;
};

// Whole-image baseline: strided 3x3 blocks, a 1x1 projection onto class
// channels, then either plain global pooling (gd) or the latent head
// (gd_extended). The pooled variant has a parameter-free classifier, so the
// extended variant exceeds it by exactly the head's parameter count.
template <typename S>
class CompositeModel {
 public:
  CompositeModel(std::size_t in_channels, std::size_t classes,
                 std::vector<std::size_t> block_channels, bool extended,
                 std::size_t head_channels, Rng& rng, S bias_init = S(0))
      : in_channels_(in_channels), classes_(classes), extended_(extended) {
    if (block_channels.empty()) {
      throw ConfigError("composite model: empty backbone spec");
    }
    std::size_t ch = in_channels;
    for (std::size_t c : block_channels) {
      if (c == 0) throw ConfigError("composite model: zero-width block");
      blocks_.push_back({detail::init_conv_weight<S>(c, ch, 3, rng),
                         Tensor<S>::filled({c}, bias_init, /*requires_grad=*/true), 2, 1});
      ch = c;
    }
    proj_ = {detail::init_conv_weight<S>(classes, ch, 1, rng),
             Tensor<S>::zeros({classes}, /*requires_grad=*/true), 1, 0};
    if (extended_) {
      head_ = std::make_unique<HeadNet<S>>(classes, head_channels, classes, rng,
                                           bias_init);
    }
  }

  std::size_t stride_product() const { return std::size_t{1} << blocks_.size(); }

  // [B,C,H,W] -> [B,c] logits. The input must tile evenly; nothing is resized.
  Tensor<S> forward(const Tensor<S>& images) const {
    detail::check_4d(images, "composite", "images");
    check_divisible(images.dim(2), images.dim(3));
    Tensor<S> x = images;
    for (const auto& b : blocks_) {
      x = relu(conv2d(x, b.weight, b.bias, b.stride, b.padding));
    }
    x = conv2d(x, proj_.weight, proj_.bias, proj_.stride, proj_.padding);
    if (extended_) return head_->forward(x);
    return global_avg_pool(x);
  }

  std::vector<NamedParam<S>> parameters(const std::string& prefix = "model") {
    std::vector<NamedParam<S>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      out.push_back({prefix + ".block" + std::to_string(i) + ".weight", blocks_[i].weight});
      out.push_back({prefix + ".block" + std::to_string(i) + ".bias", blocks_[i].bias});
    }
    out.push_back({prefix + ".proj.weight", proj_.weight});
    out.push_back({prefix + ".proj.bias", proj_.bias});
    if (extended_) {
      auto head_params = head_->parameters(prefix + ".head");
      out.insert(out.end(), head_params.begin(), head_params.end());
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = proj_.weight.size() + proj_.bias.size();
    for (const auto& b : blocks_) n += b.weight.size() + b.bias.size();
    if (extended_) n += head_->parameter_count();
    return n;
  }

  std::vector<LayerShape> plan(std::size_t batch, std::size_t height,
                               std::size_t width) const {
    check_divisible(height, width);
    std::vector<LayerShape> out;
    std::size_t ch = in_channels_, h = height, w = width;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::size_t oc = blocks_[i].weight.dim(0);
      out.push_back({"block" + std::to_string(i) + ".conv", batch * ch * h * w,
                     batch * oc * (h / 2) * (w / 2),
                     blocks_[i].weight.size() + blocks_[i].bias.size()});
      h /= 2;
      w /= 2;
      out.push_back({"block" + std::to_string(i) + ".relu", batch * oc * h * w,
                     batch * oc * h * w, 0});
      ch = oc;
    }
    out.push_back({"proj.conv", batch * ch * h * w, batch * classes_ * h * w,
                   proj_.weight.size() + proj_.bias.size()});
    if (extended_) {
      auto head_plan = head_->plan(batch, h, w);
      out.insert(out.end(), head_plan.begin(), head_plan.end());
    } else {
      out.push_back({"gap", batch * classes_ * h * w, batch * classes_, 0});
    }
    return out;
  }

  bool extended() const { return extended_; }
  std::size_t classes() const { return classes_; }
  std::size_t in_channels() const { return in_channels_; }
  const HeadNet<S>& head() const { return *head_; }

 private:
  void check_divisible(std::size_t h, std::size_t w) const {
    const std::size_t sp = stride_product();
    if (h % sp != 0 || w % sp != 0) {
      throw ShapeError("composite: input " + std::to_string(h) + "x" + std::to_string(w) +
                       " not divisible by backbone stride product " + std::to_string(sp));
    }
  }

  std::size_t in_channels_, classes_;
  bool extended_;
  std::vector<ConvBlock<S>> blocks_;
  ConvBlock<S> proj_;
  std::unique_ptr<HeadNet<S>> head_;
};

}  // namespace patchgd

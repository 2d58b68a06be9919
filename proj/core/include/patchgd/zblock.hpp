#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "patchgd/errors.hpp"
#include "patchgd/model.hpp"
#include "patchgd/ops.hpp"
#include "patchgd/patching.hpp"
#include "patchgd/tensor.hpp"
#include "patchgd/tensor_record.hpp"

namespace patchgd {

// Latent grid for a batch of images: a detached [B,m,n,s] value buffer plus
// the set of cells refreshed by the current inner iteration. Reads combine
// the stale buffer with the live (gradient-tracked) cell embeddings, so the
// backward pass reaches the feature extractor only through the active cells.
template <typename S>
class ZBlock {
 public:
  ZBlock(std::size_t batch, GridSpec grid, std::size_t embed_dim)
      : grid_(grid), batch_(batch), embed_dim_(embed_dim) {
    if (batch == 0) throw ConfigError("zblock: batch must be >= 1");
    if (embed_dim == 0) throw ConfigError("zblock: embed width must be >= 1");
    values_ = Tensor<S>::zeros({batch, grid.rows(), grid.cols(), embed_dim});
    active_mask_.assign(batch * grid.cell_count(), 0);
    staleness_.assign(batch * grid.cell_count(), 0);
  }

  // Computes every cell of every image under stop-gradient, in row-major
  // order, chunked to bound transient activation memory. Cells are
  // independent, so chunking and order do not change values.
  template <typename Embedder>
  void fill(const std::vector<Tensor<S>>& images, Embedder&& embed,
            std::size_t chunk_cells = kDefaultFillChunk) {
    check_images(images);
    if (chunk_cells == 0) chunk_cells = grid_.cell_count();
    NoGradGuard no_grad;
    const std::size_t cells = grid_.cell_count();
    for (std::size_t b = 0; b < batch_; ++b) {
      std::size_t done = 0;
      while (done < cells) {
        const std::size_t take = std::min(chunk_cells, cells - done);
        std::vector<Tensor<S>> patches;
        patches.reserve(take);
        for (std::size_t i = 0; i < take; ++i) {
          const std::size_t cell = done + i;
          patches.push_back(extract_patch(images[b], cell / grid_.cols(),
                                          cell % grid_.cols(), grid_.patch));
        }
        Tensor<S> z = embed(stack(patches));
        check_embedding(z, take);
        for (std::size_t i = 0; i < take; ++i) {
          write_cell(b, (done + i) / grid_.cols(), (done + i) % grid_.cols(),
                     z.values().data() + i * embed_dim_);
        }
        done += take;
      }
    }
    std::fill(active_mask_.begin(), active_mask_.end(), std::uint8_t{0});
    std::fill(staleness_.begin(), staleness_.end(), std::uint32_t{0});
    live_cells_ = Tensor<S>();
    live_positions_.clear();
    filled_ = true;
  }

  // Refreshes the listed cells with gradient-tracked embeddings. The fresh
  // values replace the stored ones; every other cell stays detached and one
  // step staler.
  template <typename Embedder>
  void update(const std::vector<PatchBatch<S>>& batches, Embedder&& embed) {
    if (!filled_) throw StateError("zblock: update before fill");
    if (batches.size() != batch_) {
      throw ShapeError("zblock: " + std::to_string(batches.size()) +
                       " patch batches for batch of " + std::to_string(batch_));
    }

    std::vector<Tensor<S>> patches;
    std::vector<GridPos> positions;
    for (std::size_t b = 0; b < batch_; ++b) {
      std::set<std::pair<std::size_t, std::size_t>> seen;
      if (batches[b].patches.size() != batches[b].positions.size()) {
        throw ShapeError("zblock: patch/position count mismatch for image " +
                         std::to_string(b));
      }
      for (std::size_t i = 0; i < batches[b].size(); ++i) {
        const CellRef& cell = batches[b].positions[i];
        if (cell.row >= grid_.rows() || cell.col >= grid_.cols()) {
          throw ValueError("zblock: cell (" + std::to_string(cell.row) + "," +
                           std::to_string(cell.col) + ") outside grid");
        }
        if (!seen.insert({cell.row, cell.col}).second) {
          throw ValueError("zblock: duplicate cell (" + std::to_string(cell.row) +
                           "," + std::to_string(cell.col) + ") in one update for image " +
                           std::to_string(b));
        }
        patches.push_back(batches[b].patches[i]);
        positions.push_back({b, cell.row, cell.col});
      }
    }

    for (std::uint32_t& s : staleness_) ++s;
    std::fill(active_mask_.begin(), active_mask_.end(), std::uint8_t{0});
    live_cells_ = Tensor<S>();
    live_positions_.clear();
    if (positions.empty()) return;

    Tensor<S> z = embed(stack(patches));
    check_embedding(z, positions.size());

    for (std::size_t i = 0; i < positions.size(); ++i) {
      const GridPos& p = positions[i];
      write_cell(p.image, p.row, p.col, z.values().data() + i * embed_dim_);
      active_mask_[(p.image * grid_.rows() + p.row) * grid_.cols() + p.col] = 1;
      staleness_[(p.image * grid_.rows() + p.row) * grid_.cols() + p.col] = 0;
    }
    live_cells_ = z;
    live_positions_ = std::move(positions);
  }

  // [B,m,n,s] view: stale cells detached, active cells gradient-tracked.
  Tensor<S> read() const {
    if (!filled_) throw StateError("zblock: read before fill");
    return assemble_grid(values_, live_cells_, live_positions_);
  }

  bool filled() const { return filled_; }
  const Tensor<S>& values() const { return values_; }
  const GridSpec& grid() const { return grid_; }
  std::size_t batch() const { return batch_; }
  std::size_t embed_dim() const { return embed_dim_; }

  const std::vector<std::uint8_t>& active_mask() const { return active_mask_; }
  std::size_t active_count() const { return live_positions_.size(); }
  const std::vector<GridPos>& active_positions() const { return live_positions_; }
  const std::vector<std::uint32_t>& staleness() const { return staleness_; }

  // Diagnostic dump of the value buffer as a binary tensor record.
  void dump(const std::string& path) const {
    if (!filled_) throw StateError("zblock: dump before fill");
    write_tensor_record(path, values_.shape(), values_.values());
  }

  static constexpr std::size_t kDefaultFillChunk = 64;

 private:
  void check_images(const std::vector<Tensor<S>>& images) const {
    if (images.size() != batch_) {
      throw ShapeError("zblock: " + std::to_string(images.size()) +
                       " images for batch of " + std::to_string(batch_));
    }
    for (const auto& img : images) {
      if (img.ndim() != 3 || img.dim(1) != grid_.image_h || img.dim(2) != grid_.image_w) {
        throw ShapeError("zblock: image " + shape_str(img.shape()) +
                         " does not match grid " + std::to_string(grid_.image_h) + "x" +
                         std::to_string(grid_.image_w) + " (pad first)");
      }
    }
  }

  void check_embedding(const Tensor<S>& z, std::size_t count) const {
    if (z.ndim() != 2 || z.dim(0) != count || z.dim(1) != embed_dim_) {
      throw ShapeError("zblock: embedding " + shape_str(z.shape()) + " != [" +
                       std::to_string(count) + "," + std::to_string(embed_dim_) + "]");
    }
  }

  void write_cell(std::size_t image, std::size_t row, std::size_t col, const S* src) {
    S* dst = values_.values_mut().data() +
             ((image * grid_.rows() + row) * grid_.cols() + col) * embed_dim_;
    for (std::size_t j = 0; j < embed_dim_; ++j) dst[j] = src[j];
  }

  GridSpec grid_;
  std::size_t batch_, embed_dim_;
  Tensor<S> values_;
  std::vector<std::uint8_t> active_mask_;
  std::vector<std::uint32_t> staleness_;
  Tensor<S> live_cells_;
  std::vector<GridPos> live_positions_;
  bool filled_ = false;
};

// Convenience single-image fill used at inference and in tests.
template <typename S, typename Embedder>
ZBlock<S> z_fill(const Tensor<S>& image, Embedder&& embed, std::size_t patch,
                 std::size_t embed_dim) {
  GridSpec grid = GridSpec::for_image(image.dim(1), image.dim(2), patch);
  ZBlock<S> z(1, grid, embed_dim);
  z.fill({image}, embed);
  return z;
}

// Oracle bridge: the composite whole-image model whose backbone is the
// feature extractor applied patchwise with stride p and whose classifier is
// the latent head. Equals a full-grid fill followed by the head, with every
// cell live.
template <typename S>
Tensor<S> patchwise_composite_forward(const std::vector<Tensor<S>>& images,
                                      const FeatureExtractor<S>& features,
                                      const HeadNet<S>& head) {
  if (images.empty()) throw ValueError("patchwise composite: empty batch");
  const std::size_t p = features.patch_size();
  GridSpec grid = GridSpec::for_image(images[0].dim(1), images[0].dim(2), p);

  std::vector<Tensor<S>> patches;
  std::vector<GridPos> positions;
  patches.reserve(images.size() * grid.cell_count());
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].dim(1) != grid.image_h || images[b].dim(2) != grid.image_w) {
      throw ShapeError("patchwise composite: mixed image sizes in batch");
    }
    for (std::size_t r = 0; r < grid.rows(); ++r) {
      for (std::size_t c = 0; c < grid.cols(); ++c) {
        patches.push_back(extract_patch(images[b], r, c, p));
        positions.push_back({b, r, c});
      }
    }
  }
  Tensor<S> cells = features.forward(stack(patches));
  Tensor<S> base = Tensor<S>::zeros(
      {images.size(), grid.rows(), grid.cols(), features.embed_dim()});
  return head.forward_grid(assemble_grid(base, cells, positions));
}

}  // namespace patchgd

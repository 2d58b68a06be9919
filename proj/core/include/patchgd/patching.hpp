#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "patchgd/errors.hpp"
#include "patchgd/random.hpp"
#include "patchgd/tensor.hpp"

namespace patchgd {

// Tiling of an M x N image into p x p cells.
struct GridSpec {
  std::size_t image_h = 0;  // M
  std::size_t image_w = 0;  // N
  std::size_t patch = 0;    // p

  std::size_t rows() const { return image_h / patch; }  // m
  std::size_t cols() const { return image_w / patch; }  // n
  std::size_t cell_count() const { return rows() * cols(); }

  static GridSpec for_image(std::size_t h, std::size_t w, std::size_t p) {
    if (p == 0) throw ConfigError("grid: patch size must be >= 1");
    if (h % p != 0 || w % p != 0) {
      throw ShapeError("grid: image " + std::to_string(h) + "x" + std::to_string(w) +
                       " is not tiled by patch size " + std::to_string(p) +
                       " (pad first)");
    }
    return {h, w, p};
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct CellRef {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const CellRef&, const CellRef&) = default;
};

// Rounds spatial dims of a [C,H,W] image up to multiples of p; new pixels
// take the fill value (the dataset background).
template <typename S>
Tensor<S> pad_to_grid(const Tensor<S>& image, std::size_t p, S fill = S(0)) {
  if (image.ndim() != 3) {
    throw ShapeError("pad_to_grid: expected [C,H,W], got " + shape_str(image.shape()));
  }
  if (p == 0) throw ConfigError("pad_to_grid: patch size must be >= 1");
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t new_h = (h + p - 1) / p * p;
  const std::size_t new_w = (w + p - 1) / p * p;
  if (new_h == h && new_w == w) return image;

  Tensor<S> out = Tensor<S>::filled({channels, new_h, new_w}, fill);
  const S* src = image.values().data();
  S* dst = out.values_mut().data();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const S* row = src + (c * h + y) * w;
      S* orow = dst + (c * new_h + y) * new_w;
      for (std::size_t x = 0; x < w; ++x) orow[x] = row[x];
    }
  }
  return out;
}

// Content copy of cell (row, col) of a grid-aligned [C,H,W] image.
template <typename S>
Tensor<S> extract_patch(const Tensor<S>& image, std::size_t row, std::size_t col,
                        std::size_t p) {
  if (image.ndim() != 3) {
    throw ShapeError("extract_patch: expected [C,H,W], got " + shape_str(image.shape()));
  }
  const GridSpec grid = GridSpec::for_image(image.dim(1), image.dim(2), p);
  if (row >= grid.rows() || col >= grid.cols()) {
    throw ValueError("extract_patch: cell (" + std::to_string(row) + "," +
                     std::to_string(col) + ") outside " + std::to_string(grid.rows()) +
                     "x" + std::to_string(grid.cols()) + " grid");
  }
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<S> out = Tensor<S>::zeros({channels, p, p});
  const S* src = image.values().data();
  S* dst = out.values_mut().data();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < p; ++y) {
      const S* srow = src + (c * h + row * p + y) * w + col * p;
      S* drow = dst + (c * p + y) * p;
      for (std::size_t x = 0; x < p; ++x) drow[x] = srow[x];
    }
  }
  return out;
}

// k patches and their grid positions for one image.
template <typename S>
struct PatchBatch {
  std::vector<Tensor<S>> patches;
  std::vector<CellRef> positions;

  bool empty() const { return positions.empty(); }
  std::size_t size() const { return positions.size(); }
};

// Without-replacement cell sampler for one image and one outer iteration:
// a fresh permutation of all m*n cells, capped at ceil(mu * m*n) emissions.
class PatchSampler {
 public:
  PatchSampler(GridSpec grid, double max_coverage, std::uint64_t seed)
      : grid_(grid) {
    if (!(max_coverage > 0.0) || max_coverage > 1.0) {
      throw ConfigError("sampler: max coverage must be in (0,1], got " +
                        std::to_string(max_coverage));
    }
    const std::size_t cells = grid.cell_count();
    budget_ = static_cast<std::size_t>(
        std::ceil(max_coverage * static_cast<double>(cells)));
    if (budget_ == 0) budget_ = 1;
    Rng rng(seed);
    perm_ = random_permutation(cells, rng);
  }

  // Next min(k, remaining) cells; empty once the coverage budget is spent.
  std::vector<CellRef> next_cells(std::size_t k) {
    if (k == 0) throw ValueError("sampler: k must be >= 1");
    std::vector<CellRef> out;
    const std::size_t n_cols = grid_.cols();
    while (out.size() < k && cursor_ < budget_) {
      const std::size_t cell = perm_[cursor_++];
      out.push_back({cell / n_cols, cell % n_cols});
    }
    return out;
  }

  bool exhausted() const { return cursor_ >= budget_; }
  std::size_t emitted() const { return cursor_; }
  std::size_t budget() const { return budget_; }
  const GridSpec& grid() const { return grid_; }

 private:
  GridSpec grid_;
  std::vector<std::size_t> perm_;
  std::size_t cursor_ = 0;
  std::size_t budget_ = 0;
};

// Draws the next batch of patches for an image. Exhaustion is signalled by
// an empty batch, not an error.
template <typename S>
PatchBatch<S> sample_patches(const Tensor<S>& image, std::size_t k,
                             PatchSampler& state) {
  PatchBatch<S> batch;
  batch.positions = state.next_cells(k);
  batch.patches.reserve(batch.positions.size());
  for (const CellRef& cell : batch.positions) {
    batch.patches.push_back(extract_patch(image, cell.row, cell.col, state.grid().patch));
  }
  return batch;
}

}  // namespace patchgd

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "patchgd/tensor.hpp"

namespace patchgd {

constexpr std::size_t kGlyphSize = 28;

struct DigitGlyph {
  int label = 0;
  std::vector<float> pixels;  // kGlyphSize^2, values in [0,1]
};

// Grayscale digit exemplars, one or more per class 0-9.
struct DigitBank {
  std::string source;  // "idx" or "procedural"
  std::vector<DigitGlyph> glyphs;
  std::vector<std::vector<std::size_t>> by_class;  // indices per label

  std::size_t size() const { return glyphs.size(); }
  void build_index();
  void validate() const;  // every class populated, pixels in [0,1]
};

// MNIST IDX ingestion: big-endian magic 0x00000803 (images) / 0x00000801
// (labels), dimension sizes, then raw bytes. Pixel bytes normalize to [0,1].
DigitBank load_idx(const std::string& images_path, const std::string& labels_path);

// Download-free fallback: ten deterministic segment-stroke glyphs.
DigitBank procedural_digits();

struct DigitPlacement {
  int digit_class = 0;
  std::size_t glyph_index = 0;
  std::size_t size_px = 0;
  std::size_t x = 0, y = 0;  // top-left corner
};

struct UltraSample {
  Tensor<float> image;  // [1,M,M], black background, white digits
  int label = 0;
  std::uint64_t seed = 0;  // per-sample sub-seed, recorded in the index
  std::vector<DigitPlacement> provenance;
};

struct Dataset {
  std::vector<UltraSample> samples;
  std::size_t image_size = 0;

  std::size_t size() const { return samples.size(); }
  std::vector<int> labels() const;
};

struct GenerateConfig {
  std::size_t count = 1000;
  std::size_t image_size = 128;  // M
  double scale_min = 0.05;       // digit size as a fraction of M
  double scale_max = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
};

// Label-stratified synthesis: sample i targets class i mod 10, places 3-5
// digits of that sum (each scaled independently) with non-overlapping
// bounding boxes. Each sample derives its own sub-seed from (seed, i), so
// any generation order produces identical bytes.
Dataset generate_ultramnist(const DigitBank& bank, const GenerateConfig& cfg);

// Directory layout: index.csv with `id,label,seed` rows plus one binary
// tensor record per sample.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace patchgd

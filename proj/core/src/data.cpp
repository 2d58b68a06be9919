#include "patchgd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "patchgd/errors.hpp"
#include "patchgd/random.hpp"
#include "patchgd/tensor_record.hpp"

namespace patchgd {

namespace fs = std::filesystem;

void DigitBank::build_index() {
  by_class.assign(10, {});
  for (std::size_t i = 0; i < glyphs.size(); ++i) {
    const int label = glyphs[i].label;
    if (label < 0 || label > 9) {
      throw ValueError("digit bank: label " + std::to_string(label) + " at glyph " +
                       std::to_string(i));
    }
    by_class[static_cast<std::size_t>(label)].push_back(i);
  }
}

void DigitBank::validate() const {
  if (by_class.size() != 10) throw StateError("digit bank: index not built");
  for (int c = 0; c < 10; ++c) {
    if (by_class[static_cast<std::size_t>(c)].empty()) {
      throw ValueError("digit bank: no exemplar for class " + std::to_string(c));
    }
  }
  for (const auto& g : glyphs) {
    if (g.pixels.size() != kGlyphSize * kGlyphSize) {
      throw ValueError("digit bank: glyph is not " + std::to_string(kGlyphSize) + "x" +
                       std::to_string(kGlyphSize));
    }
    for (float v : g.pixels) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw ValueError("digit bank: pixel outside [0,1]");
      }
    }
  }
}

namespace {

std::uint32_t read_be32(std::ifstream& in, const std::string& path, std::size_t offset) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) {
    throw IoError("idx: truncated file '" + path + "' at byte " + std::to_string(offset));
  }
  return (std::uint32_t{buf[0]} << 24) | (std::uint32_t{buf[1]} << 16) |
         (std::uint32_t{buf[2]} << 8) | std::uint32_t{buf[3]};
}

}  // namespace

DigitBank load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("idx: cannot open '" + images_path + "'");
  const std::uint32_t img_magic = read_be32(img, images_path, 0);
  if (img_magic != 0x00000803u) {
    std::ostringstream os;
    os << "idx: bad image magic 0x" << std::hex << img_magic << " in '" << images_path
       << "' at byte 0 (expected 0x803)";
    throw IoError(os.str());
  }
  const std::uint32_t count = read_be32(img, images_path, 4);
  const std::uint32_t rows = read_be32(img, images_path, 8);
  const std::uint32_t cols = read_be32(img, images_path, 12);
  if (rows != kGlyphSize || cols != kGlyphSize) {
    throw IoError("idx: expected " + std::to_string(kGlyphSize) + "x" +
                  std::to_string(kGlyphSize) + " images, got " + std::to_string(rows) +
                  "x" + std::to_string(cols));
  }

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("idx: cannot open '" + labels_path + "'");
  const std::uint32_t lab_magic = read_be32(lab, labels_path, 0);
  if (lab_magic != 0x00000801u) {
    std::ostringstream os;
    os << "idx: bad label magic 0x" << std::hex << lab_magic << " in '" << labels_path
       << "' at byte 0 (expected 0x801)";
    throw IoError(os.str());
  }
  const std::uint32_t lab_count = read_be32(lab, labels_path, 4);
  if (lab_count != count) {
    throw ValueError("idx: " + std::to_string(count) + " images but " +
                     std::to_string(lab_count) + " labels");
  }

  DigitBank bank;
  bank.source = "idx";
  bank.glyphs.resize(count);
  std::vector<unsigned char> pixel_buf(kGlyphSize * kGlyphSize);
  for (std::uint32_t i = 0; i < count; ++i) {
    img.read(reinterpret_cast<char*>(pixel_buf.data()),
             static_cast<std::streamsize>(pixel_buf.size()));
    if (!img) {
      throw IoError("idx: truncated pixel data in '" + images_path + "' at byte " +
                    std::to_string(16 + std::size_t{i} * pixel_buf.size()));
    }
    char label_byte = 0;
    lab.read(&label_byte, 1);
    if (!lab) {
      throw IoError("idx: truncated labels in '" + labels_path + "' at byte " +
                    std::to_string(8 + std::size_t{i}));
    }
    auto& glyph = bank.glyphs[i];
    glyph.label = static_cast<int>(static_cast<unsigned char>(label_byte));
    glyph.pixels.resize(pixel_buf.size());
    for (std::size_t j = 0; j < pixel_buf.size(); ++j) {
      glyph.pixels[j] = static_cast<float>(pixel_buf[j]) / 255.0f;
    }
  }
  // Class completeness is a generation-time requirement, not a load-time one;
  // small fixtures with a few digits are legitimate banks.
  bank.build_index();
  return bank;
}

namespace {

// Seven-segment layout on the 28x28 canvas.
//      A
//    F   B
//      G
//    E   C
//      D
struct SegmentBox {
  std::size_t x0, y0, x1, y1;  // half-open
};

constexpr std::size_t kThick = 4;
constexpr std::size_t kLeft = 5, kRight = 23, kTop = 3, kBottom = 25, kMid = 12;

SegmentBox segment_box(char seg) {
  switch (seg) {
    case 'A': return {kLeft, kTop, kRight, kTop + kThick};
    case 'B': return {kRight - kThick, kTop, kRight, kMid + kThick};
    case 'C': return {kRight - kThick, kMid, kRight, kBottom};
    case 'D': return {kLeft, kBottom - kThick, kRight, kBottom};
    case 'E': return {kLeft, kMid, kLeft + kThick, kBottom};
    case 'F': return {kLeft, kTop, kLeft + kThick, kMid + kThick};
    default:  return {kLeft, kMid, kRight, kMid + kThick};  // G
  }
}

const char* kDigitSegments[10] = {
    "ABCDEF", "BC", "ABGED", "ABGCD", "FGBC",
    "AFGCD", "AFGEDC", "ABC", "ABCDEFG", "ABCDFG",
};

}  // namespace

DigitBank procedural_digits() {
  DigitBank bank;
  bank.source = "procedural";
  for (int d = 0; d < 10; ++d) {
    DigitGlyph glyph;
    glyph.label = d;
    glyph.pixels.assign(kGlyphSize * kGlyphSize, 0.0f);
    for (const char* seg = kDigitSegments[d]; *seg; ++seg) {
      const SegmentBox box = segment_box(*seg);
      for (std::size_t y = box.y0; y < box.y1; ++y) {
        for (std::size_t x = box.x0; x < box.x1; ++x) {
          glyph.pixels[y * kGlyphSize + x] = 1.0f;
        }
      }
    }
    bank.glyphs.push_back(std::move(glyph));
  }
  bank.build_index();
  bank.validate();
  return bank;
}

void GenerateConfig::validate() const {
  if (count == 0) throw ConfigError("generate: count must be >= 1");
  if (image_size < 8) throw ConfigError("generate: image size must be >= 8");
  if (!(scale_min > 0.0) || scale_min > scale_max || scale_max > 1.0) {
    throw ConfigError("generate: scale range [" + std::to_string(scale_min) + "," +
                      std::to_string(scale_max) +
                      "] must satisfy 0 < min <= max <= 1 (fractions of image size)");
  }
  if (static_cast<std::size_t>(scale_min * static_cast<double>(image_size)) < 1 &&
      scale_min * static_cast<double>(image_size) < 1.0) {
    throw ConfigError("generate: minimum digit size below one pixel");
  }
}

namespace {

// All ordered d-tuples of digits 0-9 summing to `total`.
void enumerate_compositions(int total, int slots, std::vector<int>& prefix,
                            std::vector<std::vector<int>>& out) {
  if (slots == 1) {
    if (total <= 9) {
      prefix.push_back(total);
      out.push_back(prefix);
      prefix.pop_back();
    }
    return;
  }
  for (int d = 0; d <= std::min(9, total); ++d) {
    prefix.push_back(d);
    enumerate_compositions(total - d, slots - 1, prefix, out);
    prefix.pop_back();
  }
}

// Bilinear resample of a glyph onto a t x t box.
std::vector<float> resize_glyph(const std::vector<float>& src, std::size_t target) {
  std::vector<float> dst(target * target, 0.0f);
  const double scale = static_cast<double>(kGlyphSize) / static_cast<double>(target);
  for (std::size_t y = 0; y < target; ++y) {
    const double sy = (static_cast<double>(y) + 0.5) * scale - 0.5;
    const double fy = std::clamp(sy, 0.0, static_cast<double>(kGlyphSize - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, kGlyphSize - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target; ++x) {
      const double sx = (static_cast<double>(x) + 0.5) * scale - 0.5;
      const double fx = std::clamp(sx, 0.0, static_cast<double>(kGlyphSize - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, kGlyphSize - 1);
      const double wx = fx - static_cast<double>(x0);
      const double v = (1 - wy) * ((1 - wx) * src[y0 * kGlyphSize + x0] +
                                   wx * src[y0 * kGlyphSize + x1]) +
                       wy * ((1 - wx) * src[y1 * kGlyphSize + x0] +
                             wx * src[y1 * kGlyphSize + x1]);
      dst[y * target + x] = static_cast<float>(v);
    }
  }
  return dst;
}

struct Box {
  std::size_t x, y, size;
};

bool boxes_overlap(const Box& a, const Box& b) {
  // A one-pixel gap keeps digits visually separate.
  const std::size_t margin = 1;
  return a.x < b.x + b.size + margin && b.x < a.x + a.size + margin &&
         a.y < b.y + b.size + margin && b.y < a.y + a.size + margin;
}

UltraSample make_sample(const DigitBank& bank, const GenerateConfig& cfg,
                        int target_label, std::uint64_t sample_seed) {
  constexpr int kMaxLayoutRetries = 1000;
  constexpr int kMaxPositionTries = 100;
  const std::size_t m = cfg.image_size;

  for (int attempt = 0; attempt < kMaxLayoutRetries; ++attempt) {
    Rng rng(derive_seed(sample_seed, static_cast<std::uint64_t>(attempt)));

    const int digit_count = 3 + static_cast<int>(rng.below(3));
    std::vector<std::vector<int>> compositions;
    std::vector<int> prefix;
    enumerate_compositions(target_label, digit_count, prefix, compositions);
    const std::vector<int>& digits =
        compositions[static_cast<std::size_t>(rng.below(compositions.size()))];

    // Place largest first; small boxes slot into the gaps more easily.
    std::vector<std::size_t> sizes;
    for (int i = 0; i < digit_count; ++i) {
      const double px = rng.uniform(cfg.scale_min, cfg.scale_max) *
                        static_cast<double>(m);
      sizes.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(px))));
    }
    std::vector<std::size_t> order(sizes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return sizes[a] > sizes[b]; });

    std::vector<Box> boxes(sizes.size());
    bool placed_all = true;
    for (std::size_t oi = 0; oi < order.size() && placed_all; ++oi) {
      const std::size_t i = order[oi];
      const std::size_t sz = std::min(sizes[i], m);
      bool placed = false;
      for (int t = 0; t < kMaxPositionTries; ++t) {
        Box candidate{static_cast<std::size_t>(rng.below(m - sz + 1)),
                      static_cast<std::size_t>(rng.below(m - sz + 1)), sz};
        bool clash = false;
        for (std::size_t oj = 0; oj < oi; ++oj) {
          if (boxes_overlap(candidate, boxes[order[oj]])) {
            clash = true;
            break;
          }
        }
        if (!clash) {
          boxes[i] = candidate;
          placed = true;
          break;
        }
      }
      placed_all = placed;
    }
    if (!placed_all) continue;  // relayout with a new sub-seed

    UltraSample sample;
    sample.seed = sample_seed;
    sample.label = target_label;
    sample.image = Tensor<float>::zeros({1, m, m});
    auto pixels = sample.image.values_mut();
    for (std::size_t i = 0; i < digits.size(); ++i) {
      const auto& candidates = bank.by_class[static_cast<std::size_t>(digits[i])];
      const std::size_t glyph_index =
          candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
      const std::vector<float> scaled =
          resize_glyph(bank.glyphs[glyph_index].pixels, boxes[i].size);
      for (std::size_t y = 0; y < boxes[i].size; ++y) {
        for (std::size_t x = 0; x < boxes[i].size; ++x) {
          float& px = pixels[(boxes[i].y + y) * m + boxes[i].x + x];
          px = std::max(px, scaled[y * boxes[i].size + x]);
        }
      }
      sample.provenance.push_back(
          {digits[i], glyph_index, boxes[i].size, boxes[i].x, boxes[i].y});
    }
    return sample;
  }
  throw ValueError("generate: could not place digits after " +
                   std::to_string(kMaxLayoutRetries) +
                   " layout attempts; narrow the scale range");
}

}  // namespace

Dataset generate_ultramnist(const DigitBank& bank, const GenerateConfig& cfg) {
  cfg.validate();
  bank.validate();
  Dataset ds;
  ds.image_size = cfg.image_size;
  ds.samples.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const int label = static_cast<int>(i % 10);  // exact stratification
    const std::uint64_t sample_seed = derive_seed(cfg.seed, i);
    ds.samples.push_back(make_sample(bank, cfg, label, sample_seed));
  }
  return ds;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

namespace {

std::string record_name(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%06zu.bin", id);
  return buf;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream index(fs::path(dir) / "index.csv", std::ios::trunc);
  if (!index) throw IoError("dataset: cannot write index in '" + dir + "'");
  index << "id,label,seed\n";
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    index << i << "," << s.label << "," << s.seed << "\n";
    write_tensor_record((fs::path(dir) / record_name(i)).string(), s.image.shape(),
                        s.image.values());
  }
  if (!index) throw IoError("dataset: short write to index in '" + dir + "'");
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream index(fs::path(dir) / "index.csv");
  if (!index) throw IoError("dataset: cannot open index in '" + dir + "'");
  std::string line;
  if (!std::getline(index, line) || line != "id,label,seed") {
    throw IoError("dataset: bad index header in '" + dir + "'");
  }
  Dataset ds;
  std::size_t expected_id = 0;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id_str, label_str, seed_str;
    if (!std::getline(row, id_str, ',') || !std::getline(row, label_str, ',') ||
        !std::getline(row, seed_str)) {
      throw IoError("dataset: malformed index row '" + line + "'");
    }
    const std::size_t id = std::stoull(id_str);
    if (id != expected_id) {
      throw IoError("dataset: index row " + std::to_string(expected_id) +
                    " has id " + std::to_string(id));
    }
    const std::string rec_path = (fs::path(dir) / record_name(id)).string();
    if (!fs::exists(rec_path)) {
      throw IoError("dataset: missing record '" + rec_path + "'");
    }
    TensorRecord rec = read_tensor_record(rec_path);
    if (rec.elem_bytes != 4 || rec.shape.size() != 3 || rec.shape[0] != 1 ||
        rec.shape[1] != rec.shape[2]) {
      throw IoError("dataset: record '" + rec_path + "' is not a [1,M,M] f32 image");
    }
    UltraSample s;
    s.label = std::stoi(label_str);
    if (s.label < 0 || s.label > 9) {
      throw IoError("dataset: label out of range in row " + std::to_string(id));
    }
    s.seed = std::stoull(seed_str);
    s.image = Tensor<float>::from_values(rec.shape, std::move(rec.f32));
    if (ds.samples.empty()) {
      ds.image_size = s.image.dim(1);
    } else if (s.image.dim(1) != ds.image_size) {
      throw IoError("dataset: mixed image sizes in '" + dir + "'");
    }
    ds.samples.push_back(std::move(s));
    ++expected_id;
  }
  // Detect extra records not covered by the index.
  std::size_t record_files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("sample_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".bin") {
      ++record_files;
    }
  }
  if (record_files != ds.samples.size()) {
    throw IoError("dataset: index lists " + std::to_string(ds.samples.size()) +
                  " samples but directory holds " + std::to_string(record_files) +
                  " records");
  }
  if (ds.samples.empty()) throw IoError("dataset: '" + dir + "' is empty");
  return ds;
}

}  // namespace patchgd

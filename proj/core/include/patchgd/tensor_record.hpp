#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace patchgd {

// Binary tensor record: magic, element width, dims, then raw little-endian
// data. Used for dataset samples and latent-grid dumps.
//   "PGTENSR1" | u32 elem_bytes (4|8) | u32 ndim | u64 dims[ndim] | payload

void write_tensor_record(const std::string& path,
                         const std::vector<std::size_t>& shape,
                         std::span<const float> values);
void write_tensor_record(const std::string& path,
                         const std::vector<std::size_t>& shape,
                         std::span<const double> values);

struct TensorRecord {
  std::vector<std::size_t> shape;
  std::size_t elem_bytes = 0;
  std::vector<float> f32;
  std::vector<double> f64;
};

TensorRecord read_tensor_record(const std::string& path);

}  // namespace patchgd

#include "patchgd/tensor_record.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "patchgd/errors.hpp"

namespace patchgd {

namespace {

constexpr char kMagic[8] = {'P', 'G', 'T', 'E', 'N', 'S', 'R', '1'};

template <typename T>
void write_record_impl(const std::string& path, const std::vector<std::size_t>& shape,
                       std::span<const T> values) {
  std::size_t count = 1;
  for (std::size_t d : shape) count *= d;
  if (count != values.size()) {
    throw ValueError("tensor record: " + std::to_string(values.size()) +
                     " values do not fill the declared shape");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("tensor record: cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t elem_bytes = sizeof(T);
  const std::uint32_t ndim = static_cast<std::uint32_t>(shape.size());
  out.write(reinterpret_cast<const char*>(&elem_bytes), sizeof(elem_bytes));
  out.write(reinterpret_cast<const char*>(&ndim), sizeof(ndim));
  for (std::size_t d : shape) {
    const std::uint64_t d64 = d;
    out.write(reinterpret_cast<const char*>(&d64), sizeof(d64));
  }
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!out) throw IoError("tensor record: short write to '" + path + "'");
}

}  // namespace

void write_tensor_record(const std::string& path,
                         const std::vector<std::size_t>& shape,
                         std::span<const float> values) {
  write_record_impl(path, shape, values);
}

void write_tensor_record(const std::string& path,
                         const std::vector<std::size_t>& shape,
                         std::span<const double> values) {
  write_record_impl(path, shape, values);
}

TensorRecord read_tensor_record(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("tensor record: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("tensor record: bad magic in '" + path + "'");
  }
  std::uint32_t elem_bytes = 0, ndim = 0;
  in.read(reinterpret_cast<char*>(&elem_bytes), sizeof(elem_bytes));
  in.read(reinterpret_cast<char*>(&ndim), sizeof(ndim));
  if (!in || (elem_bytes != 4 && elem_bytes != 8) || ndim > 16) {
    throw IoError("tensor record: corrupt header in '" + path + "'");
  }
  TensorRecord rec;
  rec.elem_bytes = elem_bytes;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint64_t d = 0;
    in.read(reinterpret_cast<char*>(&d), sizeof(d));
    if (!in) throw IoError("tensor record: truncated dims in '" + path + "'");
    rec.shape.push_back(static_cast<std::size_t>(d));
    count *= static_cast<std::size_t>(d);
  }
  if (elem_bytes == 4) {
    rec.f32.resize(count);
    in.read(reinterpret_cast<char*>(rec.f32.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    rec.f64.resize(count);
    in.read(reinterpret_cast<char*>(rec.f64.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  }
  if (!in || in.gcount() != static_cast<std::streamsize>(count * elem_bytes)) {
    throw IoError("tensor record: truncated payload in '" + path + "' at byte " +
                  std::to_string(static_cast<long long>(in.tellg())));
  }
  return rec;
}

}  // namespace patchgd

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patchgd/adam.hpp"
#include "patchgd/errors.hpp"
#include "patchgd/tensor.hpp"

namespace patchgd {

// Checkpoint layout:
//   "PGDCKPT1" | u64 header_len | JSON header | raw little-endian arrays
// The header manifests parameter names, shapes and dtype; arrays follow in
// manifest order (values, then Adam moments m and v per parameter when
// optimizer state is included).

namespace detail {
inline constexpr char kCkptMagic[8] = {'P', 'G', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename S>
const char* dtype_name() {
  return sizeof(S) == 4 ? "float32" : "float64";
}
}  // namespace detail

template <typename S>
struct LoadedCheckpoint {
  std::string mode;
  std::size_t epoch = 0;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<S>> values;
  bool has_optimizer = false;
  std::int64_t adam_t = 0;
  std::vector<std::vector<S>> adam_m, adam_v;

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<int>(i);
    }
    return -1;
  }
};

template <typename S>
void save_checkpoint(const std::string& path, const std::string& mode,
                     std::size_t epoch, const std::vector<NamedParam<S>>& params,
                     const Adam<S>* optimizer = nullptr) {
  nlohmann::json header;
  header["version"] = 1;
  header["mode"] = mode;
  header["epoch"] = epoch;
  header["dtype"] = detail::dtype_name<S>();
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& p : params) {
    nlohmann::json entry;
    entry["name"] = p.name;
    entry["shape"] = p.tensor.shape();
    plist.push_back(entry);
  }
  header["params"] = plist;
  header["optimizer"] = nlohmann::json::object();
  header["optimizer"]["present"] = optimizer != nullptr;
  header["optimizer"]["t"] = optimizer ? optimizer->step_count() : 0;

  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  const std::uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor.values().data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(S)));
  }
  if (optimizer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.write(reinterpret_cast<const char*>(optimizer->moment1(i).data()),
                static_cast<std::streamsize>(optimizer->moment1(i).size() * sizeof(S)));
      out.write(reinterpret_cast<const char*>(optimizer->moment2(i).data()),
                static_cast<std::streamsize>(optimizer->moment2(i).size() * sizeof(S)));
    }
  }
  if (!out) throw IoError("checkpoint: short write to '" + path + "'");
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: bad magic in '" + path + "'");
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (std::uint64_t{1} << 30)) {
    throw IoError("checkpoint: corrupt header length in '" + path + "'");
  }
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("checkpoint: truncated header in '" + path + "'");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: unparseable header in '" + path + "': " + e.what());
  }

  LoadedCheckpoint<S> ckpt;
  try {
    ckpt.mode = header.at("mode").get<std::string>();
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    const std::string dtype = header.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<S>()) {
      throw IoError("checkpoint: dtype " + dtype + " does not match engine dtype " +
                    detail::dtype_name<S>());
    }
    for (const auto& entry : header.at("params")) {
      ckpt.names.push_back(entry.at("name").get<std::string>());
      ckpt.shapes.push_back(entry.at("shape").get<Shape>());
    }
    ckpt.has_optimizer = header.at("optimizer").at("present").get<bool>();
    ckpt.adam_t = header.at("optimizer").at("t").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: malformed header in '" + path + "': " + e.what());
  }

  auto read_array = [&](std::size_t count, const std::string& what) {
    std::vector<S> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(count * sizeof(S)));
    if (!in) throw IoError("checkpoint: truncated data for " + what + " in '" + path + "'");
    return buf;
  };
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    ckpt.values.push_back(read_array(numel(ckpt.shapes[i]), ckpt.names[i]));
  }
  if (ckpt.has_optimizer) {
    for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
      ckpt.adam_m.push_back(read_array(numel(ckpt.shapes[i]), ckpt.names[i] + ".m"));
      ckpt.adam_v.push_back(read_array(numel(ckpt.shapes[i]), ckpt.names[i] + ".v"));
    }
  }
  return ckpt;
}

// Copies matching parameters by name. With allow_partial, unmatched model
// parameters keep their current (fresh) values; otherwise every model
// parameter must be present. `remap_prefix` maps checkpoint names on the
// fly, e.g. {"model.", "f."} to warm-start a patch extractor from a
// whole-image backbone run; skip_shape_mismatch then tolerates layers whose
// widths differ (the projection layer, typically). Returns the number of
// parameters loaded.
template <typename S>
std::size_t load_params_into(const LoadedCheckpoint<S>& ckpt,
                             std::vector<NamedParam<S>>& params, bool allow_partial,
                             std::pair<std::string, std::string> remap_prefix = {},
                             bool skip_shape_mismatch = false) {
  auto remapped = [&](std::string name) {
    if (!remap_prefix.first.empty() && name.rfind(remap_prefix.first, 0) == 0) {
      name = remap_prefix.second + name.substr(remap_prefix.first.size());
    }
    return name;
  };
  std::size_t loaded = 0;
  for (auto& p : params) {
    int idx = -1;
    for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
      if (remapped(ckpt.names[i]) == p.name) {
        idx = static_cast<int>(i);
        break;
      }
    }
    if (idx < 0) {
      if (allow_partial) continue;
      throw IoError("checkpoint: missing parameter '" + p.name + "'");
    }
    if (ckpt.shapes[idx] != p.tensor.shape()) {
      if (skip_shape_mismatch) continue;
      throw IoError("checkpoint: shape mismatch for parameter '" + p.name + "': file has " +
                    shape_str(ckpt.shapes[idx]) + ", model has " +
                    shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.values_mut();
    const auto& src = ckpt.values[idx];
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i];
    ++loaded;
  }
  return loaded;
}

}  // namespace patchgd

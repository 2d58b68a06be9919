#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace patchgd {

// Flat `namespace.key = value` text format used for run configs and
// manifests. Keys are unique; `#` starts a comment; blank lines are ignored.
// Serialization is canonical (sorted keys), so equal maps produce equal bytes.
class KeyFile {
 public:
  KeyFile() = default;

  static KeyFile parse(const std::string& text);
  static KeyFile load(const std::string& path);

  std::string serialize() const;
  void save(const std::string& path) const;

  bool has(const std::string& key) const;
  void set(const std::string& key, const std::string& value);
  void erase(const std::string& key);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated unsigned list, e.g. "8,16,32".
  std::vector<std::size_t> get_uint_list(const std::string& key,
                                         std::vector<std::size_t> fallback) const;

  // Later maps win on conflicts.
  void merge_from(const KeyFile& overrides);

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace patchgd

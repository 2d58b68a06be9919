#include "patchgd/keyfile.hpp"

#include <fstream>
#include <sstream>

#include "patchgd/errors.hpp"

namespace patchgd {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyFile KeyFile::parse(const std::string& text) {
  KeyFile kf;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                        line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    }
    kf.entries_[key] = value;
  }
  return kf;
}

KeyFile KeyFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string KeyFile::serialize() const {
  std::ostringstream out;
  for (const auto& [key, value] : entries_) {
    out << key << " = " << value << "\n";
  }
  return out.str();
}

void KeyFile::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("config: cannot write '" + path + "'");
  out << serialize();
  if (!out) throw IoError("config: short write to '" + path + "'");
}

bool KeyFile::has(const std::string& key) const { return entries_.count(key) > 0; }

void KeyFile::set(const std::string& key, const std::string& value) {
  entries_[key] = value;
}

void KeyFile::erase(const std::string& key) { entries_.erase(key); }

std::string KeyFile::get_string(const std::string& key,
                                const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

std::int64_t KeyFile::get_int(const std::string& key, std::int64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer: '" + it->second + "'");
  }
}

std::uint64_t KeyFile::get_uint(const std::string& key, std::uint64_t fallback) const {
  const std::int64_t v = get_int(key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw ConfigError("config: key '" + key + "' must be non-negative");
  return static_cast<std::uint64_t>(v);
}

double KeyFile::get_double(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number: '" + it->second + "'");
  }
}

bool KeyFile::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config: key '" + key + "' is not a boolean: '" + it->second + "'");
}

std::vector<std::size_t> KeyFile::get_uint_list(
    const std::string& key, std::vector<std::size_t> fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::vector<std::size_t> out;
  std::istringstream in(it->second);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' has a non-integer item: '" + item + "'");
    }
  }
  if (out.empty()) {
    throw ConfigError("config: key '" + key + "' is an empty list");
  }
  return out;
}

void KeyFile::merge_from(const KeyFile& overrides) {
  for (const auto& [key, value] : overrides.entries_) {
    entries_[key] = value;
  }
}

}  // namespace patchgd

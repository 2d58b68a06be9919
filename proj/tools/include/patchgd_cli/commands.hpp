#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchgd/keyfile.hpp"

namespace patchgd::cli {

// Flag-level options shared by the subcommands. Precedence when resolving
// the effective configuration: named flags > --set overrides > config file
// > built-in defaults.
struct CommonFlags {
  std::string config_path;
  std::vector<std::string> overrides;  // repeatable --set key=value
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string mode;
  std::optional<std::uint64_t> enforce_budget;
};

// Fully resolved configuration: every known key present with its effective
// value, suitable for writing as a replayable manifest.
KeyFile resolve_config(const CommonFlags& flags);

// Deterministic hex id over the resolved configuration.
std::string run_id(const KeyFile& resolved);

int cmd_generate(const CommonFlags& flags, std::optional<std::uint64_t> count);
int cmd_train(const CommonFlags& flags);
int cmd_eval(const CommonFlags& flags, const std::string& checkpoint,
             const std::string& data_dir);
int cmd_sweep(const CommonFlags& flags, const std::string& axis,
              const std::vector<std::string>& values);
int cmd_memreport(const CommonFlags& flags, bool csv);

}  // namespace patchgd::cli

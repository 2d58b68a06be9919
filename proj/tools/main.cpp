#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "patchgd/errors.hpp"
#include "patchgd_cli/commands.hpp"

namespace {

void add_common(CLI::App* cmd, patchgd::cli::CommonFlags& flags,
                std::optional<std::uint64_t>& seed_opt,
                std::optional<std::uint64_t>& budget_opt) {
  cmd->add_option("--config", flags.config_path, "Config or manifest file");
  cmd->add_option("--set", flags.overrides, "Override a config key (key=value)");
  cmd->add_option("--seed", seed_opt, "Root seed (overrides train.seed)");
  cmd->add_option("--out", flags.out_dir, "Output directory");
  cmd->add_option("--mode", flags.mode, "patchgd|gd|gd_extended")
      ->check(CLI::IsMember({"patchgd", "gd", "gd_extended"}));
  cmd->add_option("--enforce-budget", budget_opt, "Modeled memory budget in bytes");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-based CNN training on large images"};
  app.require_subcommand(1);

  patchgd::cli::CommonFlags flags;
  std::optional<std::uint64_t> seed_opt, budget_opt, count_opt;

  auto* generate = app.add_subcommand("generate", "Synthesize a digit-sum dataset");
  add_common(generate, flags, seed_opt, budget_opt);
  generate->add_option("--count", count_opt, "Number of samples");

  auto* train = app.add_subcommand("train", "Train a model and write checkpoints");
  add_common(train, flags, seed_opt, budget_opt);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  add_common(eval, flags, seed_opt, budget_opt);
  std::string checkpoint, data_dir;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Train once per axis value");
  add_common(sweep, flags, seed_opt, budget_opt);
  std::string axis;
  std::vector<std::string> values;
  sweep->add_option("--axis", axis, "sampling|max_sampled|epsilon|patch_size")->required();
  sweep->add_option("--values", values, "Axis values")->required()->delimiter(',');

  auto* memreport = app.add_subcommand("memreport", "Modeled gd vs patchgd footprint");
  add_common(memreport, flags, seed_opt, budget_opt);
  bool csv = false;
  memreport->add_flag("--csv", csv, "Emit CSV instead of a table");

  CLI11_PARSE(app, argc, argv);
  flags.seed = seed_opt;
  flags.enforce_budget = budget_opt;

  try {
    if (generate->parsed()) return patchgd::cli::cmd_generate(flags, count_opt);
    if (train->parsed()) return patchgd::cli::cmd_train(flags);
    if (eval->parsed()) return patchgd::cli::cmd_eval(flags, checkpoint, data_dir);
    if (sweep->parsed()) return patchgd::cli::cmd_sweep(flags, axis, values);
    if (memreport->parsed()) return patchgd::cli::cmd_memreport(flags, csv);
  } catch (const patchgd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

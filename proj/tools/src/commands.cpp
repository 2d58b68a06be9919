#include "patchgd_cli/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "patchgd/checkpoint.hpp"
#include "patchgd/data.hpp"
#include "patchgd/errors.hpp"
#include "patchgd/memcost.hpp"
#include "patchgd/metrics.hpp"
#include "patchgd/model.hpp"
#include "patchgd/trainer.hpp"

namespace patchgd::cli {

namespace fs = std::filesystem;

namespace {

// Every key the tool understands, with its default. resolve_config emits all
// of them so a manifest is self-contained.
const std::vector<std::pair<const char*, const char*>> kDefaults = {
    {"data.train_dir", ""},
    {"data.val_dir", ""},
    {"generate.count", "1000"},
    {"generate.image_size", "128"},
    {"generate.scale_min", "0.05"},
    {"generate.scale_max", "0.6"},
    {"generate.digit_source", "procedural"},
    {"generate.idx_images", ""},
    {"generate.idx_labels", ""},
    {"model.embed_dim", "64"},
    {"model.head_channels", "256"},
    {"model.backbone_channels", ""},
    {"model.bias_init", "0.0"},
    {"model.classes", "10"},
    {"train.mode", "patchgd"},
    {"train.patch_size", "32"},
    {"train.inner_iters", "8"},
    {"train.patches_per_iter", "0"},
    {"train.sampling_fraction", "0.1"},
    {"train.batch_size", "16"},
    {"train.lr_peak", "0.001"},
    {"train.lr_warmup_epochs", "2"},
    {"train.lr_total_epochs", "0"},
    {"train.grad_accum", "1"},
    {"train.max_coverage", "1.0"},
    {"train.epochs", "30"},
    {"train.seed", "0"},
    {"train.flush_remainder", "false"},
    {"train.resume", ""},
    {"train.init_backbone", ""},
    {"train.eval_batch", "32"},
    {"log.wall_time", "false"},
};

bool known_key(const std::string& key) {
  for (const auto& [name, value] : kDefaults) {
    if (key == name) return true;
  }
  return key == "run.id";
}

}  // namespace

KeyFile resolve_config(const CommonFlags& flags) {
  KeyFile resolved;
  for (const auto& [key, value] : kDefaults) resolved.set(key, value);

  if (!flags.config_path.empty()) {
    KeyFile file = KeyFile::load(flags.config_path);
    for (const auto& [key, value] : file.entries()) {
      if (!known_key(key)) {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    }
    file.erase("run.id");  // manifests replay; the id is recomputed
    resolved.merge_from(file);
  }
  for (const std::string& kv : flags.overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    }
    const std::string key = kv.substr(0, eq);
    if (!known_key(key)) throw ConfigError("--set: unknown key '" + key + "'");
    resolved.set(key, kv.substr(eq + 1));
  }
  if (flags.seed) resolved.set("train.seed", std::to_string(*flags.seed));
  if (!flags.mode.empty()) resolved.set("train.mode", flags.mode);
  return resolved;
}

std::string run_id(const KeyFile& resolved) {
  KeyFile without_id = resolved;
  without_id.erase("run.id");
  const std::string text = without_id.serialize();
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

TrainConfig train_config_from(const KeyFile& cfg) {
  TrainConfig tc;
  tc.mode = train_mode_from_string(cfg.get_string("train.mode", "patchgd"));
  tc.patch_size = cfg.get_uint("train.patch_size", 32);
  tc.inner_iters = cfg.get_uint("train.inner_iters", 8);
  tc.patches_per_iter = cfg.get_uint("train.patches_per_iter", 0);
  tc.sampling_fraction = cfg.get_double("train.sampling_fraction", 0.1);
  tc.batch_size = cfg.get_uint("train.batch_size", 16);
  tc.lr_peak = cfg.get_double("train.lr_peak", 1e-3);
  tc.lr_warmup_epochs = cfg.get_uint("train.lr_warmup_epochs", 2);
  tc.lr_total_epochs = cfg.get_uint("train.lr_total_epochs", 0);
  tc.grad_accum = cfg.get_uint("train.grad_accum", 1);
  tc.max_coverage = cfg.get_double("train.max_coverage", 1.0);
  tc.epochs = cfg.get_uint("train.epochs", 30);
  tc.seed = cfg.get_uint("train.seed", 0);
  tc.embed_dim = cfg.get_uint("model.embed_dim", 64);
  tc.classes = cfg.get_uint("model.classes", 10);
  tc.head_channels = cfg.get_uint("model.head_channels", 256);
  if (!cfg.get_string("model.backbone_channels", "").empty()) {
    tc.backbone_channels = cfg.get_uint_list("model.backbone_channels", {});
  }
  tc.bias_init = cfg.get_double("model.bias_init", 0.0);
  tc.flush_remainder = cfg.get_bool("train.flush_remainder", false);
  return tc;
}

GenerateConfig generate_config_from(const KeyFile& cfg) {
  GenerateConfig gc;
  gc.count = cfg.get_uint("generate.count", 1000);
  gc.image_size = cfg.get_uint("generate.image_size", 128);
  gc.scale_min = cfg.get_double("generate.scale_min", 0.05);
  gc.scale_max = cfg.get_double("generate.scale_max", 0.6);
  gc.seed = cfg.get_uint("train.seed", 0);
  return gc;
}

DigitBank digit_bank_from(const KeyFile& cfg) {
  const std::string source = cfg.get_string("generate.digit_source", "procedural");
  if (source == "procedural") return procedural_digits();
  if (source == "idx") {
    const std::string images = cfg.get_string("generate.idx_images", "");
    const std::string labels = cfg.get_string("generate.idx_labels", "");
    if (images.empty() || labels.empty()) {
      throw ConfigError("generate: digit_source=idx needs generate.idx_images and "
                        "generate.idx_labels");
    }
    return load_idx(images, labels);
  }
  throw ConfigError("generate: digit_source must be procedural|idx, got '" + source + "'");
}

void write_manifest(const KeyFile& resolved, const std::string& out_dir) {
  KeyFile manifest = resolved;
  manifest.set("run.id", run_id(resolved));
  fs::create_directories(out_dir);
  manifest.save((fs::path(out_dir) / "manifest.txt").string());
}

struct ModeledReports {
  MemoryReport gd;
  MemoryReport patchgd;
};

// Analytic footprint for the configured geometry (dataset not required).
ModeledReports modeled_reports(const KeyFile& cfg, std::size_t batch) {
  TrainConfig tc = train_config_from(cfg);
  const std::size_t image_size = cfg.get_uint("generate.image_size", 128);
  const std::size_t in_channels = 1;

  TrainConfig patch_cfg = tc;
  patch_cfg.mode = TrainMode::kPatchGD;
  const std::size_t padded =
      (image_size + tc.patch_size - 1) / tc.patch_size * tc.patch_size;
  GridSpec grid{padded, padded, tc.patch_size};
  auto model = PatchGDModel<float>::build(patch_cfg, in_channels);
  const std::size_t k = tc.effective_patches_per_iter(grid.cell_count());
  const std::size_t fill_batch =
      std::min(ZBlock<float>::kDefaultFillChunk, grid.cell_count());

  TrainConfig gd_cfg = tc;
  gd_cfg.mode = TrainMode::kGD;
  auto composite = build_composite<float>(gd_cfg, in_channels, image_size);

  ModeledReports reports;
  reports.patchgd = estimate_patchgd(
      model.features.plan(k * batch), model.features.plan(fill_batch),
      model.head.plan(batch, grid.rows(), grid.cols()),
      batch * grid.cell_count() * tc.embed_dim, sizeof(float));
  reports.gd = estimate_gd(composite.plan(batch, image_size, image_size), sizeof(float));
  return reports;
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

}  // namespace

int cmd_generate(const CommonFlags& flags, std::optional<std::uint64_t> count) {
  KeyFile resolved = resolve_config(flags);
  if (count) resolved.set("generate.count", std::to_string(*count));
  if (flags.out_dir.empty()) throw ConfigError("generate: --out is required");

  GenerateConfig gc = generate_config_from(resolved);
  gc.validate();
  DigitBank bank = digit_bank_from(resolved);
  Dataset ds = generate_ultramnist(bank, gc);
  save_dataset(ds, flags.out_dir);
  write_manifest(resolved, flags.out_dir);

  std::vector<std::size_t> histogram(10, 0);
  for (const auto& s : ds.samples) ++histogram[static_cast<std::size_t>(s.label)];
  std::cout << "generated " << ds.size() << " samples (" << gc.image_size << "x"
            << gc.image_size << ", digit source " << bank.source << ") into "
            << flags.out_dir << "\nlabel histogram:";
  for (std::size_t c = 0; c < histogram.size(); ++c) {
    std::cout << " " << c << ":" << histogram[c];
  }
  std::cout << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags) {
  KeyFile resolved = resolve_config(flags);
  if (flags.out_dir.empty()) throw ConfigError("train: --out is required");
  const std::string train_dir = resolved.get_string("data.train_dir", "");
  const std::string val_dir = resolved.get_string("data.val_dir", "");
  if (train_dir.empty() || val_dir.empty()) {
    throw ConfigError("train: data.train_dir and data.val_dir must be set");
  }

  TrainConfig tc = train_config_from(resolved);
  Dataset train = load_dataset(train_dir);
  Dataset val = load_dataset(val_dir);

  // Reject invariant violations before any compute.
  const std::size_t padded = tc.mode == TrainMode::kPatchGD
                                 ? (train.image_size + tc.patch_size - 1) /
                                       tc.patch_size * tc.patch_size
                                 : train.image_size;
  const std::size_t cells = tc.mode == TrainMode::kPatchGD
                                ? (padded / tc.patch_size) * (padded / tc.patch_size)
                                : 1;
  print_warnings(tc.validate(cells));

  if (flags.enforce_budget) {
    KeyFile sized = resolved;
    sized.set("generate.image_size", std::to_string(train.image_size));
    ModeledReports reports = modeled_reports(sized, tc.batch_size);
    const MemoryReport& active =
        tc.mode == TrainMode::kPatchGD ? reports.patchgd : reports.gd;
    if (active.peak_bytes > *flags.enforce_budget) {
      std::cerr << "refusing to train: modeled peak " << active.peak_bytes
                << " bytes exceeds budget " << *flags.enforce_budget
                << " bytes for mode " << to_string(tc.mode) << " at batch "
                << tc.batch_size << " (activations " << active.activation_bytes
                << ", parameters " << active.parameter_bytes << ")\n";
      return 2;
    }
  }

  write_manifest(resolved, flags.out_dir);

  FitOptions opts;
  opts.out_dir = flags.out_dir;
  opts.wall_time = resolved.get_bool("log.wall_time", false);
  opts.resume_from = resolved.get_string("train.resume", "");
  opts.init_backbone_from = resolved.get_string("train.init_backbone", "");
  opts.on_row = [](const RunLogRow& row) {
    std::cout << format_runlog_row(row) << "\n";
  };

  FitResult result = fit<float>(train, val, tc, opts);
  std::cout << "best val accuracy " << result.best_val_accuracy << " at epoch "
            << result.best_epoch << "\n";
  return 0;
}

namespace {

// Architecture hyperparameters are recovered from the checkpoint's parameter
// shapes, so evaluation needs no config file.
struct RebuiltModel {
  std::unique_ptr<PatchGDModel<float>> patch;
  std::unique_ptr<CompositeModel<float>> composite;
  std::string mode;
  std::size_t epoch = 0;
};

RebuiltModel rebuild_from_checkpoint(const std::string& path) {
  auto ckpt = load_checkpoint<float>(path);
  RebuiltModel out;
  out.mode = ckpt.mode;
  out.epoch = ckpt.epoch;

  auto block_channels = [&](const std::string& prefix) {
    std::vector<std::size_t> spec;
    for (std::size_t i = 0;; ++i) {
      const int idx = ckpt.find(prefix + ".block" + std::to_string(i) + ".weight");
      if (idx < 0) break;
      spec.push_back(ckpt.shapes[static_cast<std::size_t>(idx)][0]);
    }
    if (spec.empty()) throw IoError("checkpoint: no backbone blocks under '" + prefix + "'");
    return spec;
  };

  Rng rng(0);  // init values are immediately overwritten
  if (ckpt.mode == "patchgd") {
    const auto spec = block_channels("f");
    const int proj = ckpt.find("f.proj.weight");
    const int fc = ckpt.find("g.fc.weight");
    const int conv0 = ckpt.find("g.conv0.weight");
    if (proj < 0 || fc < 0 || conv0 < 0) {
      throw IoError("checkpoint: missing patchgd parameters in '" + path + "'");
    }
    const std::size_t embed_dim = ckpt.shapes[static_cast<std::size_t>(proj)][0];
    const std::size_t head_channels = ckpt.shapes[static_cast<std::size_t>(conv0)][0];
    const std::size_t classes = ckpt.shapes[static_cast<std::size_t>(fc)][0];
    const std::size_t in_channels = ckpt.shapes[static_cast<std::size_t>(
        ckpt.find("f.block0.weight"))][1];
    const std::size_t patch_size = std::size_t{1} << spec.size();
    FeatureExtractor<float> f(patch_size, in_channels, embed_dim, spec, rng);
    HeadNet<float> g(embed_dim, head_channels, classes, rng);
    out.patch = std::make_unique<PatchGDModel<float>>(
        PatchGDModel<float>{std::move(f), std::move(g)});
    auto params = out.patch->parameters();
    load_params_into(ckpt, params, /*allow_partial=*/false);
  } else {
    const auto spec = block_channels("model");
    const int proj = ckpt.find("model.proj.weight");
    if (proj < 0) throw IoError("checkpoint: missing projection in '" + path + "'");
    const std::size_t classes = ckpt.shapes[static_cast<std::size_t>(proj)][0];
    const std::size_t in_channels = ckpt.shapes[static_cast<std::size_t>(
        ckpt.find("model.block0.weight"))][1];
    const bool extended = ckpt.find("model.head.conv0.weight") >= 0;
    std::size_t head_channels = 1;
    if (extended) {
      head_channels = ckpt.shapes[static_cast<std::size_t>(
          ckpt.find("model.head.conv0.weight"))][0];
    }
    out.composite = std::make_unique<CompositeModel<float>>(
        in_channels, classes, spec, extended, head_channels, rng);
    auto params = out.composite->parameters();
    load_params_into(ckpt, params, /*allow_partial=*/false);
  }
  return out;
}

}  // namespace

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint,
             const std::string& data_dir) {
  if (checkpoint.empty() || data_dir.empty()) {
    throw ConfigError("eval: --checkpoint and --data are required");
  }
  KeyFile resolved = resolve_config(flags);
  const std::size_t eval_batch = resolved.get_uint("train.eval_batch", 32);

  Dataset data = load_dataset(data_dir);
  RebuiltModel model = rebuild_from_checkpoint(checkpoint);
  EvalMetrics metrics = model.patch
                            ? evaluate_patchgd(data, *model.patch, eval_batch)
                            : evaluate_composite(data, *model.composite, eval_batch);

  std::cout << "checkpoint " << checkpoint << " (mode " << model.mode << ", epoch "
            << model.epoch << ")\n";
  char line[128];
  std::snprintf(line, sizeof(line), "loss=%.6f accuracy=%.6f qwk=%.6f",
                metrics.loss, metrics.accuracy, metrics.qwk);
  std::cout << line << "\n";

  const std::string out_dir = flags.out_dir.empty()
                                  ? fs::path(checkpoint).parent_path().string()
                                  : flags.out_dir;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    RunLogRow row{model.epoch, "eval", metrics.loss, metrics.accuracy, metrics.qwk,
                  0.0,         0,      0.0};
    const auto log_path = fs::path(out_dir) / "runlog.csv";
    const bool header = !fs::exists(log_path);
    std::ofstream log(log_path, std::ios::app);
    if (!log) throw IoError("eval: cannot append to '" + log_path.string() + "'");
    if (header) log << kRunLogHeader << "\n";
    log << format_runlog_row(row) << "\n";
  }
  return 0;
}

int cmd_sweep(const CommonFlags& flags, const std::string& axis,
              const std::vector<std::string>& values) {
  if (flags.out_dir.empty()) throw ConfigError("sweep: --out is required");
  if (values.empty()) throw ConfigError("sweep: --values is required");

  std::string key;
  if (axis == "sampling") {
    key = "train.sampling_fraction";
  } else if (axis == "max_sampled") {
    key = "train.max_coverage";
  } else if (axis == "epsilon") {
    key = "train.grad_accum";
  } else if (axis == "patch_size") {
    key = "train.patch_size";
  } else {
    throw ConfigError("sweep: axis must be sampling|max_sampled|epsilon|patch_size, got '" +
                      axis + "'");
  }

  fs::create_directories(flags.out_dir);
  std::ostringstream csv;
  csv << "axis,value,sampling,max_sampled,accuracy,qwk,status\n";

  for (const std::string& value : values) {
    CommonFlags sub = flags;
    sub.overrides.push_back(key + "=" + value);
    if (axis == "sampling") {
      sub.overrides.push_back("train.patches_per_iter=0");
    }
    sub.out_dir = (fs::path(flags.out_dir) / (axis + "_" + value)).string();

    KeyFile sub_resolved = resolve_config(sub);
    const double sampling =
        sub_resolved.get_uint("train.patches_per_iter", 0)
            ? -1.0
            : sub_resolved.get_double("train.sampling_fraction", 0.1) * 100.0;
    const double max_sampled = sub_resolved.get_double("train.max_coverage", 1.0) * 100.0;

    char prefix[128];
    std::snprintf(prefix, sizeof(prefix), "%s,%s,%.1f,%.1f,", axis.c_str(),
                  value.c_str(), sampling, max_sampled);
    try {
      const int rc = cmd_train(sub);
      if (rc != 0) throw ConfigError("train exited with status " + std::to_string(rc));
      // Best validation row of the sub-run's log.
      const auto log_path = fs::path(sub.out_dir) / "runlog.csv";
      std::ifstream log(log_path);
      if (!log) throw IoError("sweep: missing runlog for " + sub.out_dir);
      std::string line;
      double best_acc = -1.0, best_qwk = 0.0;
      std::getline(log, line);  // header
      while (std::getline(log, line)) {
        std::istringstream row(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(row, field, ',')) fields.push_back(field);
        if (fields.size() < 5 || fields[1] != "val") continue;
        const double acc = std::stod(fields[3]);
        if (acc > best_acc) {
          best_acc = acc;
          best_qwk = std::stod(fields[4]);
        }
      }
      char rest[64];
      std::snprintf(rest, sizeof(rest), "%.6f,%.6f,ok", best_acc, best_qwk);
      csv << prefix << rest << "\n";
    } catch (const std::exception& e) {
      csv << prefix << "nan,nan,failed: " << e.what() << "\n";
      std::cerr << "sweep value " << value << " failed: " << e.what() << "\n";
    }
  }

  const auto csv_path = fs::path(flags.out_dir) / "sweep.csv";
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw IoError("sweep: cannot write '" + csv_path.string() + "'");
  out << csv.str();
  std::cout << csv.str();
  return 0;
}

int cmd_memreport(const CommonFlags& flags, bool csv) {
  KeyFile resolved = resolve_config(flags);
  const std::size_t batch = resolved.get_uint("train.batch_size", 16);
  ModeledReports reports = modeled_reports(resolved, batch);

  if (csv) {
    std::cout << format_report_csv(reports.gd, reports.patchgd);
  } else {
    std::cout << "modeled footprint at batch " << batch << ", image size "
              << resolved.get_uint("generate.image_size", 128) << ":\n"
              << format_report_table(reports.gd, reports.patchgd);
  }

  if (flags.enforce_budget) {
    const std::size_t budget = *flags.enforce_budget;
    auto gd_for_batch = [&](std::size_t b) { return modeled_reports(resolved, b).gd; };
    auto pg_for_batch = [&](std::size_t b) { return modeled_reports(resolved, b).patchgd; };
    std::cout << "max feasible batch under " << budget << " bytes: gd="
              << max_feasible_batch(gd_for_batch, budget)
              << " patchgd=" << max_feasible_batch(pg_for_batch, budget) << "\n";
  }
  return 0;
}

}  // namespace patchgd::cli

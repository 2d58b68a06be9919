#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "patchgd/adam.hpp"
#include "patchgd/checkpoint.hpp"
#include "patchgd/data.hpp"
#include "patchgd/errors.hpp"
#include "patchgd/memcost.hpp"
#include "patchgd/metrics.hpp"
#include "patchgd/model.hpp"
#include "patchgd/ops.hpp"
#include "patchgd/patching.hpp"
#include "patchgd/random.hpp"
#include "patchgd/zblock.hpp"

namespace patchgd {

enum class TrainMode { kPatchGD, kGD, kGDExtended };

inline std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kPatchGD: return "patchgd";
    case TrainMode::kGD: return "gd";
    case TrainMode::kGDExtended: return "gd_extended";
  }
  return "patchgd";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "patchgd") return TrainMode::kPatchGD;
  if (s == "gd") return TrainMode::kGD;
  if (s == "gd_extended") return TrainMode::kGDExtended;
  throw ConfigError("mode must be one of patchgd|gd|gd_extended, got '" + s + "'");
}

// Epoch learning rate: linear warm-up from zero to the peak, then linear
// decay down to half the peak at `total`, clamped beyond.
inline double lr_schedule(std::size_t epoch, double peak = 1e-3,
                          std::size_t warmup = 2, std::size_t total = 100) {
  if (warmup > 0 && epoch < warmup) {
    return peak * static_cast<double>(epoch) / static_cast<double>(warmup);
  }
  if (total <= warmup) return peak;
  const double t = static_cast<double>(std::min(epoch, total) - warmup);
  const double span = static_cast<double>(total - warmup);
  return peak * (1.0 - 0.5 * t / span);
}

// Hyperparameters for one training run.
struct TrainConfig {
  TrainMode mode = TrainMode::kPatchGD;
  std::size_t patch_size = 32;       // p
  std::size_t inner_iters = 8;       // zeta
  std::size_t patches_per_iter = 0;  // k; 0 derives it from sampling_fraction
  double sampling_fraction = 0.1;
  std::size_t batch_size = 16;  // B
  double lr_peak = 1e-3;        // alpha
  std::size_t lr_warmup_epochs = 2;
  std::size_t lr_total_epochs = 0;  // 0 -> epochs
  std::size_t grad_accum = 1;       // epsilon
  double max_coverage = 1.0;        // mu
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::size_t embed_dim = 64;  // s
  std::size_t classes = 10;    // c
  std::size_t head_channels = 256;
  std::vector<std::size_t> backbone_channels;  // empty -> defaults
  double bias_init = 0.0;  // conv bias start value; small positive values
                           // keep relus alive on sparse inputs
  bool flush_remainder = false;
  AdamConfig adam;

  std::size_t schedule_total() const { return lr_total_epochs ? lr_total_epochs : epochs; }

  std::size_t effective_patches_per_iter(std::size_t grid_cells) const {
    std::size_t k = patches_per_iter;
    if (k == 0) {
      k = static_cast<std::size_t>(
          std::ceil(sampling_fraction * static_cast<double>(grid_cells)));
    }
    return std::max<std::size_t>(1, std::min(k, grid_cells));
  }

  // Rejects invariant violations before any compute; returns warnings for
  // legal-but-odd settings.
  std::vector<std::string> validate(std::size_t grid_cells) const {
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train: batch size must be >= 1");
    if (classes < 2) throw ConfigError("train: classes must be >= 2");
    if (lr_peak < 0) throw ConfigError("train: negative learning rate");
    std::vector<std::string> warnings;
    if (mode != TrainMode::kPatchGD) return warnings;

    if (inner_iters == 0) throw ConfigError("train: inner iterations must be >= 1");
    if (grad_accum == 0) throw ConfigError("train: grad accumulation must be >= 1");
    if (grad_accum > inner_iters) {
      throw ConfigError("train: grad accumulation (" + std::to_string(grad_accum) +
                        ") exceeds inner iterations (" + std::to_string(inner_iters) + ")");
    }
    if (!(max_coverage > 0.0) || max_coverage > 1.0) {
      throw ConfigError("train: max coverage must be in (0,1]");
    }
    if (patches_per_iter == 0 &&
        (!(sampling_fraction > 0.0) || sampling_fraction > 1.0)) {
      throw ConfigError("train: sampling fraction must be in (0,1]");
    }
    if (embed_dim == 0) throw ConfigError("train: embed width must be >= 1");

    const std::size_t k = effective_patches_per_iter(grid_cells);
    const std::size_t budget = static_cast<std::size_t>(
        std::ceil(max_coverage * static_cast<double>(grid_cells)));
    const std::size_t runnable = (budget + k - 1) / k;
    if (std::min(runnable, inner_iters) < grad_accum && !flush_remainder) {
      throw ConfigError("train: sampler exhausts after " + std::to_string(runnable) +
                        " inner iterations, before the first optimizer update at " +
                        std::to_string(grad_accum));
    }
    if (max_coverage == 1.0 && k * inner_iters < grid_cells) {
      warnings.push_back("train: k*zeta = " + std::to_string(k * inner_iters) +
                         " < " + std::to_string(grid_cells) +
                         " grid cells; one outer iteration will not cover the grid");
    }
    if (k * inner_iters > budget) {
      warnings.push_back("train: k*zeta exceeds the coverage budget (" +
                         std::to_string(budget) +
                         "); late inner iterations will be skipped");
    }
    return warnings;
  }
};

// Gradient accumulation buffers (U1/U2 merged over the full parameter list).
template <typename S>
class GradAccumulator {
 public:
  GradAccumulator() = default;

  explicit GradAccumulator(const std::vector<NamedParam<S>>& params) {
    sums_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      sums_[i].assign(params[i].tensor.size(), S(0));
    }
  }

  // Adds each parameter's current grad (absent grads contribute zero).
  void accumulate(const std::vector<NamedParam<S>>& params) {
    if (params.size() != sums_.size()) {
      throw ShapeError("accumulator: parameter list changed size");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].tensor.has_grad()) continue;
      auto g = params[i].tensor.grad();
      for (std::size_t j = 0; j < g.size(); ++j) sums_[i][j] += g[j];
    }
    ++pending_;
  }

  std::vector<std::vector<S>> mean(std::size_t divisor) const {
    if (divisor == 0) throw ValueError("accumulator: zero divisor");
    std::vector<std::vector<S>> out = sums_;
    const S inv = S(1) / static_cast<S>(divisor);
    for (auto& buf : out) {
      for (S& v : buf) v *= inv;
    }
    return out;
  }

  void reset() {
    for (auto& buf : sums_) std::fill(buf.begin(), buf.end(), S(0));
    pending_ = 0;
  }

  std::size_t pending() const { return pending_; }

  bool is_zero() const {
    if (pending_) return false;
    for (const auto& buf : sums_) {
      for (S v : buf) {
        if (v != S(0)) return false;
      }
    }
    return true;
  }

 private:
  std::vector<std::vector<S>> sums_;
  std::size_t pending_ = 0;
};

// The f/g pair trained by the patch pipeline.
template <typename S>
struct PatchGDModel {
  FeatureExtractor<S> features;
  HeadNet<S> head;

  static PatchGDModel build(const TrainConfig& cfg, std::size_t in_channels) {
    Rng rng(derive_seed(cfg.seed, 0x6d6f64656cull));
    FeatureExtractor<S> f(cfg.patch_size, in_channels, cfg.embed_dim,
                          cfg.backbone_channels, rng,
                          static_cast<S>(cfg.bias_init));
    HeadNet<S> g(cfg.embed_dim, cfg.head_channels, cfg.classes, rng,
                 static_cast<S>(cfg.bias_init));
    return {std::move(f), std::move(g)};
  }

  std::vector<NamedParam<S>> parameters() {
    auto out = features.parameters("f");
    auto head_params = head.parameters("g");
    out.insert(out.end(), head_params.begin(), head_params.end());
    return out;
  }
};

template <typename S>
std::vector<std::size_t> default_composite_channels(std::size_t image_size) {
  std::vector<std::size_t> spec;
  std::size_t ch = 8;
  for (std::size_t sz = image_size; sz > 4; sz /= 2) {
    spec.push_back(ch);
    ch = std::min<std::size_t>(ch * 2, 64);
  }
  if (spec.empty()) spec.push_back(8);
  return spec;
}

template <typename S>
CompositeModel<S> build_composite(const TrainConfig& cfg, std::size_t in_channels,
                                  std::size_t image_size) {
  auto spec = cfg.backbone_channels.empty()
                  ? default_composite_channels<S>(image_size)
                  : cfg.backbone_channels;
  Rng rng(derive_seed(cfg.seed, 0x6d6f64656cull));
  return CompositeModel<S>(in_channels, cfg.classes, spec,
                           cfg.mode == TrainMode::kGDExtended, cfg.head_channels, rng,
                           static_cast<S>(cfg.bias_init));
}

template <typename S>
struct OuterResult {
  double mean_loss = 0.0;
  std::size_t optimizer_steps = 0;
  std::size_t inner_iterations_run = 0;
  std::vector<int> predictions;  // from the final inner iteration's logits
};

// One outer iteration over a mini-batch: full Z-fill under stop-gradient,
// then zeta inner iterations of sample -> partial Z update -> head loss ->
// accumulate, applying the optimizer every epsilon steps. Images whose
// sampler is exhausted drop out of later inner iterations.
template <typename S>
OuterResult<S> patchgd_outer_iteration(const std::vector<Tensor<S>>& images,
                                       const std::vector<int>& labels,
                                       PatchGDModel<S>& model, Adam<S>& optimizer,
                                       GradAccumulator<S>& accum,
                                       const TrainConfig& cfg, double lr,
                                       std::uint64_t sampler_seed) {
  if (images.empty() || images.size() != labels.size()) {
    throw ValueError("outer iteration: batch of " + std::to_string(images.size()) +
                     " images with " + std::to_string(labels.size()) + " labels");
  }
  GridSpec grid = GridSpec::for_image(images[0].dim(1), images[0].dim(2), cfg.patch_size);
  for (const auto& img : images) {
    if (img.dim(1) != grid.image_h || img.dim(2) != grid.image_w) {
      throw ShapeError("outer iteration: mixed image sizes in batch");
    }
  }
  const std::size_t k = cfg.effective_patches_per_iter(grid.cell_count());

  ZBlock<S> z(images.size(), grid, cfg.embed_dim);
  auto embed = [&model](const Tensor<S>& patches) { return model.features.forward(patches); };
  z.fill(images, embed);

  std::vector<PatchSampler> samplers;
  samplers.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    samplers.emplace_back(grid, cfg.max_coverage, derive_seed(sampler_seed, i));
  }

  auto params = optimizer.params();
  OuterResult<S> result;
  Tensor<S> last_logits;
  for (std::size_t j = 1; j <= cfg.inner_iters; ++j) {
    std::vector<PatchBatch<S>> batches(images.size());
    bool any = false;
    for (std::size_t i = 0; i < images.size(); ++i) {
      batches[i] = sample_patches(images[i], k, samplers[i]);
      any = any || !batches[i].empty();
    }
    if (!any) break;  // every sampler exhausted its coverage budget

    z.update(batches, embed);
    Tensor<S> logits = model.head.forward_grid(z.read());
    Tensor<S> loss = softmax_cross_entropy(logits, labels);
    const double loss_value = static_cast<double>(loss.scalar());
    if (!std::isfinite(loss_value)) {
      throw TrainError("patchgd: non-finite loss " + std::to_string(loss_value) +
                       " at inner iteration " + std::to_string(j));
    }
    loss.backward();
    accum.accumulate(params);
    for (auto& p : params) p.tensor.zero_grad();

    result.mean_loss += loss_value;
    ++result.inner_iterations_run;
    last_logits = logits;

    if (j % cfg.grad_accum == 0) {
      optimizer.step(lr, accum.mean(cfg.grad_accum));
      accum.reset();
      ++result.optimizer_steps;
    }
  }
  if (cfg.flush_remainder && accum.pending() > 0) {
    optimizer.step(lr, accum.mean(accum.pending()));
    accum.reset();
    ++result.optimizer_steps;
  }
  if (result.inner_iterations_run == 0) {
    throw ConfigError("patchgd: no inner iteration could run (empty sampler budget)");
  }
  result.mean_loss /= static_cast<double>(result.inner_iterations_run);
  result.predictions = argmax_rows(last_logits);
  return result;
}

template <typename S>
struct GdResult {
  double loss = 0.0;
  std::vector<int> predictions;
};

// One whole-image mini-batch update with mean-reduced loss.
template <typename S>
GdResult<S> gd_iteration(const Tensor<S>& images, const std::vector<int>& labels,
                         CompositeModel<S>& model, Adam<S>& optimizer, double lr) {
  Tensor<S> logits = model.forward(images);
  Tensor<S> loss = softmax_cross_entropy(logits, labels);
  const double loss_value = static_cast<double>(loss.scalar());
  if (!std::isfinite(loss_value)) {
    throw TrainError("gd: non-finite loss " + std::to_string(loss_value));
  }
  loss.backward();
  optimizer.step_from_grads(lr);
  for (auto p : optimizer.params()) p.tensor.zero_grad();
  return {loss_value, argmax_rows(logits)};
}

template <typename S>
Tensor<S> cast_image(const Tensor<float>& img) {
  if constexpr (std::is_same_v<S, float>) {
    return img;
  } else {
    std::vector<S> vals(img.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      vals[i] = static_cast<S>(img.value_at(i));
    }
    return Tensor<S>::from_values(img.shape(), std::move(vals));
  }
}

// Inference through the patch pipeline: pad (never resize), fill Z with the
// trained extractor, head probabilities. No sampling is involved.
template <typename S>
Tensor<S> patchgd_infer_batch(const std::vector<Tensor<S>>& images,
                              const PatchGDModel<S>& model) {
  NoGradGuard no_grad;
  std::vector<Tensor<S>> padded;
  padded.reserve(images.size());
  for (const auto& img : images) {
    padded.push_back(pad_to_grid(img, model.features.patch_size()));
  }
  GridSpec grid = GridSpec::for_image(padded[0].dim(1), padded[0].dim(2),
                                      model.features.patch_size());
  ZBlock<S> z(padded.size(), grid, model.features.embed_dim());
  z.fill(padded, [&model](const Tensor<S>& p) { return model.features.forward(p); });
  return softmax(model.head.forward_grid(z.read()));
}

template <typename S>
Tensor<S> patchgd_infer(const Tensor<S>& image, const PatchGDModel<S>& model) {
  Tensor<S> probs = patchgd_infer_batch<S>({image}, model);
  return reshape(probs, {probs.dim(1)});
}

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  double qwk = 0.0;
};

namespace detail {

template <typename S, typename LogitsFn>
EvalMetrics evaluate_with(const Dataset& data, std::size_t classes,
                          std::size_t eval_batch, LogitsFn&& logits_for) {
  if (data.size() == 0) throw ValueError("evaluate: empty dataset");
  NoGradGuard no_grad;
  std::vector<int> preds, labels;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += eval_batch) {
    const std::size_t end = std::min(data.size(), start + eval_batch);
    std::vector<Tensor<S>> images;
    std::vector<int> batch_labels;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(cast_image<S>(data.samples[i].image));
      batch_labels.push_back(data.samples[i].label);
    }
    Tensor<S> logits = logits_for(images);
    Tensor<S> loss = softmax_cross_entropy(logits, batch_labels);
    loss_sum += static_cast<double>(loss.scalar()) * static_cast<double>(end - start);
    auto batch_preds = argmax_rows(logits);
    preds.insert(preds.end(), batch_preds.begin(), batch_preds.end());
    labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
  }
  EvalMetrics m;
  m.loss = loss_sum / static_cast<double>(data.size());
  m.accuracy = accuracy(preds, labels);
  m.qwk = qwk(preds, labels, classes);
  return m;
}

}  // namespace detail

template <typename S>
EvalMetrics evaluate_patchgd(const Dataset& data, const PatchGDModel<S>& model,
                             std::size_t eval_batch = 32) {
  return detail::evaluate_with<S>(
      data, model.head.classes(), eval_batch, [&model](const std::vector<Tensor<S>>& images) {
        NoGradGuard no_grad;
        std::vector<Tensor<S>> padded;
        for (const auto& img : images) {
          padded.push_back(pad_to_grid(img, model.features.patch_size()));
        }
        GridSpec grid = GridSpec::for_image(padded[0].dim(1), padded[0].dim(2),
                                            model.features.patch_size());
        ZBlock<S> z(padded.size(), grid, model.features.embed_dim());
        z.fill(padded,
               [&model](const Tensor<S>& p) { return model.features.forward(p); });
        return model.head.forward_grid(z.read());
      });
}

template <typename S>
EvalMetrics evaluate_composite(const Dataset& data, const CompositeModel<S>& model,
                               std::size_t eval_batch = 32) {
  return detail::evaluate_with<S>(data, model.classes(), eval_batch,
                                  [&model](const std::vector<Tensor<S>>& images) {
                                    return model.forward(stack(images));
                                  });
}

// --- Run log ---------------------------------------------------------------

inline constexpr const char* kRunLogHeader =
    "epoch,split,loss,accuracy,qwk,lr,peak_mem_bytes,seconds";

struct RunLogRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double qwk = 0.0;
  double lr = 0.0;
  std::size_t peak_mem_bytes = 0;
  double seconds = 0.0;
};

inline std::string format_runlog_row(const RunLogRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%s,%.6f,%.6f,%.6f,%.8f,%zu,%.3f",
                row.epoch, row.split.c_str(), row.loss, row.accuracy, row.qwk,
                row.lr, row.peak_mem_bytes, row.seconds);
  return buf;
}

// --- Full training loop ----------------------------------------------------

struct FitOptions {
  std::string out_dir;              // empty: no files written
  bool wall_time = false;           // real seconds in rows break replayability
  std::string resume_from;          // checkpoint path; continues the epoch count
  std::string init_backbone_from;   // warm-start the feature extractor
  std::function<void(const RunLogRow&)> on_row;
};

struct FitResult {
  std::vector<RunLogRow> rows;
  double best_val_accuracy = -1.0;
  std::size_t best_epoch = 0;
  std::size_t peak_mem_bytes = 0;
  std::string best_checkpoint, last_checkpoint;
};

namespace detail {

inline void append_runlog(const std::string& out_dir, const RunLogRow& row,
                          bool truncate) {
  if (out_dir.empty()) return;
  const auto path = std::filesystem::path(out_dir) / "runlog.csv";
  const bool write_header = truncate || !std::filesystem::exists(path);
  std::ofstream out(path, truncate ? std::ios::trunc : std::ios::app);
  if (!out) throw IoError("runlog: cannot write '" + path.string() + "'");
  if (write_header) out << kRunLogHeader << "\n";
  out << format_runlog_row(row) << "\n";
}

}  // namespace detail

template <typename S>
FitResult fit(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
              const FitOptions& opts = {}) {
  if (train.size() == 0) throw ValueError("fit: empty training set");
  if (val.size() == 0) throw ValueError("fit: empty validation set");
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);

  const std::size_t in_channels = train.samples[0].image.dim(0);
  const std::size_t image_size = train.image_size;

  FitResult result;
  const bool patch_mode = cfg.mode == TrainMode::kPatchGD;

  // Padded grid geometry (patch mode) drives config validation.
  const std::size_t padded =
      patch_mode ? (image_size + cfg.patch_size - 1) / cfg.patch_size * cfg.patch_size
                 : image_size;
  GridSpec grid{padded, padded, patch_mode ? cfg.patch_size : padded};
  cfg.validate(grid.cell_count());

  std::unique_ptr<PatchGDModel<S>> patch_model;
  std::unique_ptr<CompositeModel<S>> composite;
  std::vector<NamedParam<S>> params;
  if (patch_mode) {
    patch_model =
        std::make_unique<PatchGDModel<S>>(PatchGDModel<S>::build(cfg, in_channels));
    params = patch_model->parameters();
  } else {
    composite = std::make_unique<CompositeModel<S>>(
        build_composite<S>(cfg, in_channels, image_size));
    params = composite->parameters();
  }

  Adam<S> optimizer(params, cfg.adam);
  std::size_t start_epoch = 0;

  if (!opts.resume_from.empty()) {
    auto ckpt = load_checkpoint<S>(opts.resume_from);
    if (ckpt.mode != to_string(cfg.mode)) {
      throw ConfigError("resume: checkpoint mode '" + ckpt.mode +
                        "' does not match configured mode '" + to_string(cfg.mode) + "'");
    }
    load_params_into(ckpt, params, /*allow_partial=*/false);
    if (ckpt.has_optimizer) {
      optimizer.restore(ckpt.adam_t, ckpt.adam_m, ckpt.adam_v);
    }
    start_epoch = ckpt.epoch;
  } else if (!opts.init_backbone_from.empty()) {
    if (!patch_mode) {
      throw ConfigError("init_backbone_from applies to patchgd mode only");
    }
    auto ckpt = load_checkpoint<S>(opts.init_backbone_from);
    auto f_params = patch_model->features.parameters("f");
    const std::size_t loaded =
        load_params_into(ckpt, f_params, /*allow_partial=*/true, {"model.", "f."},
                         /*skip_shape_mismatch=*/true);
    if (loaded == 0) {
      throw ConfigError("init_backbone_from: no matching backbone parameters in '" +
                        opts.init_backbone_from + "'");
    }
  }

  // Modeled footprint for the run log.
  {
    const std::size_t dtype_bytes = sizeof(S);
    if (patch_mode) {
      const std::size_t k = cfg.effective_patches_per_iter(grid.cell_count());
      const std::size_t fill_batch =
          std::min(ZBlock<S>::kDefaultFillChunk, grid.cell_count());
      MemoryReport rep = estimate_patchgd(
          patch_model->features.plan(k * cfg.batch_size),
          patch_model->features.plan(fill_batch),
          patch_model->head.plan(cfg.batch_size, grid.rows(), grid.cols()),
          cfg.batch_size * grid.cell_count() * cfg.embed_dim, dtype_bytes);
      result.peak_mem_bytes = rep.peak_bytes;
    } else {
      MemoryReport rep = estimate_gd(
          composite->plan(cfg.batch_size, image_size, image_size), dtype_bytes);
      result.peak_mem_bytes = rep.peak_bytes;
    }
  }

  // Images are cast and padded once.
  std::vector<Tensor<S>> train_images;
  train_images.reserve(train.size());
  for (const auto& s : train.samples) {
    Tensor<S> img = cast_image<S>(s.image);
    train_images.push_back(patch_mode ? pad_to_grid(img, cfg.patch_size) : img);
  }
  const std::vector<int> train_labels = train.labels();

  GradAccumulator<S> accum(params);
  bool first_row = start_epoch == 0;

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.lr_peak, cfg.lr_warmup_epochs,
                                  cfg.schedule_total());
    const auto epoch_start = std::chrono::steady_clock::now();

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, 0x657061ull, epoch));
    shuffle_rng.shuffle(order);

    double train_loss = 0.0;
    std::vector<int> train_preds, seen_labels;
    std::size_t outer_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size, ++outer_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) labels.push_back(train_labels[order[i]]);

      std::vector<Tensor<S>> images;
      for (std::size_t i = start; i < end; ++i) images.push_back(train_images[order[i]]);
      if (patch_mode) {
        auto outer = patchgd_outer_iteration(images, labels, *patch_model, optimizer,
                                             accum, cfg, lr,
                                             derive_seed(cfg.seed, 0x5a5aull, epoch,
                                                         outer_index));
        train_loss += outer.mean_loss * static_cast<double>(end - start);
        train_preds.insert(train_preds.end(), outer.predictions.begin(),
                           outer.predictions.end());
      } else {
        auto step = gd_iteration(stack(images), labels, *composite, optimizer, lr);
        train_loss += step.loss * static_cast<double>(end - start);
        train_preds.insert(train_preds.end(), step.predictions.begin(),
                           step.predictions.end());
      }
      seen_labels.insert(seen_labels.end(), labels.begin(), labels.end());
    }
    train_loss /= static_cast<double>(train.size());

    EvalMetrics val_metrics =
        patch_mode ? evaluate_patchgd(val, *patch_model, cfg.batch_size)
                   : evaluate_composite(val, *composite, cfg.batch_size);

    const double elapsed =
        opts.wall_time
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                            epoch_start)
                  .count()
            : 0.0;

    RunLogRow train_row{epoch,
                        "train",
                        train_loss,
                        accuracy(train_preds, seen_labels),
                        qwk(train_preds, seen_labels, cfg.classes),
                        lr,
                        result.peak_mem_bytes,
                        elapsed};
    RunLogRow val_row{epoch,   "val", val_metrics.loss, val_metrics.accuracy,
                      val_metrics.qwk, lr,   result.peak_mem_bytes, elapsed};

    detail::append_runlog(opts.out_dir, train_row, first_row);
    first_row = false;
    detail::append_runlog(opts.out_dir, val_row, false);
    result.rows.push_back(train_row);
    result.rows.push_back(val_row);
    if (opts.on_row) {
      opts.on_row(train_row);
      opts.on_row(val_row);
    }

    const bool improved = val_metrics.accuracy > result.best_val_accuracy;
    if (improved) {
      result.best_val_accuracy = val_metrics.accuracy;
      result.best_epoch = epoch;
    }
    if (!opts.out_dir.empty()) {
      const std::string mode_name = to_string(cfg.mode);
      const auto last_path = std::filesystem::path(opts.out_dir) / "ckpt_last.bin";
      save_checkpoint(last_path.string(), mode_name, epoch + 1, params, &optimizer);
      result.last_checkpoint = last_path.string();
      if (improved) {
        const auto best_path = std::filesystem::path(opts.out_dir) / "ckpt_best.bin";
        save_checkpoint(best_path.string(), mode_name, epoch + 1, params, &optimizer);
        result.best_checkpoint = best_path.string();
      }
    }
  }
  return result;
}

}  // namespace patchgd

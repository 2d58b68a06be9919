#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace patchgd {

// One layer's footprint contribution for a fixed batch and input size.
// input_numel is what the backward pass retains; output_numel only matters
// for transient (no-grad) passes.
struct LayerShape {
  std::string name;
  std::size_t input_numel = 0;
  std::size_t output_numel = 0;
  std::size_t param_count = 0;
};

std::size_t plan_param_count(const std::vector<LayerShape>& plan);
std::size_t plan_retained_numel(const std::vector<LayerShape>& plan);
std::size_t plan_max_transient_numel(const std::vector<LayerShape>& plan);

// Analytic activation/parameter byte counts for one training configuration.
// Everything is derived from shapes and the dtype width; nothing is measured.
struct MemoryReport {
  std::size_t dtype_bytes = 4;

  std::vector<std::pair<std::string, std::size_t>> layer_bytes;
  std::size_t activation_bytes = 0;   // retained-for-backward inputs
  std::size_t parameter_bytes = 0;
  std::size_t gradient_bytes = 0;     // one buffer per parameter
  std::size_t optimizer_bytes = 0;    // two moment buffers per parameter
  std::size_t accumulator_bytes = 0;  // inner-iteration gradient accumulators

  // Patch-pipeline split; zero for whole-image training.
  std::size_t zblock_bytes = 0;
  std::size_t patch_activation_bytes = 0;
  std::size_t head_activation_bytes = 0;
  std::size_t fill_transient_bytes = 0;

  std::size_t peak_bytes = 0;
};

// Whole-image training: every layer input is retained for backward.
MemoryReport estimate_gd(const std::vector<LayerShape>& plan,
                         std::size_t dtype_bytes);

// Patch-based training. `patch_plan` covers the feature extractor over one
// inner iteration's k*B patches, `fill_plan` the same extractor over one fill
// chunk (forward only, nothing retained), `head_plan` the head over the full
// grid. Peak is the larger of the fill phase and the inner-iteration phase.
MemoryReport estimate_patchgd(const std::vector<LayerShape>& patch_plan,
                              const std::vector<LayerShape>& fill_plan,
                              const std::vector<LayerShape>& head_plan,
                              std::size_t zblock_numel, std::size_t dtype_bytes);

// Largest batch whose modeled peak fits the budget; 0 if batch 1 does not.
std::size_t max_feasible_batch(
    const std::function<MemoryReport(std::size_t)>& report_for_batch,
    std::size_t budget_bytes);

std::string format_report_table(const MemoryReport& gd, const MemoryReport& patchgd);
std::string format_report_csv(const MemoryReport& gd, const MemoryReport& patchgd);

}  // namespace patchgd

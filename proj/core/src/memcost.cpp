#include "patchgd/memcost.hpp"

#include <algorithm>
#include <sstream>

namespace patchgd {

std::size_t plan_param_count(const std::vector<LayerShape>& plan) {
  std::size_t n = 0;
  for (const auto& l : plan) n += l.param_count;
  return n;
}

std::size_t plan_retained_numel(const std::vector<LayerShape>& plan) {
  std::size_t n = 0;
  for (const auto& l : plan) n += l.input_numel;
  return n;
}

std::size_t plan_max_transient_numel(const std::vector<LayerShape>& plan) {
  std::size_t n = 0;
  for (const auto& l : plan) n = std::max(n, l.input_numel + l.output_numel);
  return n;
}

MemoryReport estimate_gd(const std::vector<LayerShape>& plan,
                         std::size_t dtype_bytes) {
  MemoryReport r;
  r.dtype_bytes = dtype_bytes;
  for (const auto& l : plan) {
    r.layer_bytes.emplace_back(l.name, l.input_numel * dtype_bytes);
  }
  r.activation_bytes = plan_retained_numel(plan) * dtype_bytes;
  r.parameter_bytes = plan_param_count(plan) * dtype_bytes;
  r.gradient_bytes = r.parameter_bytes;
  r.optimizer_bytes = 2 * r.parameter_bytes;
  r.peak_bytes = r.activation_bytes + r.parameter_bytes + r.gradient_bytes +
                 r.optimizer_bytes;
  return r;
}

MemoryReport estimate_patchgd(const std::vector<LayerShape>& patch_plan,
                              const std::vector<LayerShape>& fill_plan,
                              const std::vector<LayerShape>& head_plan,
                              std::size_t zblock_numel, std::size_t dtype_bytes) {
  MemoryReport r;
  r.dtype_bytes = dtype_bytes;
  for (const auto& l : patch_plan) {
    r.layer_bytes.emplace_back("patch." + l.name, l.input_numel * dtype_bytes);
  }
  for (const auto& l : head_plan) {
    r.layer_bytes.emplace_back(l.name, l.input_numel * dtype_bytes);
  }
  r.patch_activation_bytes = plan_retained_numel(patch_plan) * dtype_bytes;
  r.head_activation_bytes = plan_retained_numel(head_plan) * dtype_bytes;
  r.activation_bytes = r.patch_activation_bytes + r.head_activation_bytes;
  r.zblock_bytes = zblock_numel * dtype_bytes;
  const std::size_t params =
      plan_param_count(patch_plan) + plan_param_count(head_plan);
  r.parameter_bytes = params * dtype_bytes;
  r.gradient_bytes = r.parameter_bytes;
  r.optimizer_bytes = 2 * r.parameter_bytes;
  r.accumulator_bytes = r.parameter_bytes;
  r.fill_transient_bytes = plan_max_transient_numel(fill_plan) * dtype_bytes;

  const std::size_t fixed = r.parameter_bytes + r.gradient_bytes +
                            r.optimizer_bytes + r.accumulator_bytes + r.zblock_bytes;
  const std::size_t fill_phase = fixed + r.fill_transient_bytes;
  const std::size_t inner_phase = fixed + r.activation_bytes;
  r.peak_bytes = std::max(fill_phase, inner_phase);
  return r;
}

std::size_t max_feasible_batch(
    const std::function<MemoryReport(std::size_t)>& report_for_batch,
    std::size_t budget_bytes) {
  if (report_for_batch(1).peak_bytes > budget_bytes) return 0;
  // Doubling probe, then bisection on the feasibility boundary.
  std::size_t lo = 1, hi = 2;
  constexpr std::size_t kCap = std::size_t{1} << 20;
  while (hi <= kCap && report_for_batch(hi).peak_bytes <= budget_bytes) {
    lo = hi;
    hi *= 2;
  }
  if (hi > kCap) return lo;
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (report_for_batch(mid).peak_bytes <= budget_bytes) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

namespace {

std::string human_bytes(std::size_t bytes) {
  std::ostringstream os;
  const char* units[] = {"B", "KiB", "MiB", "GiB"};
  double v = static_cast<double>(bytes);
  int u = 0;
  while (v >= 1024.0 && u < 3) {
    v /= 1024.0;
    ++u;
  }
  os.precision(u == 0 ? 0 : 2);
  os << std::fixed << v << " " << units[u];
  return os.str();
}

}  // namespace

std::string format_report_table(const MemoryReport& gd, const MemoryReport& patchgd) {
  std::ostringstream os;
  auto row = [&os](const std::string& name, std::size_t a, std::size_t b) {
    os << "  " << name;
    for (std::size_t i = name.size(); i < 28; ++i) os << ' ';
    std::string sa = human_bytes(a), sb = human_bytes(b);
    os << sa;
    for (std::size_t i = sa.size(); i < 14; ++i) os << ' ';
    os << sb << "\n";
  };
  os << "  component                   gd            patchgd\n";
  row("activations (retained)", gd.activation_bytes, patchgd.activation_bytes);
  row("  patch pipeline", 0, patchgd.patch_activation_bytes);
  row("  head", 0, patchgd.head_activation_bytes);
  row("z block", 0, patchgd.zblock_bytes);
  row("fill transient", 0, patchgd.fill_transient_bytes);
  row("parameters", gd.parameter_bytes, patchgd.parameter_bytes);
  row("gradients", gd.gradient_bytes, patchgd.gradient_bytes);
  row("optimizer state", gd.optimizer_bytes, patchgd.optimizer_bytes);
  row("accumulators", gd.accumulator_bytes, patchgd.accumulator_bytes);
  row("peak", gd.peak_bytes, patchgd.peak_bytes);
  return os.str();
}

std::string format_report_csv(const MemoryReport& gd, const MemoryReport& patchgd) {
  std::ostringstream os;
  os << "component,gd_bytes,patchgd_bytes\n";
  os << "activations," << gd.activation_bytes << "," << patchgd.activation_bytes << "\n";
  os << "patch_activations,0," << patchgd.patch_activation_bytes << "\n";
  os << "head_activations,0," << patchgd.head_activation_bytes << "\n";
  os << "zblock,0," << patchgd.zblock_bytes << "\n";
  os << "fill_transient,0," << patchgd.fill_transient_bytes << "\n";
  os << "parameters," << gd.parameter_bytes << "," << patchgd.parameter_bytes << "\n";
  os << "gradients," << gd.gradient_bytes << "," << patchgd.gradient_bytes << "\n";
  os << "optimizer," << gd.optimizer_bytes << "," << patchgd.optimizer_bytes << "\n";
  os << "accumulators," << gd.accumulator_bytes << "," << patchgd.accumulator_bytes << "\n";
  os << "peak," << gd.peak_bytes << "," << patchgd.peak_bytes << "\n";
  return os.str();
}

}  // namespace patchgd

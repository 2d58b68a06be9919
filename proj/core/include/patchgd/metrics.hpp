#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace patchgd {

// c x c contingency counts, O[true][pred].
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::int64_t> counts;

  static ConfusionMatrix from(const std::vector<int>& preds,
                              const std::vector<int>& labels, std::size_t classes);

  std::int64_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * classes + pred];
  }
  std::int64_t total() const;
};

// Fraction of exact matches.
double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// Quadratic weighted kappa with weights w_ij = (i-j)^2/(c-1)^2 against the
// chance agreement of the marginals. Returns 0 when the weighted chance
// agreement is zero (degenerate marginals).
double qwk(const std::vector<int>& preds, const std::vector<int>& labels,
           std::size_t classes);

}  // namespace patchgd

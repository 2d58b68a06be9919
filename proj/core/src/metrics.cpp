#include "patchgd/metrics.hpp"

#include <numeric>
#include <string>

#include "patchgd/errors.hpp"

namespace patchgd {

ConfusionMatrix ConfusionMatrix::from(const std::vector<int>& preds,
                                      const std::vector<int>& labels,
                                      std::size_t classes) {
  if (preds.size() != labels.size()) {
    throw ValueError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw ValueError("confusion: empty input");
  ConfusionMatrix cm;
  cm.classes = classes;
  cm.counts.assign(classes * classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int t = labels[i], p = preds[i];
    if (t < 0 || static_cast<std::size_t>(t) >= classes || p < 0 ||
        static_cast<std::size_t>(p) >= classes) {
      throw ValueError("confusion: class out of range at sample " + std::to_string(i));
    }
    ++cm.counts[static_cast<std::size_t>(t) * classes + static_cast<std::size_t>(p)];
  }
  return cm;
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) {
    throw ValueError("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw ValueError("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double qwk(const std::vector<int>& preds, const std::vector<int>& labels,
           std::size_t classes) {
  if (classes == 0) throw ValueError("qwk: classes must be >= 1");
  const ConfusionMatrix cm = ConfusionMatrix::from(preds, labels, classes);
  if (classes == 1) return 0.0;

  const double n = static_cast<double>(cm.total());
  std::vector<double> row_marginal(classes, 0.0), col_marginal(classes, 0.0);
  for (std::size_t i = 0; i < classes; ++i) {
    for (std::size_t j = 0; j < classes; ++j) {
      row_marginal[i] += static_cast<double>(cm.at(i, j));
      col_marginal[j] += static_cast<double>(cm.at(i, j));
    }
  }

  const double denom_scale = static_cast<double>((classes - 1) * (classes - 1));
  double weighted_observed = 0.0, weighted_expected = 0.0;
  for (std::size_t i = 0; i < classes; ++i) {
    for (std::size_t j = 0; j < classes; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      const double w = d * d / denom_scale;
      weighted_observed += w * static_cast<double>(cm.at(i, j));
      weighted_expected += w * row_marginal[i] * col_marginal[j] / n;
    }
  }
  if (weighted_expected == 0.0) return 0.0;
  return 1.0 - weighted_observed / weighted_expected;
}

}  // namespace patchgd

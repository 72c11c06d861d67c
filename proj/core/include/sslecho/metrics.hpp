#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace sslecho {

// Mean per-class recall over the classes present in `truth`.
double balanced_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred);
// Mean per-class recall over classes 0..classes-1; every class must occur in
// `truth` (ContractError otherwise).
double balanced_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                         std::size_t classes);

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::vector<long>> counts;  // rows = true class, cols = predicted

  long total() const;
};

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                                 std::size_t classes);

// P(score of a random positive > score of a random negative), ties count 1/2.
// Throws ContractError unless both classes are present.
double binary_auc(std::span<const double> scores, std::span<const int> labels);

struct RocPoint {
  double fpr;
  double tpr;
  double threshold;  // predict positive when score >= threshold
};

// One point per distinct score (descending), bracketed by (0,0) at +inf and
// (1,1) at the minimum score.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

}  // namespace sslecho

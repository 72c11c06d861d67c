#include "sslecho/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "sslecho/error.hpp"

namespace sslecho {
namespace {

void check_lengths(std::size_t a, std::size_t b, const char* who) {
  if (a != b) throw DimensionError(std::string(who) + ": length mismatch");
  if (a == 0) throw ContractError(std::string(who) + ": empty input");
}

double recall_mean(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                   const std::vector<std::size_t>& classes) {
  double total = 0.0;
  for (std::size_t c : classes) {
    long n = 0, tp = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] != c) continue;
      ++n;
      if (pred[i] == c) ++tp;
    }
    total += static_cast<double>(tp) / static_cast<double>(n);
  }
  return total / static_cast<double>(classes.size());
}

}  // namespace

double balanced_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred) {
  check_lengths(truth.size(), pred.size(), "balanced_accuracy");
  std::vector<std::size_t> classes(truth.begin(), truth.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  return recall_mean(truth, pred, classes);
}

double balanced_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                         std::size_t classes) {
  check_lengths(truth.size(), pred.size(), "balanced_accuracy");
  std::vector<std::size_t> all(classes);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t c : all) {
    if (std::find(truth.begin(), truth.end(), c) == truth.end()) {
      throw ContractError("balanced_accuracy: class " + std::to_string(c) + " has no true examples");
    }
  }
  return recall_mean(truth, pred, all);
}

long ConfusionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                                 std::size_t classes) {
  if (truth.size() != pred.size()) throw DimensionError("confusion_matrix: length mismatch");
  ConfusionMatrix cm{classes, std::vector<std::vector<long>>(classes, std::vector<long>(classes, 0))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || pred[i] >= classes) {
      throw ContractError("confusion_matrix: label out of range [0, " + std::to_string(classes) + ")");
    }
    ++cm.counts[truth[i]][pred[i]];
  }
  return cm;
}

double binary_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size(), "binary_auc");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("binary_auc: labels must be 0 or 1");
    (labels[i] == 1 ? pos : neg).push_back(scores[i]);
  }
  if (pos.empty() || neg.empty()) throw ContractError("binary_auc: undefined with a single class");
  std::sort(neg.begin(), neg.end());
  double wins = 0.0;
  for (double s : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), s);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), s);
    wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size(), "roc_curve");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double n_pos = 0, n_neg = 0;
  for (int l : labels) (l == 1 ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) throw ContractError("roc_curve: undefined with a single class");
  std::vector<RocPoint> points{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  double tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (labels[order[k]] == 1 ? tp : fp) += 1;
    if (k + 1 == order.size() || scores[order[k + 1]] != scores[order[k]]) {
      points.push_back({fp / n_neg, tp / n_pos, scores[order[k]]});
    }
  }
  return points;
}

}  // namespace sslecho

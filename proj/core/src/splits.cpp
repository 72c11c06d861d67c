#include <algorithm>
#include <numeric>
#include <sstream>

#include "sslecho/data.hpp"
#include "sslecho/error.hpp"

namespace sslecho {

SplitRatio SplitRatio::parse(const std::string& text) {
  std::vector<std::size_t> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ':')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      parts.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("split ratio '" + text + "' must be three positive integers like 3:1:1");
    }
  }
  if (parts.size() != 3) throw ConfigError("split ratio '" + text + "' must be three positive integers like 3:1:1");
  return {parts[0], parts[1], parts[2]};
}

std::string SplitRatio::str() const {
  return std::to_string(train) + ":" + std::to_string(valid) + ":" + std::to_string(test);
}

namespace {

// Largest-remainder apportionment of `total` by `weights`; ties go to the
// lower index.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<std::size_t>& weights) {
  const std::size_t w_sum = std::accumulate(weights.begin(), weights.end(), std::size_t{0});
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder numerator, index)
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out[i] = total * weights[i] / w_sum;
    rem.emplace_back(total * weights[i] % w_sum, i);
    assigned += out[i];
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[rem[k].second];
  return out;
}

// Integer class x partition table with row sums = class counts and column
// sums = partition sizes, each cell the floor or ceiling of its quota
// whenever possible.
std::vector<std::vector<std::size_t>> stratify(const std::vector<std::size_t>& class_counts,
                                               const std::vector<std::size_t>& sizes,
                                               const std::vector<std::size_t>& weights) {
  const std::size_t w_sum = std::accumulate(weights.begin(), weights.end(), std::size_t{0});
  const std::size_t nc = class_counts.size();
  const std::size_t np = sizes.size();
  std::vector<std::vector<std::size_t>> table(nc, std::vector<std::size_t>(np));
  std::vector<std::size_t> row_def(nc), col_def(sizes);
  struct Cell {
    std::size_t rem, c, p;
  };
  std::vector<Cell> cells;
  for (std::size_t c = 0; c < nc; ++c) {
    std::size_t row = 0;
    for (std::size_t p = 0; p < np; ++p) {
      table[c][p] = class_counts[c] * weights[p] / w_sum;
      cells.push_back({class_counts[c] * weights[p] % w_sum, c, p});
      row += table[c][p];
      col_def[p] -= table[c][p];
    }
    row_def[c] = class_counts[c] - row;
  }
  std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.rem > b.rem; });
  for (const Cell& cell : cells) {
    if (cell.rem == 0) break;
    if (row_def[cell.c] > 0 && col_def[cell.p] > 0) {
      ++table[cell.c][cell.p];
      --row_def[cell.c];
      --col_def[cell.p];
    }
  }
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t p = 0; p < np && row_def[c] > 0; ++p)
      while (row_def[c] > 0 && col_def[p] > 0) {
        ++table[c][p];
        --row_def[c];
        --col_def[p];
      }
  return table;
}

}  // namespace

std::vector<SplitSpec> make_splits(const std::vector<StudyLabel>& studies, const SplitRatio& ratio,
                                   std::size_t n_folds, std::uint64_t seed) {
  if (n_folds == 0) throw ContractError("make_splits: n_folds must be positive");
  if (ratio.train == 0 || ratio.valid == 0 || ratio.test == 0) {
    throw ContractError("make_splits: ratio parts must be positive");
  }
  std::vector<std::vector<std::string>> by_class(kNumDiagnoses);
  std::set<std::string> unlabeled;
  std::set<std::string> seen;
  for (const StudyLabel& s : studies) {
    if (!seen.insert(s.study_id).second) throw SplitError("duplicate study id '" + s.study_id + "'");
    if (s.diagnosis) {
      by_class[static_cast<std::size_t>(*s.diagnosis)].push_back(s.study_id);
    } else {
      unlabeled.insert(s.study_id);
    }
  }
  std::vector<std::size_t> class_counts;
  std::size_t n = 0;
  for (auto& ids : by_class) {
    std::sort(ids.begin(), ids.end());
    class_counts.push_back(ids.size());
    n += ids.size();
  }
  if (n < kNumDiagnoses * 3) {
    throw SplitError("need at least " + std::to_string(kNumDiagnoses * 3) + " labeled studies to split, got " +
                     std::to_string(n));
  }
  const std::vector<std::size_t> weights{ratio.train, ratio.valid, ratio.test};
  const std::vector<std::size_t> sizes = apportion(n, weights);
  for (std::size_t p = 0; p < 3; ++p)
    if (sizes[p] == 0) throw SplitError("ratio " + ratio.str() + " leaves a partition empty");
  const auto table = stratify(class_counts, sizes, weights);

  std::vector<SplitSpec> folds;
  for (std::size_t fold = 0; fold < n_folds; ++fold) {
    SplitSpec spec;
    spec.seed = mix_seed(seed, fold);
    Rng rng(spec.seed);
    for (std::size_t c = 0; c < kNumDiagnoses; ++c) {
      std::vector<std::string> ids = by_class[c];
      rng.shuffle(ids);
      std::size_t k = 0;
      for (std::size_t i = 0; i < table[c][0]; ++i) spec.labeled_train.insert(ids[k++]);
      for (std::size_t i = 0; i < table[c][1]; ++i) spec.validation.insert(ids[k++]);
      for (std::size_t i = 0; i < table[c][2]; ++i) spec.test.insert(ids[k++]);
    }
    spec.unlabeled_pool = unlabeled;
    spec.validate();
    folds.push_back(std::move(spec));
  }
  return folds;
}

}  // namespace sslecho

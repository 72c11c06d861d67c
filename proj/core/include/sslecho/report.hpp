#pragma once

#include <optional>
#include <string>
#include <vector>

namespace sslecho {

// Evaluated units (images or patients) of one fold.
struct FoldEvaluation {
  std::size_t fold = 0;
  std::vector<std::string> unit_ids;
  std::vector<std::size_t> truth;
  std::vector<std::size_t> pred;
  // Binary "some AS" score per unit (P(mild/moderate) + P(severe)); empty
  // for view evaluations.
  std::vector<double> binary_scores;
};

struct ReportInput {
  std::string task;   // "view" or "diagnosis"
  std::string level;  // "image" or "patient"
  std::size_t classes = 3;
  std::vector<std::string> class_names;
  std::vector<FoldEvaluation> folds;
};

// Writes <dir>/metrics.json (per fold + mean), confusion_fold<k>.csv and,
// when binary scores are present, roc_fold<k>.csv (fpr,tpr,threshold).
void emit_report(const ReportInput& input, const std::string& out_dir);

// CSV of one fold's units: unit_id,true,predicted,score
void write_units_csv(const FoldEvaluation& eval, const std::string& path);
FoldEvaluation read_units_csv(const std::string& path, std::size_t fold);

}  // namespace sslecho

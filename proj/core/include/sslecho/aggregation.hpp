#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sslecho/model.hpp"

namespace sslecho {

using Probs3 = std::array<double, 3>;
using ImageKey = std::pair<std::string, std::string>;  // (study_id, image_id)

struct PredictionSet {
  Task task = Task::kDiagnosis;
  std::map<ImageKey, Probs3> entries;

  // Throws ContractError when a vector is off the simplex by more than 1e-6.
  void add(const std::string& study_id, const std::string& image_id, const Probs3& probs);
  std::vector<std::string> study_ids() const;
  // Entries of one study in image-id order; empty when unknown.
  std::vector<std::pair<std::string, Probs3>> study_entries(const std::string& study_id) const;
};

struct PatientPrediction {
  std::string study_id;
  Probs3 probs{};
  std::size_t predicted_class = 0;  // argmax, ties to the lowest index
  bool tie = false;                 // argmax was not unique
};

std::size_t argmax3(const Probs3& p, bool* tie = nullptr);

// Throws IntegrityError for a study with no predictions.
PatientPrediction simple_average(const PredictionSet& diag, const std::string& study_id);

// Weights w_i = P(PLAX) + P(PSAX); falls back to simple_average with a warning
// when the weights sum below 1e-9.
PatientPrediction view_prioritized_average(const PredictionSet& diag, const PredictionSet& view,
                                           const std::string& study_id);

// Averages images with w_i > cutoff; falls back to simple_average with a
// warning when none pass.
PatientPrediction threshold_then_average(const PredictionSet& diag, const PredictionSet& view,
                                         const std::string& study_id, double cutoff);

enum class AggregationStrategy { kSimpleAverage, kViewPrioritized, kThresholdThenAverage };
std::string to_string(AggregationStrategy strategy);
AggregationStrategy strategy_from_string(const std::string& text);

// One prediction per study of `diag`, in study-id order.
std::vector<PatientPrediction> aggregate(const PredictionSet& diag, const PredictionSet* view,
                                         AggregationStrategy strategy, double cutoff = 0.5);

// CSV: study_id,image_id,p0,p1,p2
void write_prediction_csv(const PredictionSet& set, const std::string& path);
PredictionSet read_prediction_csv(const std::string& path, Task task);
// CSV: study_id,p_no,p_mildmod,p_severe,predicted
void write_patient_csv(const std::vector<PatientPrediction>& preds, const std::string& path);

}  // namespace sslecho

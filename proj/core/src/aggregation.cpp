#include "sslecho/aggregation.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sslecho/error.hpp"
#include "sslecho/log.hpp"

namespace fs = std::filesystem;

namespace sslecho {

void PredictionSet::add(const std::string& study_id, const std::string& image_id, const Probs3& probs) {
  double s = 0.0;
  for (double p : probs) {
    if (!(p >= -1e-12)) throw ContractError("prediction for " + study_id + "/" + image_id + " has a negative entry");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-6) {
    throw ContractError("prediction for " + study_id + "/" + image_id + " sums to " + std::to_string(s));
  }
  entries[{study_id, image_id}] = probs;
}

std::vector<std::string> PredictionSet::study_ids() const {
  std::vector<std::string> ids;
  for (const auto& [key, p] : entries)
    if (ids.empty() || ids.back() != key.first) ids.push_back(key.first);
  return ids;
}

std::vector<std::pair<std::string, Probs3>> PredictionSet::study_entries(const std::string& study_id) const {
  std::vector<std::pair<std::string, Probs3>> out;
  for (auto it = entries.lower_bound({study_id, ""}); it != entries.end() && it->first.first == study_id; ++it)
    out.emplace_back(it->first.second, it->second);
  return out;
}

std::size_t argmax3(const Probs3& p, bool* tie) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < 3; ++c)
    if (p[c] > p[best]) best = c;
  if (tie != nullptr) {
    *tie = false;
    for (std::size_t c = 0; c < 3; ++c)
      if (c != best && p[c] == p[best]) *tie = true;
  }
  return best;
}

namespace {

PatientPrediction finish(const std::string& study_id, const Probs3& sum, double total) {
  PatientPrediction out;
  out.study_id = study_id;
  for (std::size_t c = 0; c < 3; ++c) out.probs[c] = sum[c] / total;
  out.predicted_class = argmax3(out.probs, &out.tie);
  return out;
}

std::vector<std::pair<std::string, Probs3>> require_entries(const PredictionSet& set, const std::string& study_id) {
  auto entries = set.study_entries(study_id);
  if (entries.empty()) throw IntegrityError("no predictions for study '" + study_id + "'");
  return entries;
}

// Relevant-view weights aligned with the diagnosis entries of a study.
std::vector<double> relevance(const std::vector<std::pair<std::string, Probs3>>& diag, const PredictionSet& view,
                              const std::string& study_id) {
  const auto v = view.study_entries(study_id);
  if (v.size() != diag.size()) {
    throw IntegrityError("study '" + study_id + "' has " + std::to_string(diag.size()) +
                         " diagnosis predictions but " + std::to_string(v.size()) + " view predictions");
  }
  std::vector<double> w;
  for (std::size_t i = 0; i < diag.size(); ++i) {
    if (v[i].first != diag[i].first) {
      throw IntegrityError("image '" + diag[i].first + "' of study '" + study_id + "' lacks a view prediction");
    }
    w.push_back(v[i].second[0] + v[i].second[1]);
  }
  return w;
}

}  // namespace

PatientPrediction simple_average(const PredictionSet& diag, const std::string& study_id) {
  const auto entries = require_entries(diag, study_id);
  Probs3 sum{};
  for (const auto& [id, p] : entries)
    for (std::size_t c = 0; c < 3; ++c) sum[c] += p[c];
  return finish(study_id, sum, static_cast<double>(entries.size()));
}

PatientPrediction view_prioritized_average(const PredictionSet& diag, const PredictionSet& view,
                                           const std::string& study_id) {
  const auto entries = require_entries(diag, study_id);
  const auto w = relevance(entries, view, study_id);
  Probs3 sum{};
  double total = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    total += w[i];
    for (std::size_t c = 0; c < 3; ++c) sum[c] += w[i] * entries[i].second[c];
  }
  if (total < 1e-9) {
    log::warning("study '" + study_id + "': relevant-view weights sum to zero; using simple average");
    return simple_average(diag, study_id);
  }
  // Normalizing by the summed diagnosis mass equals normalizing by sum(w).
  return finish(study_id, sum, sum[0] + sum[1] + sum[2]);
}

PatientPrediction threshold_then_average(const PredictionSet& diag, const PredictionSet& view,
                                         const std::string& study_id, double cutoff) {
  if (!(cutoff >= 0.0 && cutoff <= 1.0)) throw ContractError("threshold_then_average: cutoff must be in [0, 1]");
  const auto entries = require_entries(diag, study_id);
  const auto w = relevance(entries, view, study_id);
  Probs3 sum{};
  std::size_t kept = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!(w[i] > cutoff)) continue;
    ++kept;
    for (std::size_t c = 0; c < 3; ++c) sum[c] += entries[i].second[c];
  }
  if (kept == 0) {
    log::warning("study '" + study_id + "': no image above the relevance cutoff; using simple average");
    return simple_average(diag, study_id);
  }
  return finish(study_id, sum, static_cast<double>(kept));
}

std::string to_string(AggregationStrategy strategy) {
  switch (strategy) {
    case AggregationStrategy::kSimpleAverage: return "simple_average";
    case AggregationStrategy::kViewPrioritized: return "view_prioritized";
    case AggregationStrategy::kThresholdThenAverage: return "threshold_then_average";
  }
  return "?";
}

AggregationStrategy strategy_from_string(const std::string& text) {
  for (auto s : {AggregationStrategy::kSimpleAverage, AggregationStrategy::kViewPrioritized,
                 AggregationStrategy::kThresholdThenAverage})
    if (to_string(s) == text) return s;
  throw ConfigError("unknown aggregation strategy '" + text +
                    "' (expected simple_average|view_prioritized|threshold_then_average)");
}

std::vector<PatientPrediction> aggregate(const PredictionSet& diag, const PredictionSet* view,
                                         AggregationStrategy strategy, double cutoff) {
  if (strategy != AggregationStrategy::kSimpleAverage && view == nullptr) {
    throw ContractError("aggregate: strategy " + to_string(strategy) + " needs view predictions");
  }
  std::vector<PatientPrediction> out;
  for (const std::string& id : diag.study_ids()) {
    switch (strategy) {
      case AggregationStrategy::kSimpleAverage: out.push_back(simple_average(diag, id)); break;
      case AggregationStrategy::kViewPrioritized: out.push_back(view_prioritized_average(diag, *view, id)); break;
      case AggregationStrategy::kThresholdThenAverage:
        out.push_back(threshold_then_average(diag, *view, id, cutoff));
        break;
    }
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  const fs::path p(path);
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

}  // namespace

void write_prediction_csv(const PredictionSet& set, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "study_id,image_id,p0,p1,p2\n";
  for (const auto& [key, p] : set.entries)
    out << key.first << ',' << key.second << ',' << fmt(p[0]) << ',' << fmt(p[1]) << ',' << fmt(p[2]) << '\n';
}

PredictionSet read_prediction_csv(const std::string& path, Task task) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  PredictionSet set;
  set.task = task;
  std::string line;
  std::uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "study_id,image_id,p0,p1,p2") throw ParseError("unexpected header in '" + path + "'", line_no);
      continue;
    }
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
      f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != 5) throw ParseError("expected 5 fields in '" + path + "'", line_no);
    Probs3 p{};
    try {
      for (std::size_t c = 0; c < 3; ++c) p[c] = std::stod(f[2 + c]);
    } catch (const std::exception&) {
      throw ParseError("invalid probability in '" + path + "'", line_no);
    }
    set.add(f[0], f[1], p);
  }
  if (line_no == 0) throw ParseError("empty file '" + path + "'", 0);
  return set;
}

void write_patient_csv(const std::vector<PatientPrediction>& preds, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "study_id,p_no,p_mildmod,p_severe,predicted\n";
  for (const PatientPrediction& p : preds)
    out << p.study_id << ',' << fmt(p.probs[0]) << ',' << fmt(p.probs[1]) << ',' << fmt(p.probs[2]) << ','
        << p.predicted_class << '\n';
}

}  // namespace sslecho

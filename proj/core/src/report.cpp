#include "sslecho/report.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sslecho/error.hpp"
#include "sslecho/metrics.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace sslecho {
namespace {

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<int> binary_labels(const std::vector<std::size_t>& truth) {
  std::vector<int> out;
  for (std::size_t t : truth) out.push_back(t == 0 ? 0 : 1);
  return out;
}

bool both_present(const std::vector<int>& labels) {
  bool zero = false, one = false;
  for (int l : labels) (l == 0 ? zero : one) = true;
  return zero && one;
}

}  // namespace

void emit_report(const ReportInput& input, const std::string& out_dir) {
  if (input.folds.empty()) throw ContractError("emit_report: no folds");
  const fs::path dir(out_dir);
  json folds = json::array();
  double ba_sum = 0.0, auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (const FoldEvaluation& f : input.folds) {
    if (f.truth.size() != f.pred.size() || f.truth.size() != f.unit_ids.size()) {
      throw DimensionError("emit_report: fold " + std::to_string(f.fold) + " has mismatched columns");
    }
    const double ba = balanced_accuracy(f.truth, f.pred);
    const ConfusionMatrix cm = confusion_matrix(f.truth, f.pred, input.classes);
    long correct = 0;
    for (std::size_t c = 0; c < input.classes; ++c) correct += cm.counts[c][c];
    json entry = {{"fold", f.fold},
                  {"units", f.truth.size()},
                  {"balanced_accuracy", ba},
                  {"accuracy", static_cast<double>(correct) / static_cast<double>(f.truth.size())}};
    ba_sum += ba;

    std::string cm_text = "true";
    for (std::size_t c = 0; c < input.classes; ++c)
      cm_text += ",pred_" + (c < input.class_names.size() ? input.class_names[c] : std::to_string(c));
    cm_text += "\n";
    for (std::size_t r = 0; r < input.classes; ++r) {
      cm_text += r < input.class_names.size() ? input.class_names[r] : std::to_string(r);
      for (long v : cm.counts[r]) cm_text += "," + std::to_string(v);
      cm_text += "\n";
    }
    write_text(dir / ("confusion_fold" + std::to_string(f.fold) + ".csv"), cm_text);

    if (!f.binary_scores.empty()) {
      const auto labels = binary_labels(f.truth);
      if (both_present(labels)) {
        const double auc = binary_auc(f.binary_scores, labels);
        entry["binary_auc"] = auc;
        auc_sum += auc;
        ++auc_n;
        std::string roc = "fpr,tpr,threshold\n";
        for (const RocPoint& p : roc_curve(f.binary_scores, labels))
          roc += fmt(p.fpr) + "," + fmt(p.tpr) + "," + fmt(p.threshold) + "\n";
        write_text(dir / ("roc_fold" + std::to_string(f.fold) + ".csv"), roc);
      }
    }
    folds.push_back(entry);
  }
  json mean = {{"balanced_accuracy", ba_sum / static_cast<double>(input.folds.size())}};
  if (auc_n > 0) mean["binary_auc"] = auc_sum / static_cast<double>(auc_n);
  const json doc = {{"task", input.task}, {"level", input.level}, {"folds", folds}, {"mean", mean}};
  write_text(dir / "metrics.json", doc.dump(2) + "\n");
}

void write_units_csv(const FoldEvaluation& eval, const std::string& path) {
  std::string text = "unit_id,true,predicted,score\n";
  for (std::size_t i = 0; i < eval.unit_ids.size(); ++i) {
    text += eval.unit_ids[i] + "," + std::to_string(eval.truth[i]) + "," + std::to_string(eval.pred[i]) + ",";
    if (!eval.binary_scores.empty()) text += fmt(eval.binary_scores[i]);
    text += "\n";
  }
  write_text(path, text);
}

FoldEvaluation read_units_csv(const std::string& path, std::size_t fold) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  FoldEvaluation eval;
  eval.fold = fold;
  std::string line;
  std::uint64_t line_no = 0;
  bool scored = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "unit_id,true,predicted,score") throw ParseError("unexpected header in '" + path + "'", line_no);
      continue;
    }
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
      f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != 4) throw ParseError("expected 4 fields in '" + path + "'", line_no);
    try {
      eval.unit_ids.push_back(f[0]);
      eval.truth.push_back(std::stoul(f[1]));
      eval.pred.push_back(std::stoul(f[2]));
      if (f[3].empty()) {
        scored = false;
      } else {
        eval.binary_scores.push_back(std::stod(f[3]));
      }
    } catch (const std::exception&) {
      throw ParseError("invalid number in '" + path + "'", line_no);
    }
  }
  if (!scored) eval.binary_scores.clear();
  return eval;
}

}  // namespace sslecho

#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sslecho/aggregation.hpp"
#include "sslecho/data.hpp"
#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "sslecho/metrics.hpp"
#include "sslecho/report.hpp"
#include "sslecho/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace sslecho::cli {
namespace {

const std::vector<std::string> kViewNames{"PLAX", "PSAX", "Other"};
const std::vector<std::string> kDiagnosisNames{"no_AS", "mild_mod_AS", "severe_AS"};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + path + "': " + e.what());
  }
}

void write_json(const fs::path& path, const json& doc) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << doc.dump(2) << "\n";
}

std::size_t worker_cap(std::size_t jobs) {
  if (const char* env = std::getenv("SSL_ECHO_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) jobs = std::min(jobs, static_cast<std::size_t>(cap));
    } catch (const std::exception&) {
      throw ConfigError(std::string("SSL_ECHO_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return std::max<std::size_t>(jobs, 1);
}

// ---------- synth ----------

struct SynthArgs {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool dry_run = false;
};

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  bool ok = true;
  if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) ok = v.is_number_unsigned();
  else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
  else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
  if (!ok) throw ConfigError(std::string("invalid value for '") + key + "': " + v.dump());
  out = v.get<T>();
}

SynthConfig synth_config_from_json(const json& j) {
  reject_unknown(j,
                 {"n_labeled_patients", "n_unlabeled_patients", "images_per_patient", "other_fraction", "image_size",
                  "noise_level", "seed", "split_ratio", "doppler_fraction"},
                 "synth config");
  SynthConfig c;
  take(j, "n_labeled_patients", c.n_labeled_patients);
  take(j, "n_unlabeled_patients", c.n_unlabeled_patients);
  if (j.contains("images_per_patient")) {
    const json& r = j.at("images_per_patient");
    if (!r.is_array() || r.size() != 2 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned()) {
      throw ConfigError("images_per_patient must be [min, max]");
    }
    c.images_per_patient = {r[0].get<std::size_t>(), r[1].get<std::size_t>()};
  }
  take(j, "other_fraction", c.other_fraction);
  take(j, "image_size", c.image_size);
  take(j, "noise_level", c.noise_level);
  take(j, "seed", c.seed);
  if (j.contains("split_ratio")) {
    std::string r;
    take(j, "split_ratio", r);
    c.split_ratio = SplitRatio::parse(r);
  }
  take(j, "doppler_fraction", c.doppler_fraction);
  return c;
}

json synth_config_to_json(const SynthConfig& c) {
  return {{"n_labeled_patients", c.n_labeled_patients},
          {"n_unlabeled_patients", c.n_unlabeled_patients},
          {"images_per_patient", {c.images_per_patient.first, c.images_per_patient.second}},
          {"other_fraction", c.other_fraction},
          {"image_size", c.image_size},
          {"noise_level", c.noise_level},
          {"seed", c.seed},
          {"split_ratio", c.split_ratio.str()},
          {"doppler_fraction", c.doppler_fraction}};
}

int cmd_synth(const SynthArgs& a) {
  SynthConfig cfg = a.config.empty() ? SynthConfig{} : synth_config_from_json(read_json_file(a.config));
  if (a.seed_set) cfg.seed = a.seed;
  cfg.validate();
  if (a.dry_run) {
    std::cout << "plan: synth -> " << a.out << "\n" << synth_config_to_json(cfg).dump(2) << "\n";
    return 0;
  }
  const SynthResult r = synth_generate(cfg);
  write_tmed(r.dataset, r.split, a.out, 0);
  Rng decoy_rng = Rng(cfg.seed).split("doppler");
  const std::size_t decoys = cfg.doppler_fraction > 0 ? write_doppler_decoys(r.dataset, a.out, cfg.doppler_fraction, decoy_rng) : 0;
  write_json(fs::path(a.out) / "synth_config.json", synth_config_to_json(cfg));
  std::cout << "wrote " << r.dataset.studies().size() << " studies, " << r.dataset.images().size() << " images";
  if (decoys > 0) std::cout << " (+" << decoys << " Doppler decoys)";
  std::cout << " to " << a.out << "\n";
  return 0;
}

// ---------- split ----------

struct SplitArgs {
  std::string data;
  std::string out;
  std::string ratio = "3:1:1";
  std::size_t folds = 4;
  std::uint64_t seed = 0;
  bool dry_run = false;
};

int cmd_split(const SplitArgs& a) {
  const SplitRatio ratio = SplitRatio::parse(a.ratio);
  if (a.folds == 0) throw ConfigError("--folds must be at least 1");
  const std::string out = a.out.empty() ? a.data : a.out;
  const fs::path images = fs::path(a.data) / "images";
  if (!fs::is_directory(images)) throw ConfigError("no images directory under '" + a.data + "'");
  const auto diagnoses = read_diagnosis_csv((fs::path(a.data) / "labels" / "diagnosis.csv").string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_directory()) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());
  std::vector<StudyLabel> studies;
  for (const std::string& id : ids) {
    auto it = diagnoses.find(id);
    studies.push_back({id, it == diagnoses.end() ? std::nullopt : std::optional<Diagnosis>(it->second)});
  }
  if (a.dry_run) {
    std::cout << "plan: split " << studies.size() << " studies (" << diagnoses.size() << " labeled) with ratio "
              << ratio.str() << " into " << a.folds << " fold(s), seed " << a.seed << " -> " << out << "/splits\n";
    return 0;
  }
  const auto folds = make_splits(studies, ratio, a.folds, a.seed);
  for (std::size_t k = 0; k < folds.size(); ++k) {
    write_split_csv(folds[k], fold_path(out, k));
    std::cout << "fold " << k << ": train " << folds[k].labeled_train.size() << ", valid "
              << folds[k].validation.size() << ", test " << folds[k].test.size() << ", unlabeled "
              << folds[k].unlabeled_pool.size() << "\n";
  }
  return 0;
}

// ---------- train ----------

struct TrainArgs {
  std::string config;
  std::string method;
  std::string task;
  std::string data;
  std::size_t fold = 0;
  std::string out;
  std::string warm_start;
  std::uint64_t seed = 0;
  bool seed_set = false;
  long epochs = 0;
  long images_per_epoch = 0;
  std::size_t jobs = 1;
  bool dry_run = false;
};

// Fields whose natural value is already a list; a list of lists is a grid.
bool list_valued(const std::string& key) { return key == "backbone.widths" || key == "mixmatch.lambda_grid"; }

void split_grid(const json& j, const std::string& prefix, json& base, Grid& grid) {
  for (const auto& [key, value] : j.items()) {
    const std::string full = prefix + key;
    if (value.is_object()) {
      json nested = json::object();
      split_grid(value, full + ".", nested, grid);
      base[key] = nested;
    } else if (value.is_array() && (!list_valued(full) || (!value.empty() && value[0].is_array()))) {
      std::vector<std::string> values;
      for (const json& v : value) values.push_back(v.dump());
      grid[full] = values;
    } else {
      base[key] = value;
    }
  }
}

struct DataInfo {
  std::string root;
  std::size_t fold = 0;
  std::size_t image_size = 16;
  json to_json() const { return {{"root", root}, {"fold", fold}, {"image_size", image_size}}; }
};

struct LoadedData {
  SplitSpec split;
  LoadResult load;
};

LoadedData load_data(const DataInfo& info) {
  const std::string split_path = fold_path(info.root, info.fold);
  if (!fs::exists(split_path)) throw ConfigError("split file '" + split_path + "' does not exist");
  LoadedData d;
  d.split = read_split_csv(split_path);
  LoadOptions opt;
  opt.image_size = info.image_size;
  d.load = load_tmed(info.root, d.split, opt);
  log::info("loaded " + std::to_string(d.load.dataset.images().size()) + " images; dropped " +
            std::to_string(d.load.doppler_dropped) + " Doppler, " + std::to_string(d.load.unreadable) + " unreadable");
  return d;
}

int cmd_train(const TrainArgs& a) {
  json base = json::object();
  Grid grid;
  if (!a.config.empty()) split_grid(read_json_file(a.config), "", base, grid);
  // Flags override the file before parsing so that method-specific keys are
  // checked against the effective method.
  if (!a.method.empty()) base["method"] = a.method;
  if (!a.task.empty()) base["task"] = a.task;
  RunConfig cfg = apply_run_config_json(RunConfig{}, base.dump());
  if (a.seed_set) cfg.seed = a.seed;
  if (a.epochs > 0) cfg.epochs = a.epochs;
  if (a.images_per_epoch > 0) cfg.images_per_epoch = a.images_per_epoch;
  if (!a.warm_start.empty()) cfg.warm_start = a.warm_start;
  cfg.validate();
  const std::vector<RunConfig> cells = expand_grid(cfg, grid);
  for (const RunConfig& c : cells) c.validate();
  const DataInfo info{a.data, a.fold, cfg.backbone.input_size};
  const std::size_t jobs = worker_cap(a.jobs);

  if (a.dry_run) {
    std::cout << "plan: train " << to_string(cfg.method) << " on " << to_string(cfg.task) << " task, data "
              << a.data << " fold " << a.fold << " -> " << a.out << "\n";
    std::cout << "  " << cfg.epochs << " epoch(s) x " << cfg.iterations_per_epoch() << " iteration(s)\n";
    if (grid.empty()) {
      std::cout << run_config_to_json(cfg) << "\n";
    } else {
      std::cout << "  grid of " << cells.size() << " cell(s), " << jobs << " worker(s)\n";
      for (std::size_t i = 0; i < cells.size(); ++i)
        std::cout << "  cell" << i << ": " << json::parse(run_config_to_json(cells[i])).dump() << "\n";
    }
    return 0;
  }

  const LoadedData data = load_data(info);
  if (grid.empty()) {
    TrainOptions opt;
    opt.out_dir = a.out;
    opt.run_id = fs::path(a.out).filename().string();
    opt.keep_checkpoints = false;
    opt.dataset_info = info.to_json().dump();
    const RunResult r = run_training(cfg, data.load.dataset, data.split, opt);
    std::cout << "trained " << r.log.epochs.size() << " epoch(s); final val balanced accuracy "
              << r.log.epochs.back().val_balanced_accuracy << "\n";
    return 0;
  }
  const GridResult g = grid_search(cfg, grid, data.load.dataset, data.split, a.out, jobs, info.to_json().dump());
  json cells_doc = json::array();
  for (std::size_t i = 0; i < g.cells.size(); ++i) {
    const GridCell& c = g.cells[i];
    cells_doc.push_back({{"cell", i},
                         {"dir", "cell" + std::to_string(i)},
                         {"config", json::parse(run_config_to_json(c.config))},
                         {"failed", c.failed},
                         {"error", c.error},
                         {"ensemble_val_balanced_accuracy", c.ensemble_val_balanced_accuracy}});
  }
  write_json(fs::path(a.out) / "grid.json", {{"best", g.best}, {"best_dir", "cell" + std::to_string(g.best)},
                                             {"cells", cells_doc}});
  std::cout << "grid: best cell" << g.best << " with ensemble val balanced accuracy "
            << g.cells[g.best].ensemble_val_balanced_accuracy << "\n";
  return 0;
}

// ---------- runs on disk ----------

struct LoadedRun {
  std::string dir;
  RunConfig cfg;
  DataInfo data;
  std::vector<ModelCheckpoint> checkpoints;
};

LoadedRun load_run(const std::string& dir) {
  // A grid directory resolves to its best cell.
  const fs::path grid_file = fs::path(dir) / "grid.json";
  if (fs::exists(grid_file) && !fs::exists(fs::path(dir) / "config.json")) {
    return load_run((fs::path(dir) / read_json_file(grid_file.string()).at("best_dir").get<std::string>()).string());
  }
  const json doc = read_json_file((fs::path(dir) / "config.json").string());
  LoadedRun run;
  run.dir = dir;
  if (!doc.contains("run") || !doc.contains("dataset")) {
    throw ConfigError("'" + dir + "/config.json' lacks run or dataset sections");
  }
  run.cfg = run_config_from_json(doc.at("run").dump());
  const json& d = doc.at("dataset");
  run.data.root = d.at("root").get<std::string>();
  run.data.fold = d.at("fold").get<std::size_t>();
  run.data.image_size = d.at("image_size").get<std::size_t>();
  for (long e = 1; e <= run.cfg.epochs; ++e) {
    run.checkpoints.push_back(load_checkpoint((fs::path(dir) / ("ckpt_epoch" + std::to_string(e))).string()));
  }
  return run;
}

struct RunPredictions {
  EnsembleSelection selection;
  std::vector<std::size_t> images;  // evaluated partition
  Tensor probs;
  std::vector<std::size_t> val_images;
  Tensor val_probs;
};

RunPredictions predict_run(const LoadedRun& run, const Dataset& dataset, const SplitSpec& split, Partition part) {
  RunPredictions out;
  out.val_images = partition_images(dataset, split, Partition::kValid);
  out.images = partition_images(dataset, split, part);
  std::vector<std::size_t> val_labels;
  for (std::size_t i : out.val_images) {
    const auto l = dataset.label(i, run.cfg.task);
    if (!l) throw IntegrityError("validation image lacks a label");
    val_labels.push_back(*l);
  }
  std::vector<Tensor> val_probs;
  for (const ModelCheckpoint& c : run.checkpoints) val_probs.push_back(predict_images(c, dataset, out.val_images));
  EnsemblePrediction ep = ensemble_predict(run.checkpoints, val_probs, val_labels, dataset, out.images,
                                           run.cfg.effective_ensemble_k());
  out.val_probs = ensemble_average(val_probs, ep.selection.bag);
  out.selection = std::move(ep.selection);
  out.probs = std::move(ep.probs);
  return out;
}

PredictionSet to_prediction_set(const Dataset& dataset, const std::vector<std::size_t>& images, const Tensor& probs,
                                Task task) {
  PredictionSet set;
  set.task = task;
  const auto p = probs.data();
  for (std::size_t r = 0; r < images.size(); ++r) {
    const ImageRecord& img = dataset.images()[images[r]];
    Probs3 v{p[r * 3], p[r * 3 + 1], p[r * 3 + 2]};
    const double s = v[0] + v[1] + v[2];
    for (double& x : v) x /= s;
    set.add(img.study_id, img.image_id, v);
  }
  return set;
}

// ---------- eval ----------

struct EvalArgs {
  std::string run;
  std::string out;
  std::string partition = "test";
  bool dry_run = false;
};

int cmd_eval(const EvalArgs& a) {
  const Partition part = partition_from_string(a.partition);
  if (part == Partition::kUnlabeled || part == Partition::kTrain) {
    throw ConfigError("--partition must be valid or test");
  }
  const LoadedRun run = load_run(a.run);
  if (a.dry_run) {
    std::cout << "plan: eval " << run.checkpoints.size() << " checkpoint(s) of " << run.dir << " (k="
              << run.cfg.effective_ensemble_k() << ") on " << a.partition << " of " << run.data.root << " fold "
              << run.data.fold << " -> " << a.out << "\n";
    return 0;
  }
  const LoadedData data = load_data(run.data);
  const Dataset& ds = data.load.dataset;
  const RunPredictions pr = predict_run(run, ds, data.split, part);
  const Task task = run.cfg.task;
  const fs::path out(a.out);
  write_prediction_csv(to_prediction_set(ds, pr.images, pr.probs, task), (out / ("predictions_" + a.partition + ".csv")).string());
  write_prediction_csv(to_prediction_set(ds, pr.val_images, pr.val_probs, task), (out / "predictions_valid_ensemble.csv").string());

  FoldEvaluation fe;
  fe.fold = run.data.fold;
  const auto pred = argmax_rows(pr.probs);
  const auto p = pr.probs.data();
  for (std::size_t r = 0; r < pr.images.size(); ++r) {
    const ImageRecord& img = ds.images()[pr.images[r]];
    fe.unit_ids.push_back(img.study_id + "/" + img.image_id);
    fe.truth.push_back(*ds.label(pr.images[r], task));
    fe.pred.push_back(pred[r]);
    if (task == Task::kDiagnosis) fe.binary_scores.push_back(p[r * 3 + 1] + p[r * 3 + 2]);
  }
  write_units_csv(fe, (out / "units.csv").string());
  emit_report({to_string(task), "image", 3, task == Task::kView ? kViewNames : kDiagnosisNames, {fe}}, a.out);
  write_json(out / "ensemble.json", {{"k", run.cfg.effective_ensemble_k()},
                                     {"bag_epochs", [&] {
                                        json b = json::array();
                                        for (std::size_t m : pr.selection.bag) b.push_back(m + 1);
                                        return b;
                                      }()},
                                     {"val_scores", pr.selection.scores},
                                     {"best_single_val", pr.selection.best_single}});
  std::cout << "image-level " << a.partition << " balanced accuracy " << balanced_accuracy(fe.truth, fe.pred) << "\n";
  return 0;
}

// ---------- aggregate ----------

struct AggregateArgs {
  std::string strategy = "view_prioritized";
  std::string diag;
  std::string view;
  std::string out;
  double cutoff = -1.0;
  bool dry_run = false;
};

std::vector<std::size_t> patient_truth(const Dataset& ds, const std::vector<PatientPrediction>& preds) {
  std::vector<std::size_t> t;
  for (const PatientPrediction& p : preds) {
    const auto& s = ds.study(p.study_id);
    if (!s.diagnosis_label) throw IntegrityError("study '" + p.study_id + "' has no diagnosis label");
    t.push_back(static_cast<std::size_t>(*s.diagnosis_label));
  }
  return t;
}

int cmd_aggregate(const AggregateArgs& a) {
  const AggregationStrategy strategy = strategy_from_string(a.strategy);
  const bool needs_view = strategy != AggregationStrategy::kSimpleAverage;
  if (needs_view && a.view.empty()) throw ConfigError("--view is required for strategy " + a.strategy);
  if (a.cutoff != -1.0 && !(a.cutoff >= 0.0 && a.cutoff <= 1.0)) throw ConfigError("--cutoff must be in [0, 1]");
  const LoadedRun diag_run = load_run(a.diag);
  if (diag_run.cfg.task != Task::kDiagnosis) throw ConfigError("--diag run was not trained on the diagnosis task");
  std::optional<LoadedRun> view_run;
  if (needs_view) {
    view_run = load_run(a.view);
    if (view_run->cfg.task != Task::kView) throw ConfigError("--view run was not trained on the view task");
    if (view_run->data.image_size != diag_run.data.image_size) {
      throw ConfigError("--view and --diag runs use different image sizes");
    }
  }
  if (a.dry_run) {
    std::cout << "plan: aggregate with " << a.strategy << " on test studies of " << diag_run.data.root << " fold "
              << diag_run.data.fold << " -> " << a.out << "\n";
    return 0;
  }
  const LoadedData data = load_data(diag_run.data);
  const Dataset& ds = data.load.dataset;
  const RunPredictions dp = predict_run(diag_run, ds, data.split, Partition::kTest);
  const PredictionSet diag_test = to_prediction_set(ds, dp.images, dp.probs, Task::kDiagnosis);
  const PredictionSet diag_val = to_prediction_set(ds, dp.val_images, dp.val_probs, Task::kDiagnosis);
  PredictionSet view_test, view_val;
  if (view_run) {
    const RunPredictions vp = predict_run(*view_run, ds, data.split, Partition::kTest);
    view_test = to_prediction_set(ds, vp.images, vp.probs, Task::kView);
    view_val = to_prediction_set(ds, vp.val_images, vp.val_probs, Task::kView);
  }

  double cutoff = a.cutoff;
  if (strategy == AggregationStrategy::kThresholdThenAverage && cutoff < 0.0) {
    // Chosen on validation patients; ties keep the smallest cutoff.
    double best = -1.0;
    for (int s = 0; s < 20; ++s) {
      const double c = s * 0.05;
      const auto preds = aggregate(diag_val, &view_val, strategy, c);
      std::vector<std::size_t> pred;
      for (const auto& p : preds) pred.push_back(p.predicted_class);
      const double ba = balanced_accuracy(patient_truth(ds, preds), pred);
      if (ba > best) {
        best = ba;
        cutoff = c;
      }
    }
  }
  if (cutoff < 0.0) cutoff = 0.5;

  const auto preds = aggregate(diag_test, view_run ? &view_test : nullptr, strategy, cutoff);
  const fs::path out(a.out);
  write_patient_csv(preds, (out / "patients.csv").string());
  FoldEvaluation fe;
  fe.fold = diag_run.data.fold;
  fe.truth = patient_truth(ds, preds);
  std::size_t ties = 0;
  for (const auto& p : preds) {
    fe.unit_ids.push_back(p.study_id);
    fe.pred.push_back(p.predicted_class);
    fe.binary_scores.push_back(p.probs[1] + p.probs[2]);
    if (p.tie) ++ties;
  }
  write_units_csv(fe, (out / "units.csv").string());
  emit_report({"diagnosis", "patient", 3, kDiagnosisNames, {fe}}, a.out);
  json summary = {{"strategy", a.strategy}, {"argmax_ties", ties}};
  if (strategy == AggregationStrategy::kThresholdThenAverage) summary["cutoff"] = cutoff;
  write_json(out / "aggregate.json", summary);
  std::cout << "patient-level balanced accuracy " << balanced_accuracy(fe.truth, fe.pred) << " (" << preds.size()
            << " studies)\n";
  return 0;
}

// ---------- report ----------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
  bool dry_run = false;
};

int cmd_report(const ReportArgs& a) {
  if (a.inputs.empty()) throw ConfigError("--inputs needs at least one evaluation directory");
  ReportInput merged;
  std::set<std::size_t> seen;
  for (const std::string& dir : a.inputs) {
    const json m = read_json_file((fs::path(dir) / "metrics.json").string());
    const std::string task = m.at("task").get<std::string>();
    const std::string level = m.at("level").get<std::string>();
    if (merged.task.empty()) {
      merged.task = task;
      merged.level = level;
      merged.class_names = task == "view" ? kViewNames : kDiagnosisNames;
    } else if (merged.task != task || merged.level != level) {
      throw ConfigError("input '" + dir + "' is a " + task + "/" + level + " evaluation, expected " + merged.task +
                        "/" + merged.level);
    }
    const std::size_t fold = m.at("folds").at(0).at("fold").get<std::size_t>();
    if (!seen.insert(fold).second) throw ConfigError("fold " + std::to_string(fold) + " appears twice");
    merged.folds.push_back(read_units_csv((fs::path(dir) / "units.csv").string(), fold));
  }
  std::sort(merged.folds.begin(), merged.folds.end(),
            [](const FoldEvaluation& x, const FoldEvaluation& y) { return x.fold < y.fold; });
  if (a.dry_run) {
    std::cout << "plan: merge " << merged.folds.size() << " fold(s) of " << merged.task << "/" << merged.level
              << " results -> " << a.out << "\n";
    return 0;
  }
  emit_report(merged, a.out);
  double mean = 0.0;
  for (const auto& f : merged.folds) mean += balanced_accuracy(f.truth, f.pred);
  std::cout << "mean balanced accuracy over " << merged.folds.size() << " fold(s): "
            << mean / static_cast<double>(merged.folds.size()) << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Semi-supervised echocardiogram view and aortic stenosis classification"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset in the TMED layout");
  s->add_option("--config", synth.config, "Synthetic dataset JSON config");
  s->add_option("--out", synth.out, "Output directory")->required();
  auto* synth_seed = s->add_option("--seed", synth.seed, "Random seed");
  s->add_flag("--dry-run", synth.dry_run, "Validate and print the plan only");

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Build stratified, patient-disjoint folds");
  sp->add_option("--data", split.data, "Dataset root")->required();
  sp->add_option("--out", split.out, "Output root (default: the dataset root)");
  sp->add_option("--ratio", split.ratio, "train:valid:test ratio")->capture_default_str();
  sp->add_option("--folds", split.folds, "Number of folds")->capture_default_str();
  sp->add_option("--seed", split.seed, "Random seed");
  sp->add_flag("--dry-run", split.dry_run, "Validate and print the plan only");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train one run or a grid of runs");
  t->add_option("--config", train.config, "RunConfig JSON; list values define a grid");
  t->add_option("--method", train.method, "baseline|pseudo_label|vat|mixmatch|mixmatch_augment_only|multitask");
  t->add_option("--task", train.task, "view|diagnosis");
  t->add_option("--data", train.data, "Dataset root")->required();
  t->add_option("--fold", train.fold, "Fold index")->capture_default_str();
  t->add_option("--out", train.out, "Run directory")->required();
  t->add_option("--warm-start", train.warm_start, "View-model checkpoint to initialize from");
  auto* train_seed = t->add_option("--seed", train.seed, "Random seed");
  t->add_option("--epochs", train.epochs, "Override epochs");
  t->add_option("--images-per-epoch", train.images_per_epoch, "Override images per epoch");
  t->add_option("--jobs", train.jobs, "Concurrent grid cells")->capture_default_str();
  t->add_flag("--dry-run", train.dry_run, "Validate and print the plan only");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Ensemble a run's checkpoints and score images");
  e->add_option("--run", eval.run, "Run directory")->required();
  e->add_option("--out", eval.out, "Output directory")->required();
  e->add_option("--partition", eval.partition, "valid|test")->capture_default_str();
  e->add_flag("--dry-run", eval.dry_run, "Validate and print the plan only");

  AggregateArgs agg;
  auto* ag = app.add_subcommand("aggregate", "Patient-level diagnosis from image predictions");
  ag->add_option("--strategy", agg.strategy, "simple_average|view_prioritized|threshold_then_average")
      ->capture_default_str();
  ag->add_option("--diag", agg.diag, "Diagnosis run directory")->required();
  ag->add_option("--view", agg.view, "View run directory");
  ag->add_option("--out", agg.out, "Output directory")->required();
  ag->add_option("--cutoff", agg.cutoff, "Relevance cutoff (default: chosen on validation)");
  ag->add_flag("--dry-run", agg.dry_run, "Validate and print the plan only");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Merge per-fold evaluations");
  r->add_option("--inputs", rep.inputs, "Evaluation directories")->required()->delimiter(',');
  r->add_option("--out", rep.out, "Output directory")->required();
  r->add_flag("--dry-run", rep.dry_run, "Validate and print the plan only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  }
  log::set_level(verbose ? log::Level::kInfo : log::Level::kWarning);
  synth.seed_set = synth_seed->count() > 0;
  train.seed_set = train_seed->count() > 0;

  try {
    if (*s) return cmd_synth(synth);
    if (*sp) return cmd_split(split);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*ag) return cmd_aggregate(agg);
    if (*r) return cmd_report(rep);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> storage{"sslecho"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& a : storage) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace sslecho::cli

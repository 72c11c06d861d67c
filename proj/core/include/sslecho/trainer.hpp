#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslecho/data.hpp"
#include "sslecho/model.hpp"
#include "sslecho/objectives.hpp"
#include "sslecho/vat.hpp"

namespace sslecho {

enum class Method { kBaseline, kPseudoLabel, kVat, kMixMatch, kMixMatchAugmentOnly, kMultitask };
std::string to_string(Method method);
Method method_from_string(const std::string& text);
// Whether the method draws from the unlabeled pool.
bool uses_unlabeled(Method method);
// Whether the method applies lambda_schedule to an unlabeled loss.
bool uses_lambda(Method method);

struct RunConfig {
  Method method = Method::kBaseline;
  Task task = Task::kView;
  BackboneConfig backbone;
  double lr = 0.002;
  double weight_decay = 0.0002;
  long epochs = 8;
  long images_per_epoch = 2048;
  std::size_t batch_labeled = 64;
  std::size_t batch_unlabeled = 64;

  // Unlabeled-loss weight. Negative delay/ramp mean "derive from epochs"
  // (delay = epochs / 8, ramp = epochs / 2).
  RampMode lambda_mode = RampMode::kDelayedRamp;
  double lambda_max = 75.0;
  double lambda_delay_epochs = -1.0;
  double lambda_ramp_epochs = -1.0;

  double tau = 0.95;            // pseudo_label
  VatOptions vat;               // vat
  bool vat_on_labeled = true;   // vat: also regularize labeled images
  MixMatchConfig mixmatch;      // mixmatch, mixmatch_augment_only
  double gamma = 1.0;           // multitask

  std::string warm_start;       // view checkpoint path, empty = none
  std::size_t ensemble_k = 0;   // 0 = min(25, epochs)
  std::uint64_t seed = 0;

  long iterations_per_epoch() const;
  long total_iterations() const { return iterations_per_epoch() * epochs; }
  std::size_t effective_ensemble_k() const;
  // Identically zero for methods without an unlabeled loss.
  LambdaSchedule lambda_schedule() const;
  // Backbone with num_classes/aux_classes set for the task and method.
  BackboneConfig model_config() const;

  // Throws ConfigError on inconsistent settings.
  void validate() const;
};

// JSON (de)serialization; unknown keys are rejected with ConfigError.
std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
// Applies the keys of a JSON object on top of cfg (same strictness).
RunConfig apply_run_config_json(const RunConfig& cfg, const std::string& text);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double labeled_loss = 0.0;    // mean over the epoch's iterations
  double unlabeled_loss = 0.0;  // mean over iterations with lambda > 0
  double lambda = 0.0;          // value at the epoch's last iteration
  double val_balanced_accuracy = 0.0;
  std::string checkpoint_path;  // empty for in-memory runs
};

struct RunLog {
  std::vector<EpochRecord> epochs;
  std::vector<double> lambda_trace;  // lambda used at every iteration
};

void write_run_log_csv(const RunLog& log, const std::string& path);

struct TrainOptions {
  std::string out_dir;           // empty = keep everything in memory only
  std::string run_id = "run";
  const ModelCheckpoint* warm_start = nullptr;  // overrides RunConfig::warm_start
  bool keep_checkpoints = true;  // retain per-epoch checkpoints in RunResult
  std::string dataset_info;      // JSON object recorded in config.json
};

struct RunResult {
  RunConfig config;
  RunLog log;
  std::vector<ModelCheckpoint> checkpoints;   // one per epoch when kept
  std::vector<std::string> checkpoint_paths;  // one per epoch when written
  // Validation predictions of each epoch's checkpoint (image level).
  std::vector<std::size_t> val_images;
  std::vector<std::size_t> val_labels;
  std::vector<Tensor> val_probs;
};

RunResult run_training(const RunConfig& cfg, const Dataset& dataset, const SplitSpec& split,
                       const TrainOptions& options = {});

// Inference-mode class probabilities [N x 3] for image indices, in batches.
// For multitask checkpoints the diagnosis head is used.
Tensor predict_images(const ModelCheckpoint& ckpt, const Dataset& dataset, std::span<const std::size_t> images);

// --- Checkpoint ensembling ---

struct EnsembleSelection {
  std::vector<std::size_t> bag;  // selected member indices, with repetition
  std::vector<double> scores;    // validation balanced accuracy after each addition
  double best_single = 0.0;
  double score() const { return scores.empty() ? 0.0 : scores.back(); }
};

// Greedy forward selection with replacement on validation probabilities.
// Stops after k additions or when no candidate strictly improves the bag;
// ties pick the lowest member index.
EnsembleSelection ensemble_select(const std::vector<Tensor>& val_probs, std::span<const std::size_t> val_labels,
                                  std::size_t k);

// Mean of the members' probabilities over the bag.
Tensor ensemble_average(const std::vector<Tensor>& member_probs, const std::vector<std::size_t>& bag);

// Selects on the validation predictions of `checkpoints` (last k) and
// returns the bag-averaged probabilities for `images`.
struct EnsemblePrediction {
  EnsembleSelection selection;
  Tensor probs;
};
EnsemblePrediction ensemble_predict(const std::vector<ModelCheckpoint>& checkpoints,
                                    const std::vector<Tensor>& val_probs, std::span<const std::size_t> val_labels,
                                    const Dataset& dataset, std::span<const std::size_t> images, std::size_t k);

// --- Grid search ---

// key -> candidate values (JSON literals) for any RunConfig field.
using Grid = std::map<std::string, std::vector<std::string>>;

struct GridCell {
  RunConfig config;
  bool failed = false;
  std::string error;
  double ensemble_val_balanced_accuracy = 0.0;
  RunLog log;
};

struct GridResult {
  std::vector<GridCell> cells;  // Cartesian order, last key varies fastest
  std::size_t best = 0;
  const RunConfig& best_config() const { return cells.at(best).config; }
};

// Cartesian product of grid values over base. Cell i trains with seed
// mix_seed(base.seed, i) in <out_dir>/cell<i> (when out_dir is set). The
// winner has the highest ensemble validation balanced accuracy; ties go to
// the earliest cell. Diverging cells are recorded as failed.
std::vector<RunConfig> expand_grid(const RunConfig& base, const Grid& grid);
GridResult grid_search(const RunConfig& base, const Grid& grid, const Dataset& dataset, const SplitSpec& split,
                       const std::string& out_dir = "", std::size_t jobs = 1, const std::string& dataset_info = "");

}  // namespace sslecho

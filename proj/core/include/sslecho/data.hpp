#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sslecho/model.hpp"
#include "sslecho/objectives.hpp"
#include "sslecho/rng.hpp"
#include "sslecho/tensor.hpp"

namespace sslecho {

inline constexpr std::size_t kNumViews = 3;
inline constexpr std::size_t kNumDiagnoses = 3;

enum class View : std::uint8_t { kPLAX = 0, kPSAX = 1, kOther = 2 };
enum class Diagnosis : std::uint8_t { kNoAS = 0, kMildModAS = 1, kSevereAS = 2 };

std::string to_string(View view);
std::string to_string(Diagnosis diagnosis);
View view_from_string(const std::string& text);
Diagnosis diagnosis_from_string(const std::string& text);

struct ImageRecord {
  std::string study_id;
  std::string image_id;
  std::size_t size = 0;             // side length in pixels
  std::vector<Scalar> pixels;       // size * size, row-major, in [0, 1]
  std::optional<View> view_label;   // only for labeled-split studies
  std::pair<std::size_t, std::size_t> source_dims{0, 0};  // (width, height)
};

struct StudyRecord {
  std::string study_id;
  std::vector<std::string> image_ids;
  std::optional<Diagnosis> diagnosis_label;
};

// Studies and images sorted by id; immutable once built.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::size_t image_size, std::vector<StudyRecord> studies, std::vector<ImageRecord> images);

  std::size_t image_size() const { return image_size_; }
  const std::vector<StudyRecord>& studies() const { return studies_; }
  const std::vector<ImageRecord>& images() const { return images_; }

  bool has_study(const std::string& study_id) const;
  const StudyRecord& study(const std::string& study_id) const;
  // Indices into images() for a study, in image-id order.
  const std::vector<std::size_t>& image_indices(const std::string& study_id) const;
  std::optional<std::size_t> find_image(const std::string& study_id, const std::string& image_id) const;

  // Per-image class for a task. Diagnosis images inherit their study's label.
  std::optional<std::size_t> label(std::size_t image_index, Task task) const;

  // Stacks images into [N x 1 x S x S].
  Tensor batch(std::span<const std::size_t> image_indices) const;

 private:
  std::size_t image_size_ = 0;
  std::vector<StudyRecord> studies_;
  std::vector<ImageRecord> images_;
  std::map<std::string, std::size_t> study_index_;
  std::map<std::string, std::vector<std::size_t>> images_by_study_;
};

enum class Partition { kTrain, kValid, kTest, kUnlabeled };
std::string to_string(Partition partition);
Partition partition_from_string(const std::string& text);

struct SplitSpec {
  std::uint64_t seed = 0;
  std::set<std::string> labeled_train;
  std::set<std::string> validation;
  std::set<std::string> test;
  std::set<std::string> unlabeled_pool;

  const std::set<std::string>& partition(Partition p) const;
  std::optional<Partition> partition_of(const std::string& study_id) const;
  bool is_labeled(const std::string& study_id) const;
  // Throws SplitError when any two sets intersect.
  void validate() const;
};

// Image indices of every study in the given partition, sorted.
std::vector<std::size_t> partition_images(const Dataset& dataset, const SplitSpec& split, Partition p);

// --- Doppler filter and preprocessing ---

using DopplerList = std::vector<std::pair<std::size_t, std::size_t>>;
// (width, height) pairs of Doppler recordings; orientation-exact.
const DopplerList& default_doppler_dims();
bool is_doppler(std::size_t width, std::size_t height, const DopplerList& dims = default_doppler_dims());

// Raw decoded image: row-major, interleaved channels, values in [0, 1].
struct PixelGrid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<double> values;
};

// Unweighted channel mean -> [height x width].
std::vector<double> to_grayscale(const PixelGrid& raw);
// Zero-pads the shorter axis symmetrically (odd remainder after the image)
// and returns the square side length alongside the padded pixels.
std::vector<double> pad_to_square(std::span<const double> gray, std::size_t width, std::size_t height,
                                  std::size_t* side);
// Area-average resampling of a square image.
std::vector<double> resize_area(std::span<const double> square, std::size_t side, std::size_t target);
// grayscale -> pad to square -> area resize -> clamp to [0, 1].
std::vector<Scalar> preprocess_image(const PixelGrid& raw, std::size_t target_size);

// --- TMED on-disk layout ---
//   <root>/images/<study_id>/<image_id>.png
//   <root>/labels/diagnosis.csv   study_id,diagnosis
//   <root>/labels/views.csv       study_id,image_id,view
//   <root>/splits/fold<k>.csv     study_id,partition

struct LoadOptions {
  std::size_t image_size = 16;
  DopplerList doppler_dims = default_doppler_dims();
};

struct LoadResult {
  Dataset dataset;
  std::size_t doppler_dropped = 0;
  std::size_t unreadable = 0;
};

LoadResult load_tmed(const std::string& root, const SplitSpec& split, const LoadOptions& options = {});

SplitSpec read_split_csv(const std::string& path);
void write_split_csv(const SplitSpec& split, const std::string& path);
std::string fold_path(const std::string& root, std::size_t fold);

// Labels of every study under <root>/labels, regardless of split.
std::map<std::string, Diagnosis> read_diagnosis_csv(const std::string& path);

// Writes images (8-bit PNG), label CSVs (labeled studies only) and the split
// as fold<fold>.csv.
void write_tmed(const Dataset& dataset, const SplitSpec& split, const std::string& root, std::size_t fold = 0);

// Adds Doppler-sized PNGs (not listed in any CSV) to a fraction of studies.
std::size_t write_doppler_decoys(const Dataset& dataset, const std::string& root, double fraction, Rng& rng);

// --- Splits ---

struct SplitRatio {
  std::size_t train = 1;
  std::size_t valid = 1;
  std::size_t test = 1;
  static SplitRatio parse(const std::string& text);  // "3:1:1"
  std::string str() const;
};

struct StudyLabel {
  std::string study_id;
  std::optional<Diagnosis> diagnosis;  // absent -> unlabeled pool
};

// Diagnosis-stratified, patient-disjoint folds. Partition totals and per-class
// counts use largest-remainder rounding; fold k shuffles with
// mix_seed(seed, k).
std::vector<SplitSpec> make_splits(const std::vector<StudyLabel>& studies, const SplitRatio& ratio,
                                   std::size_t n_folds, std::uint64_t seed);

// --- Synthetic generator ---

struct SynthConfig {
  std::size_t n_labeled_patients = 54;
  std::size_t n_unlabeled_patients = 200;
  std::pair<std::size_t, std::size_t> images_per_patient{8, 16};
  double other_fraction = 0.8;
  std::size_t image_size = 16;
  double noise_level = 0.08;
  std::uint64_t seed = 0;
  SplitRatio split_ratio{1, 1, 1};
  double doppler_fraction = 0.0;  // decoys written by the CLI only

  void validate() const;
};

struct SynthResult {
  Dataset dataset;
  SplitSpec split;
};

SynthResult synth_generate(const SynthConfig& cfg);

// Renders one synthetic image; exposed for tests and benchmarks.
std::vector<Scalar> render_synthetic_image(View view, Diagnosis diagnosis, std::size_t size,
                                           double noise_level, Rng& rng);

// --- Minibatch sampling ---

// Uniform sampling without replacement within an epoch; the pool is
// reshuffled each time it is exhausted.
class IndexSampler {
 public:
  IndexSampler(std::vector<std::size_t> pool, Rng rng);
  std::vector<std::size_t> next(std::size_t n);
  std::size_t pool_size() const { return pool_.size(); }

 private:
  void reshuffle();
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

struct LabeledMinibatch {
  std::vector<std::size_t> indices;
  Tensor images;                      // [B x 1 x S x S]
  std::vector<std::size_t> labels;    // task labels
  std::vector<std::size_t> view_labels;  // filled for multitask
};

// Deliberately carries no label fields.
struct UnlabeledMinibatch {
  Tensor images;
};

class MinibatchSampler {
 public:
  // `task` picks the labeled pool's labels; kMultitask also fills view labels.
  MinibatchSampler(const Dataset& dataset, const SplitSpec& split, Task task, Rng rng,
                   bool include_unlabeled = true);

  LabeledMinibatch next_labeled(std::size_t n);
  UnlabeledMinibatch next_unlabeled(std::size_t n);

  std::size_t labeled_pool_size() const { return labeled_.pool_size(); }
  std::size_t unlabeled_pool_size() const { return unlabeled_ ? unlabeled_->pool_size() : 0; }

 private:
  const Dataset& dataset_;
  Task task_;
  IndexSampler labeled_;
  std::optional<IndexSampler> unlabeled_;
};

}  // namespace sslecho

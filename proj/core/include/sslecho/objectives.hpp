#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sslecho/rng.hpp"
#include "sslecho/tensor.hpp"

namespace sslecho {

// Inverse-frequency weights, w_c = prod_{k!=c} N_k / sum_j prod_{k!=j} N_k.
// Sums to one; rarer classes get larger weight.
struct ClassWeights {
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
  double operator[](std::size_t c) const { return weights[c]; }
  static ClassWeights uniform(std::size_t classes);
};

// Throws ContractError when any count is zero (the class would be degenerate).
ClassWeights class_weights(std::span<const long> counts);

// Batch mean of -sum_c w_c t_c log p_c. `targets` is one-hot for hard labels;
// soft label distributions (MixUp outputs) are accepted as well. Probabilities
// are clamped at 1e-12 before the log.
Tensor weighted_cross_entropy(Tape& tape, const Tensor& probs, const Tensor& targets,
                              const ClassWeights& weights);

// Examples whose max probability is strictly above tau contribute the weighted
// cross-entropy against their (detached) argmax; the rest contribute zero. The
// mean runs over the whole batch. Argmax ties resolve to the lowest index.
Tensor pseudo_label_loss(Tape& tape, const Tensor& probs, double tau, const ClassWeights& weights);

// Number of rows that pseudo_label_loss would include.
std::size_t pseudo_label_count(const Tensor& probs, double tau);

// q_c = p_c^(1/T) / sum_j p_j^(1/T)
std::vector<Scalar> sharpen(std::span<const Scalar> p, double temperature);

struct MixupResult {
  std::vector<Scalar> x;
  std::vector<Scalar> y;
  double lambda;  // the applied coefficient, max(l, 1 - l) >= 0.5
};

// Draws l ~ Beta(alpha, alpha) and mixes with max(l, 1 - l), so the result is
// always at least as close to (x1, y1) as to (x2, y2).
MixupResult mixup(std::span<const Scalar> x1, std::span<const Scalar> y1,
                  std::span<const Scalar> x2, std::span<const Scalar> y2, double alpha, Rng& rng);

// Same, with the Beta draw replaced by `lambda` (still folded to max(l, 1-l)).
MixupResult mixup_with_lambda(std::span<const Scalar> x1, std::span<const Scalar> y1,
                              std::span<const Scalar> x2, std::span<const Scalar> y2,
                              double lambda);

struct MixMatchConfig {
  std::size_t k = 2;         // augmentations per unlabeled image
  double temperature = 0.5;  // sharpening temperature
  double alpha = 0.75;       // Beta(alpha, alpha) for MixUp
  std::vector<double> lambda_grid{10, 30, 75, 100, 130};
  bool augment = true;       // random translation of every image
  bool mixup = true;         // false forces the MixUp coefficient to 1
  std::size_t max_shift = 0;  // translation range in pixels; 0 = by image size

  void validate() const;
};

// Translation range used when MixMatchConfig::max_shift is 0: 2 px for 16x16
// and 32x32 inputs, 4 px for 64x64.
std::size_t default_max_shift(std::size_t image_size);

// Pad-and-crop random integer translation of each image in [N x C x H x W],
// independently per image, in [-max_shift, max_shift] along each axis.
Tensor random_translate(const Tensor& images, std::size_t max_shift, Rng& rng);

// Images with label distributions; images are [B x C x H x W], targets [B x K].
struct LabeledBatch {
  Tensor images;
  Tensor targets;
};

struct MixMatchOutput {
  LabeledBatch labeled;    // B mixed labeled examples
  LabeledBatch unlabeled;  // K * B_u mixed unlabeled examples with mixed guesses
  Tensor guesses;          // [K * B_u x C] sharpened guesses before mixing
};

// Probabilities for a batch of images without recording gradients.
using ProbabilityFn = std::function<Tensor(const Tensor& images)>;

MixMatchOutput mixmatch_transform(const ProbabilityFn& predict, const LabeledBatch& labeled,
                                  const Tensor& unlabeled_images, const MixMatchConfig& cfg,
                                  Rng& rng);

// Mean over rows of (1/C) sum_c (q_c - p_c)^2; gradients flow into probs only.
Tensor mixmatch_unlabeled_loss(Tape& tape, const Tensor& guesses, const Tensor& probs);

// weighted_ce(diagnosis) + gamma * weighted_ce(view)
Tensor multitask_loss(Tape& tape, const Tensor& diag_probs, const Tensor& diag_targets,
                      const Tensor& view_probs, const Tensor& view_targets, double gamma,
                      const ClassWeights& diag_weights, const ClassWeights& view_weights);

enum class RampMode { kDelayedRamp, kImmediateRamp, kConstant };
std::string to_string(RampMode mode);
RampMode ramp_mode_from_string(const std::string& text);

struct LambdaSchedule {
  RampMode mode = RampMode::kDelayedRamp;
  double lambda_max = 75.0;
  long delay_iters = 0;
  long ramp_iters = 1;

  void validate() const;
};

// Unlabeled loss weight at iteration t (0-based). Non-decreasing in t and
// within [0, lambda_max].
double lambda_at(long t, const LambdaSchedule& schedule);

// Row-wise argmax with ties resolved to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& probs);

// [N] class indices -> [N x classes] one-hot.
Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

}  // namespace sslecho

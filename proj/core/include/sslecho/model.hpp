#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sslecho/ops.hpp"
#include "sslecho/tensor.hpp"

namespace sslecho {

enum class Task { kView, kDiagnosis, kMultitask };
std::string to_string(Task task);
Task task_from_string(const std::string& text);

enum class Normalization { kBatchNorm, kNone };
std::string to_string(Normalization norm);
Normalization normalization_from_string(const std::string& text);

// Residual backbone family (pre-activation wide ResNet):
//   stem conv3x3 -> stages of residual blocks -> [BN] -> ReLU -> GAP -> linear head.
// Stage s > 0 halves the spatial size in its first block.
struct BackboneConfig {
  std::size_t input_size = 16;
  std::size_t channels = 1;
  std::size_t stem_width = 16;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t num_classes = 3;
  // Second 3-way head used by multitask training (0 = absent).
  std::size_t aux_classes = 0;
  Normalization normalization = Normalization::kBatchNorm;
  std::uint64_t seed = 0;

  bool operator==(const BackboneConfig&) const = default;

  // Throws ConfigError describing the first invalid field.
  void validate() const;

  static BackboneConfig desk_default();
  // WRN-28 family at 64x64 (stem 16, widths 64/128/256, 4 blocks per stage).
  static BackboneConfig wrn28_preset();
};

// Fields that must agree for backbone weights to be transferable.
std::vector<std::string> backbone_differences(const BackboneConfig& a, const BackboneConfig& b);

struct ParameterMap {
  std::map<std::string, Tensor> trainable;
  // Batchnorm running statistics; saved in checkpoints, never optimized.
  std::map<std::string, Tensor> buffers;

  std::size_t trainable_count() const;
  std::vector<Tensor> trainable_list() const;  // sorted by name
  ParameterMap clone() const;
  void zero_grad();
};

bool is_head_parameter(const std::string& name);

// Trainable tensors detached (shared storage, no gradients); buffers shared.
// Used for auxiliary passes that must not touch parameter gradients.
ParameterMap detached_view(const ParameterMap& params);

// Deterministic He-style initialization: each tensor draws from a stream
// derived from (config.seed, tensor name), so a tensor's initial value does
// not depend on which other tensors exist.
ParameterMap build_backbone(const BackboneConfig& config);

enum class ForwardMode {
  kTrain,          // batch statistics, running statistics updated
  kTrainNoUpdate,  // batch statistics, running statistics untouched
  kInference,      // running statistics; pure function of (params, batch)
};

struct ForwardOutput {
  Tensor logits;      // [B x num_classes]
  Tensor aux_logits;  // [B x aux_classes], undefined when absent
};

ForwardOutput forward(Tape& tape, const BackboneConfig& config, ParameterMap& params,
                      const Tensor& batch, ForwardMode mode);

Tensor forward_logits(Tape& tape, const BackboneConfig& config, ParameterMap& params,
                      const Tensor& batch, ForwardMode mode);

// Convenience: inference-mode class probabilities [B x C] without a tape.
Tensor predict_probs(const BackboneConfig& config, ParameterMap& params, const Tensor& batch,
                     bool aux_head = false);

struct ModelCheckpoint {
  BackboneConfig config;
  ParameterMap params;
  Task task = Task::kDiagnosis;
  int epoch = 0;
  double validation_balanced_accuracy = 0.0;
  std::string run_id;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

// Backbone (and batchnorm statistics) copied from the view checkpoint; heads
// freshly initialized from diag_config.seed.
ParameterMap warm_start_from_view(const ModelCheckpoint& view_ckpt,
                                  const BackboneConfig& diag_config);

}  // namespace sslecho

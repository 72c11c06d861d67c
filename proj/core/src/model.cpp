#include "sslecho/model.hpp"

#include <cmath>

#include "sslecho/error.hpp"
#include "sslecho/rng.hpp"

namespace sslecho {

std::string to_string(Task task) {
  switch (task) {
    case Task::kView: return "view";
    case Task::kDiagnosis: return "diagnosis";
    case Task::kMultitask: return "multitask";
  }
  return "unknown";
}

Task task_from_string(const std::string& text) {
  if (text == "view") return Task::kView;
  if (text == "diagnosis") return Task::kDiagnosis;
  if (text == "multitask") return Task::kMultitask;
  throw ConfigError("unknown task '" + text + "' (expected view|diagnosis|multitask)");
}

std::string to_string(Normalization norm) {
  return norm == Normalization::kBatchNorm ? "batchnorm" : "none";
}

Normalization normalization_from_string(const std::string& text) {
  if (text == "batchnorm") return Normalization::kBatchNorm;
  if (text == "none") return Normalization::kNone;
  throw ConfigError("unknown normalization '" + text + "' (expected batchnorm|none)");
}

void BackboneConfig::validate() const {
  if (input_size != 16 && input_size != 32 && input_size != 64) {
    throw ConfigError("unsupported input_size " + std::to_string(input_size) +
                      " (expected 16, 32 or 64)");
  }
  if (channels == 0) throw ConfigError("channels must be positive");
  if (stem_width == 0) throw ConfigError("stem_width must be positive");
  if (widths.empty()) throw ConfigError("widths must list at least one stage");
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("stage widths must be positive");
  }
  if (blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (aux_classes == 1) throw ConfigError("aux_classes must be 0 or at least 2");
  if ((input_size >> (widths.size() - 1)) == 0) {
    throw ConfigError("too many stages for input_size " + std::to_string(input_size));
  }
}

BackboneConfig BackboneConfig::desk_default() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::wrn28_preset() {
  BackboneConfig cfg;
  cfg.input_size = 64;
  cfg.stem_width = 16;
  cfg.widths = {64, 128, 256};
  cfg.blocks_per_stage = 4;
  return cfg;
}

std::vector<std::string> backbone_differences(const BackboneConfig& a, const BackboneConfig& b) {
  std::vector<std::string> diff;
  if (a.input_size != b.input_size) diff.emplace_back("input_size");
  if (a.channels != b.channels) diff.emplace_back("channels");
  if (a.stem_width != b.stem_width) diff.emplace_back("stem_width");
  if (a.widths != b.widths) diff.emplace_back("widths");
  if (a.blocks_per_stage != b.blocks_per_stage) diff.emplace_back("blocks_per_stage");
  if (a.normalization != b.normalization) diff.emplace_back("normalization");
  return diff;
}

std::size_t ParameterMap::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable) n += t.numel();
  return n;
}

std::vector<Tensor> ParameterMap::trainable_list() const {
  std::vector<Tensor> out;
  out.reserve(trainable.size());
  for (const auto& [name, t] : trainable) out.push_back(t);
  return out;
}

ParameterMap ParameterMap::clone() const {
  ParameterMap copy;
  for (const auto& [name, t] : trainable) copy.trainable.emplace(name, t.clone());
  for (const auto& [name, t] : buffers) copy.buffers.emplace(name, t.clone());
  return copy;
}

void ParameterMap::zero_grad() {
  for (auto& [name, t] : trainable) t.zero_grad();
}

ParameterMap detached_view(const ParameterMap& params) {
  ParameterMap view;
  for (const auto& [name, t] : params.trainable) view.trainable.emplace(name, t.detach());
  view.buffers = params.buffers;
  return view;
}

bool is_head_parameter(const std::string& name) {
  return name.rfind("head.", 0) == 0 || name.rfind("aux_head.", 0) == 0;
}

namespace {

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
}

bool needs_projection(std::size_t in_width, std::size_t out_width, std::size_t stride) {
  return in_width != out_width || stride != 1;
}

class Initializer {
 public:
  Initializer(const BackboneConfig& cfg, ParameterMap& params) : cfg_(cfg), params_(params) {}

  void conv(const std::string& name, std::size_t out_c, std::size_t in_c, std::size_t k) {
    Rng rng(mix_seed(cfg_.seed, hash_string(name)));
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
    std::vector<Scalar> values(out_c * in_c * k * k);
    for (Scalar& v : values) v = static_cast<Scalar>(rng.normal(0.0, stddev));
    params_.trainable.emplace(name, Tensor::from({out_c, in_c, k, k}, std::move(values), true));
  }

  void bn(const std::string& prefix, std::size_t c) {
    if (cfg_.normalization != Normalization::kBatchNorm) return;
    params_.trainable.emplace(prefix + "gamma", Tensor::full({c}, Scalar(1), true));
    params_.trainable.emplace(prefix + "beta", Tensor::zeros({c}, true));
    params_.buffers.emplace(prefix + "running_mean", Tensor::zeros({c}));
    params_.buffers.emplace(prefix + "running_var", Tensor::full({c}, Scalar(1)));
  }

  void linear(const std::string& prefix, std::size_t in_f, std::size_t out_f) {
    Rng rng(mix_seed(cfg_.seed, hash_string(prefix + "weight")));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_f));
    std::vector<Scalar> values(in_f * out_f);
    for (Scalar& v : values) v = static_cast<Scalar>(rng.uniform(-bound, bound));
    params_.trainable.emplace(prefix + "weight", Tensor::from({in_f, out_f}, std::move(values), true));
    params_.trainable.emplace(prefix + "bias", Tensor::zeros({out_f}, true));
  }

 private:
  const BackboneConfig& cfg_;
  ParameterMap& params_;
};

Tensor& lookup(std::map<std::string, Tensor>& map, const std::string& name) {
  auto it = map.find(name);
  if (it == map.end()) throw DimensionError("parameter map is missing '" + name + "'");
  return it->second;
}

ops::BatchNormMode bn_mode(ForwardMode mode) {
  switch (mode) {
    case ForwardMode::kTrain: return ops::BatchNormMode::kTrain;
    case ForwardMode::kTrainNoUpdate: return ops::BatchNormMode::kTrainNoUpdate;
    case ForwardMode::kInference: return ops::BatchNormMode::kInference;
  }
  return ops::BatchNormMode::kInference;
}

class Runner {
 public:
  Runner(Tape& tape, const BackboneConfig& cfg, ParameterMap& params, ForwardMode mode)
      : tape_(tape), cfg_(cfg), params_(params), mode_(mode) {}

  Tensor norm_relu(const Tensor& x, const std::string& prefix) {
    Tensor h = x;
    if (cfg_.normalization == Normalization::kBatchNorm) {
      h = ops::batch_norm(tape_, h, lookup(params_.trainable, prefix + "gamma"),
                          lookup(params_.trainable, prefix + "beta"),
                          lookup(params_.buffers, prefix + "running_mean"),
                          lookup(params_.buffers, prefix + "running_var"), bn_mode(mode_));
    }
    return ops::relu(tape_, h);
  }

  Tensor conv(const Tensor& x, const std::string& name, std::size_t stride, std::size_t pad) {
    return ops::conv2d(tape_, x, lookup(params_.trainable, name), stride, pad);
  }

  Tensor linear(const Tensor& x, const std::string& prefix) {
    return ops::linear(tape_, x, lookup(params_.trainable, prefix + "weight"),
                       lookup(params_.trainable, prefix + "bias"));
  }

 private:
  Tape& tape_;
  const BackboneConfig& cfg_;
  ParameterMap& params_;
  ForwardMode mode_;
};

}  // namespace

ParameterMap build_backbone(const BackboneConfig& config) {
  config.validate();
  ParameterMap params;
  Initializer init(config, params);
  init.conv("stem.conv", config.stem_width, config.channels, 3);
  std::size_t in_width = config.stem_width;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    const std::size_t width = config.widths[s];
    for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      init.bn(p + "bn1.", in_width);
      init.conv(p + "conv1", width, in_width, 3);
      init.bn(p + "bn2.", width);
      init.conv(p + "conv2", width, width, 3);
      if (needs_projection(in_width, width, stride)) init.conv(p + "shortcut", width, in_width, 1);
      in_width = width;
    }
  }
  init.bn("final_bn.", in_width);
  init.linear("head.", in_width, config.num_classes);
  if (config.aux_classes > 0) init.linear("aux_head.", in_width, config.aux_classes);
  return params;
}

ForwardOutput forward(Tape& tape, const BackboneConfig& config, ParameterMap& params,
                      const Tensor& batch, ForwardMode mode) {
  if (batch.rank() != 4 || batch.dim(1) != config.channels || batch.dim(2) != config.input_size ||
      batch.dim(3) != config.input_size) {
    throw DimensionError("forward: batch " + shape_string(batch.shape()) + " does not match [Bx" +
                         std::to_string(config.channels) + "x" + std::to_string(config.input_size) +
                         "x" + std::to_string(config.input_size) + "]");
  }
  Runner run(tape, config, params, mode);
  Tensor h = run.conv(batch, "stem.conv", 1, 1);
  std::size_t in_width = config.stem_width;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    const std::size_t width = config.widths[s];
    for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      Tensor pre = run.norm_relu(h, p + "bn1.");
      Tensor shortcut = needs_projection(in_width, width, stride) ? run.conv(pre, p + "shortcut", stride, 0) : h;
      Tensor r = run.conv(pre, p + "conv1", stride, 1);
      r = run.norm_relu(r, p + "bn2.");
      r = run.conv(r, p + "conv2", 1, 1);
      h = ops::add(tape, r, shortcut);
      in_width = width;
    }
  }
  h = run.norm_relu(h, "final_bn.");
  Tensor pooled = ops::global_avg_pool(tape, h);
  ForwardOutput out;
  out.logits = run.linear(pooled, "head.");
  if (config.aux_classes > 0) out.aux_logits = run.linear(pooled, "aux_head.");
  return out;
}

Tensor forward_logits(Tape& tape, const BackboneConfig& config, ParameterMap& params,
                      const Tensor& batch, ForwardMode mode) {
  return forward(tape, config, params, batch, mode).logits;
}

Tensor predict_probs(const BackboneConfig& config, ParameterMap& params, const Tensor& batch,
                     bool aux_head) {
  Tape tape = Tape::no_grad();
  ForwardOutput out = forward(tape, config, params, batch, ForwardMode::kInference);
  if (aux_head && !out.aux_logits.defined()) {
    throw ContractError("predict_probs: model has no auxiliary head");
  }
  return ops::softmax(tape, aux_head ? out.aux_logits : out.logits);
}

ParameterMap warm_start_from_view(const ModelCheckpoint& view_ckpt,
                                  const BackboneConfig& diag_config) {
  const auto diff = backbone_differences(view_ckpt.config, diag_config);
  if (!diff.empty()) {
    std::string fields;
    for (const auto& f : diff) fields += (fields.empty() ? "" : ", ") + f;
    throw TransferError("cannot warm-start: backbone fields differ: " + fields);
  }
  ParameterMap fresh = build_backbone(diag_config);
  for (auto& [name, tensor] : fresh.trainable) {
    if (is_head_parameter(name)) continue;
    auto it = view_ckpt.params.trainable.find(name);
    if (it == view_ckpt.params.trainable.end() || it->second.shape() != tensor.shape()) {
      throw TransferError("view checkpoint lacks compatible tensor '" + name + "'");
    }
    tensor = it->second.clone();
    tensor.set_requires_grad(true);
  }
  for (auto& [name, tensor] : fresh.buffers) {
    auto it = view_ckpt.params.buffers.find(name);
    if (it == view_ckpt.params.buffers.end() || it->second.shape() != tensor.shape()) {
      throw TransferError("view checkpoint lacks compatible buffer '" + name + "'");
    }
    tensor = it->second.clone();
  }
  return fresh;
}

}  // namespace sslecho

#include "sslecho/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "sslecho/adam.hpp"
#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "sslecho/metrics.hpp"
#include "sslecho/ops.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace sslecho {

std::string to_string(Method method) {
  switch (method) {
    case Method::kBaseline: return "baseline";
    case Method::kPseudoLabel: return "pseudo_label";
    case Method::kVat: return "vat";
    case Method::kMixMatch: return "mixmatch";
    case Method::kMixMatchAugmentOnly: return "mixmatch_augment_only";
    case Method::kMultitask: return "multitask";
  }
  return "?";
}

Method method_from_string(const std::string& text) {
  for (Method m : {Method::kBaseline, Method::kPseudoLabel, Method::kVat, Method::kMixMatch,
                   Method::kMixMatchAugmentOnly, Method::kMultitask})
    if (to_string(m) == text) return m;
  throw ConfigError("unknown method '" + text +
                    "' (expected baseline|pseudo_label|vat|mixmatch|mixmatch_augment_only|multitask)");
}

bool uses_unlabeled(Method method) {
  return method == Method::kPseudoLabel || method == Method::kVat || method == Method::kMixMatch ||
         method == Method::kMixMatchAugmentOnly;
}

bool uses_lambda(Method method) {
  return method == Method::kPseudoLabel || method == Method::kVat || method == Method::kMixMatch;
}

long RunConfig::iterations_per_epoch() const {
  const auto b = static_cast<long>(batch_labeled);
  return b > 0 ? (images_per_epoch + b - 1) / b : 0;
}

std::size_t RunConfig::effective_ensemble_k() const {
  const auto e = static_cast<std::size_t>(std::max(epochs, 1L));
  return ensemble_k > 0 ? std::min(ensemble_k, e) : std::min<std::size_t>(25, e);
}

LambdaSchedule RunConfig::lambda_schedule() const {
  if (!uses_lambda(method)) return {RampMode::kConstant, 0.0, 0, 1};
  const double ipe = static_cast<double>(iterations_per_epoch());
  const double delay = lambda_delay_epochs < 0 ? epochs / 8.0 : lambda_delay_epochs;
  const double ramp = lambda_ramp_epochs < 0 ? epochs / 2.0 : lambda_ramp_epochs;
  LambdaSchedule s;
  s.mode = lambda_mode;
  s.lambda_max = lambda_max;
  s.delay_iters = static_cast<long>(std::llround(delay * ipe));
  s.ramp_iters = std::max(1L, static_cast<long>(std::llround(ramp * ipe)));
  return s;
}

BackboneConfig RunConfig::model_config() const {
  BackboneConfig c = backbone;
  c.num_classes = 3;
  c.aux_classes = method == Method::kMultitask ? 3 : 0;
  return c;
}

void RunConfig::validate() const {
  try {
    model_config().validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("backbone: ") + e.what());
  }
  if (task == Task::kMultitask) throw ConfigError("task must be view or diagnosis (use method=multitask)");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (images_per_epoch < 1) throw ConfigError("images_per_epoch must be at least 1");
  if (batch_labeled < 1) throw ConfigError("batch_labeled must be at least 1");
  if (uses_unlabeled(method) && batch_unlabeled < 1) throw ConfigError("batch_unlabeled must be at least 1");
  if (uses_lambda(method)) {
    if (!(lambda_max >= 0.0)) throw ConfigError("lambda_max must be non-negative");
    lambda_schedule().validate();
  }
  if (method == Method::kPseudoLabel && !(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must be in (0, 1)");
  if (method == Method::kVat) {
    if (!(vat.epsilon > 0.0)) throw ConfigError("vat.epsilon must be positive");
    if (!(vat.xi > 0.0)) throw ConfigError("vat.xi must be positive");
    if (vat.power_iters < 1) throw ConfigError("vat.power_iters must be at least 1");
  }
  if (method == Method::kMixMatch || method == Method::kMixMatchAugmentOnly) mixmatch.validate();
  if (method == Method::kMultitask) {
    if (task != Task::kDiagnosis) throw ConfigError("method multitask requires task diagnosis");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
  }
  if (!warm_start.empty() && task != Task::kDiagnosis) {
    throw ConfigError("warm_start applies to the diagnosis task only");
  }
}

// --- JSON ---

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_as(const json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!j.is_number_unsigned()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!j.is_number_integer()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw ConfigError("");
    }
    return j.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("invalid value for '" + key + "': " + j.dump());
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out, const std::string& prefix = "") {
  if (j.contains(key)) out = get_as<T>(j.at(key), prefix + key);
}

json backbone_to_json(const BackboneConfig& c) {
  return {{"input_size", c.input_size},     {"channels", c.channels},
          {"stem_width", c.stem_width},     {"widths", c.widths},
          {"blocks_per_stage", c.blocks_per_stage}, {"normalization", to_string(c.normalization)},
          {"seed", c.seed}};
}

void assign_backbone(BackboneConfig& c, const json& j) {
  reject_unknown(j, {"input_size", "channels", "stem_width", "widths", "blocks_per_stage", "normalization", "seed"},
                 "backbone");
  maybe(j, "input_size", c.input_size, "backbone.");
  maybe(j, "channels", c.channels, "backbone.");
  maybe(j, "stem_width", c.stem_width, "backbone.");
  if (j.contains("widths")) {
    const json& w = j.at("widths");
    if (!w.is_array()) throw ConfigError("backbone.widths must be an array");
    c.widths.clear();
    for (const json& v : w) c.widths.push_back(get_as<std::size_t>(v, "backbone.widths"));
  }
  maybe(j, "blocks_per_stage", c.blocks_per_stage, "backbone.");
  if (j.contains("normalization")) {
    c.normalization = normalization_from_string(get_as<std::string>(j.at("normalization"), "backbone.normalization"));
  }
  maybe(j, "seed", c.seed, "backbone.");
}

json to_json(const RunConfig& c) {
  json j = {{"method", to_string(c.method)},
            {"task", to_string(c.task)},
            {"backbone", backbone_to_json(c.backbone)},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},
            {"images_per_epoch", c.images_per_epoch},
            {"batch_labeled", c.batch_labeled},
            {"warm_start", c.warm_start},
            {"ensemble_k", c.ensemble_k},
            {"seed", c.seed}};
  if (uses_unlabeled(c.method)) j["batch_unlabeled"] = c.batch_unlabeled;
  if (uses_lambda(c.method)) {
    j["lambda_mode"] = to_string(c.lambda_mode);
    j["lambda_max"] = c.lambda_max;
    j["lambda_delay_epochs"] = c.lambda_delay_epochs;
    j["lambda_ramp_epochs"] = c.lambda_ramp_epochs;
  }
  if (c.method == Method::kPseudoLabel) j["tau"] = c.tau;
  if (c.method == Method::kVat) {
    j["vat"] = {{"epsilon", c.vat.epsilon}, {"xi", c.vat.xi}, {"power_iters", c.vat.power_iters}};
    j["vat_on_labeled"] = c.vat_on_labeled;
  }
  if (c.method == Method::kMixMatch || c.method == Method::kMixMatchAugmentOnly) {
    j["mixmatch"] = {{"k", c.mixmatch.k},         {"temperature", c.mixmatch.temperature},
                     {"alpha", c.mixmatch.alpha}, {"lambda_grid", c.mixmatch.lambda_grid},
                     {"augment", c.mixmatch.augment}, {"mixup", c.mixmatch.mixup},
                     {"max_shift", c.mixmatch.max_shift}};
  }
  if (c.method == Method::kMultitask) j["gamma"] = c.gamma;
  return j;
}

void assign(RunConfig& c, const json& j) {
  reject_unknown(j,
                 {"method", "task", "backbone", "lr", "weight_decay", "epochs", "images_per_epoch", "batch_labeled",
                  "batch_unlabeled", "lambda_mode", "lambda_max", "lambda_delay_epochs", "lambda_ramp_epochs", "tau",
                  "vat", "vat_on_labeled", "mixmatch", "gamma", "warm_start", "ensemble_k", "seed"},
                 "run config");
  if (j.contains("method")) c.method = method_from_string(get_as<std::string>(j.at("method"), "method"));
  if (j.contains("task")) c.task = task_from_string(get_as<std::string>(j.at("task"), "task"));
  if (j.contains("backbone")) assign_backbone(c.backbone, j.at("backbone"));
  maybe(j, "lr", c.lr);
  maybe(j, "weight_decay", c.weight_decay);
  maybe(j, "epochs", c.epochs);
  maybe(j, "images_per_epoch", c.images_per_epoch);
  maybe(j, "batch_labeled", c.batch_labeled);
  maybe(j, "batch_unlabeled", c.batch_unlabeled);
  if (j.contains("lambda_mode")) {
    c.lambda_mode = ramp_mode_from_string(get_as<std::string>(j.at("lambda_mode"), "lambda_mode"));
  }
  maybe(j, "lambda_max", c.lambda_max);
  maybe(j, "lambda_delay_epochs", c.lambda_delay_epochs);
  maybe(j, "lambda_ramp_epochs", c.lambda_ramp_epochs);
  maybe(j, "tau", c.tau);
  if (j.contains("vat")) {
    const json& v = j.at("vat");
    reject_unknown(v, {"epsilon", "xi", "power_iters"}, "vat");
    maybe(v, "epsilon", c.vat.epsilon, "vat.");
    maybe(v, "xi", c.vat.xi, "vat.");
    maybe(v, "power_iters", c.vat.power_iters, "vat.");
  }
  maybe(j, "vat_on_labeled", c.vat_on_labeled);
  if (j.contains("mixmatch")) {
    const json& m = j.at("mixmatch");
    reject_unknown(m, {"k", "temperature", "alpha", "lambda_grid", "augment", "mixup", "max_shift"}, "mixmatch");
    maybe(m, "k", c.mixmatch.k, "mixmatch.");
    maybe(m, "temperature", c.mixmatch.temperature, "mixmatch.");
    maybe(m, "alpha", c.mixmatch.alpha, "mixmatch.");
    if (m.contains("lambda_grid")) {
      if (!m.at("lambda_grid").is_array()) throw ConfigError("mixmatch.lambda_grid must be an array");
      c.mixmatch.lambda_grid.clear();
      for (const json& v : m.at("lambda_grid")) c.mixmatch.lambda_grid.push_back(get_as<double>(v, "lambda_grid"));
    }
    maybe(m, "augment", c.mixmatch.augment, "mixmatch.");
    maybe(m, "mixup", c.mixmatch.mixup, "mixmatch.");
    maybe(m, "max_shift", c.mixmatch.max_shift, "mixmatch.");
  }
  maybe(j, "gamma", c.gamma);
  maybe(j, "warm_start", c.warm_start);
  maybe(j, "ensemble_k", c.ensemble_k);
  maybe(j, "seed", c.seed);

  // Method-specific keys are only accepted for the methods that use them.
  auto only_for = [&](const char* key, bool allowed) {
    if (j.contains(key) && !allowed) {
      throw ConfigError("key '" + std::string(key) + "' does not apply to method " + to_string(c.method));
    }
  };
  for (const char* k : {"lambda_mode", "lambda_max", "lambda_delay_epochs", "lambda_ramp_epochs"})
    only_for(k, uses_lambda(c.method));
  only_for("batch_unlabeled", uses_unlabeled(c.method));
  only_for("tau", c.method == Method::kPseudoLabel);
  only_for("vat", c.method == Method::kVat);
  only_for("vat_on_labeled", c.method == Method::kVat);
  only_for("mixmatch", c.method == Method::kMixMatch || c.method == Method::kMixMatchAugmentOnly);
  only_for("gamma", c.method == Method::kMultitask);
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2); }

RunConfig run_config_from_json(const std::string& text) {
  RunConfig c;
  assign(c, parse_json(text));
  return c;
}

RunConfig apply_run_config_json(const RunConfig& cfg, const std::string& text) {
  RunConfig c = cfg;
  assign(c, parse_json(text));
  return c;
}

// --- Run log ---

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
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

}  // namespace

void write_run_log_csv(const RunLog& log, const std::string& path) {
  std::string text = "epoch,labeled_loss,unlabeled_loss,lambda,val_balanced_accuracy,checkpoint_path\n";
  for (const EpochRecord& r : log.epochs) {
    text += std::to_string(r.epoch) + "," + fmt(r.labeled_loss) + "," + fmt(r.unlabeled_loss) + "," +
            fmt(r.lambda) + "," + fmt(r.val_balanced_accuracy) + "," + r.checkpoint_path + "\n";
  }
  write_text(path, text);
}

// --- Training ---

namespace {

ClassWeights weights_for(const Dataset& dataset, const std::vector<std::size_t>& images, Task task) {
  std::vector<long> counts(3, 0);
  for (std::size_t i : images) ++counts.at(*dataset.label(i, task));
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw ConfigError("training split has no " + to_string(task) + " examples of class " + std::to_string(c));
    }
  }
  return class_weights(counts);
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<Scalar> values(a.data().begin(), a.data().end());
  values.insert(values.end(), b.data().begin(), b.data().end());
  return Tensor::from(shape, std::move(values));
}

std::vector<std::size_t> labels_of(const Dataset& dataset, const std::vector<std::size_t>& images, Task task) {
  std::vector<std::size_t> out;
  out.reserve(images.size());
  for (std::size_t i : images) {
    const auto l = dataset.label(i, task);
    if (!l) {
      const ImageRecord& img = dataset.images()[i];
      throw ConfigError("image " + img.study_id + "/" + img.image_id + " has no " + to_string(task) + " label");
    }
    out.push_back(*l);
  }
  return out;
}

double score(const Tensor& probs, std::span<const std::size_t> labels) {
  const auto pred = argmax_rows(probs);
  return balanced_accuracy(labels, pred);
}

}  // namespace

Tensor predict_images(const ModelCheckpoint& ckpt, const Dataset& dataset, std::span<const std::size_t> images) {
  constexpr std::size_t kChunk = 256;
  ParameterMap params = ckpt.params;
  const std::size_t classes = ckpt.config.num_classes;
  std::vector<Scalar> values;
  values.reserve(images.size() * classes);
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
    const Tensor p = predict_probs(ckpt.config, params, dataset.batch(chunk));
    values.insert(values.end(), p.data().begin(), p.data().end());
  }
  return Tensor::from({images.size(), classes}, std::move(values));
}

RunResult run_training(const RunConfig& cfg, const Dataset& dataset, const SplitSpec& split,
                       const TrainOptions& options) {
  cfg.validate();
  split.validate();
  if (dataset.image_size() != cfg.backbone.input_size) {
    throw ConfigError("dataset images are " + std::to_string(dataset.image_size()) + "px but backbone expects " +
                      std::to_string(cfg.backbone.input_size) + "px");
  }
  const BackboneConfig mc = cfg.model_config();
  const Task label_task = cfg.task;
  const Task sampler_task = cfg.method == Method::kMultitask ? Task::kMultitask : cfg.task;
  const Task ckpt_task = sampler_task;

  RunResult result;
  result.config = cfg;

  ParameterMap params;
  std::optional<ModelCheckpoint> loaded;
  const ModelCheckpoint* warm = options.warm_start;
  if (warm == nullptr && !cfg.warm_start.empty()) {
    loaded = load_checkpoint(cfg.warm_start);
    warm = &*loaded;
  }
  if (warm != nullptr) {
    if (warm->task != Task::kView) throw TransferError("warm-start checkpoint was not trained on the view task");
    params = warm_start_from_view(*warm, mc);
  } else {
    params = build_backbone(mc);
  }

  const Rng root(cfg.seed);
  MinibatchSampler sampler(dataset, split, sampler_task, root.split("sampler"), uses_unlabeled(cfg.method));
  if (uses_unlabeled(cfg.method) && sampler.unlabeled_pool_size() == 0) {
    throw ConfigError("method " + to_string(cfg.method) + " needs a non-empty unlabeled pool");
  }
  const std::vector<std::size_t> train_images = partition_images(dataset, split, Partition::kTrain);
  const ClassWeights weights = weights_for(dataset, train_images, label_task);
  const ClassWeights view_weights =
      cfg.method == Method::kMultitask ? weights_for(dataset, train_images, Task::kView) : ClassWeights::uniform(3);

  result.val_images = partition_images(dataset, split, Partition::kValid);
  if (result.val_images.empty()) throw ConfigError("validation partition is empty");
  result.val_labels = labels_of(dataset, result.val_images, label_task);

  std::vector<Tensor> plist = params.trainable_list();
  AdamState adam = make_adam(plist, cfg.lr, cfg.weight_decay);
  const LambdaSchedule schedule = cfg.lambda_schedule();
  const long ipe = cfg.iterations_per_epoch();

  fs::path out_dir;
  if (!options.out_dir.empty()) {
    out_dir = options.out_dir;
    json config_doc = {{"run", to_json(cfg)}, {"run_id", options.run_id}};
    if (!options.dataset_info.empty()) config_doc["dataset"] = parse_json(options.dataset_info);
    write_text(out_dir / "config.json", config_doc.dump(2) + "\n");
  }

  auto forward_train = [&](Tape& tape, const Tensor& x) {
    return forward_logits(tape, mc, params, x, ForwardMode::kTrain);
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double labeled_sum = 0.0, unlabeled_sum = 0.0;
    long unlabeled_n = 0;
    double lambda = 0.0;
    for (long it = 0; it < ipe; ++it) {
      const long t = (epoch - 1) * ipe + it;
      lambda = lambda_at(t, schedule);
      result.log.lambda_trace.push_back(lambda);
      params.zero_grad();
      Tape tape;
      LabeledMinibatch lb = sampler.next_labeled(cfg.batch_labeled);
      const Tensor targets = one_hot(lb.labels, 3);
      Tensor loss_l, loss_u;

      switch (cfg.method) {
        case Method::kBaseline:
        case Method::kPseudoLabel:
        case Method::kVat: {
          loss_l = weighted_cross_entropy(tape, ops::softmax(tape, forward_train(tape, lb.images)), targets, weights);
          if (lambda > 0.0 && cfg.method == Method::kPseudoLabel) {
            const Tensor u = sampler.next_unlabeled(cfg.batch_unlabeled).images;
            loss_u = pseudo_label_loss(tape, ops::softmax(tape, forward_train(tape, u)), cfg.tau, weights);
          } else if (lambda > 0.0 && cfg.method == Method::kVat) {
            const Tensor u = sampler.next_unlabeled(cfg.batch_unlabeled).images;
            const Tensor x = cfg.vat_on_labeled ? concat_batch(lb.images, u) : u;
            ParameterMap frozen = detached_view(params);
            const LogitFn search = [&](Tape& tp, const Tensor& in) {
              return forward_logits(tp, mc, frozen, in, ForwardMode::kTrainNoUpdate);
            };
            const LogitFn live = [&](Tape& tp, const Tensor& in) {
              return forward_logits(tp, mc, params, in, ForwardMode::kTrainNoUpdate);
            };
            Rng vat_rng = root.split("vat").split(static_cast<std::uint64_t>(t));
            const Tensor delta = vat_perturbation(search, x, cfg.vat, vat_rng);
            loss_u = vat_loss(tape, live, x, delta);
          }
          break;
        }
        case Method::kMixMatch:
        case Method::kMixMatchAugmentOnly: {
          const Tensor u = sampler.next_unlabeled(cfg.batch_unlabeled).images;
          ParameterMap frozen = detached_view(params);
          const ProbabilityFn guess = [&](const Tensor& in) {
            Tape nt = Tape::no_grad();
            return ops::softmax(nt, forward_logits(nt, mc, frozen, in, ForwardMode::kTrainNoUpdate));
          };
          Rng mm_rng = root.split("mixmatch").split(static_cast<std::uint64_t>(t));
          const MixMatchOutput mm = mixmatch_transform(guess, {lb.images, targets}, u, cfg.mixmatch, mm_rng);
          loss_l = weighted_cross_entropy(tape, ops::softmax(tape, forward_train(tape, mm.labeled.images)),
                                          mm.labeled.targets, weights);
          if (lambda > 0.0 && cfg.method == Method::kMixMatch) {
            const Tensor pu = ops::softmax(tape, forward_train(tape, mm.unlabeled.images));
            loss_u = mixmatch_unlabeled_loss(tape, mm.unlabeled.targets, pu);
          }
          break;
        }
        case Method::kMultitask: {
          const ForwardOutput out = forward(tape, mc, params, lb.images, ForwardMode::kTrain);
          loss_l = multitask_loss(tape, ops::softmax(tape, out.logits), targets, ops::softmax(tape, out.aux_logits),
                                  one_hot(lb.view_labels, 3), cfg.gamma, weights, view_weights);
          break;
        }
      }

      Tensor total = loss_l;
      if (loss_u.defined()) total = ops::add(tape, loss_l, ops::scale(tape, loss_u, static_cast<Scalar>(lambda)));
      const std::string where = " at epoch " + std::to_string(epoch) + ", iteration " + std::to_string(it);
      if (total.has_non_finite()) throw DivergenceError("non-finite loss" + where);
      tape.backward(total);
      try {
        adam_step(plist, adam);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + where);
      }
      labeled_sum += static_cast<double>(loss_l.item());
      if (loss_u.defined()) {
        unlabeled_sum += static_cast<double>(loss_u.item());
        ++unlabeled_n;
      }
    }

    ModelCheckpoint ckpt{mc, params.clone(), ckpt_task, epoch, 0.0, options.run_id};
    const Tensor val = predict_images(ckpt, dataset, result.val_images);
    ckpt.validation_balanced_accuracy = score(val, result.val_labels);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.labeled_loss = labeled_sum / static_cast<double>(ipe);
    rec.unlabeled_loss = unlabeled_n > 0 ? unlabeled_sum / static_cast<double>(unlabeled_n) : 0.0;
    rec.lambda = lambda;
    rec.val_balanced_accuracy = ckpt.validation_balanced_accuracy;
    if (!out_dir.empty()) {
      const fs::path path = out_dir / ("ckpt_epoch" + std::to_string(epoch));
      save_checkpoint(ckpt, path.string());
      rec.checkpoint_path = path.string();
      result.checkpoint_paths.push_back(path.string());
    }
    log::info(options.run_id + " epoch " + std::to_string(epoch) + ": labeled loss " + fmt(rec.labeled_loss) +
              ", val balanced accuracy " + fmt(rec.val_balanced_accuracy));
    result.log.epochs.push_back(rec);
    result.val_probs.push_back(val);
    if (options.keep_checkpoints) result.checkpoints.push_back(std::move(ckpt));
    if (!out_dir.empty()) write_run_log_csv(result.log, (out_dir / "log.csv").string());
  }
  return result;
}

// --- Ensembling ---

EnsembleSelection ensemble_select(const std::vector<Tensor>& val_probs, std::span<const std::size_t> val_labels,
                                  std::size_t k) {
  if (val_probs.empty()) throw ContractError("ensemble_select: no checkpoints");
  if (k == 0) throw ContractError("ensemble_select: k must be at least 1");
  const Shape& shape = val_probs.front().shape();
  for (const Tensor& p : val_probs)
    if (p.shape() != shape) throw DimensionError("ensemble_select: member prediction shapes differ");
  if (shape.at(0) != val_labels.size()) throw DimensionError("ensemble_select: label count mismatch");

  EnsembleSelection sel;
  sel.best_single = -1.0;
  for (const Tensor& p : val_probs) sel.best_single = std::max(sel.best_single, score(p, val_labels));

  const std::size_t n = val_probs.front().numel();
  std::vector<double> sum(n, 0.0);
  double current = -1.0;
  for (std::size_t step = 0; step < k; ++step) {
    std::size_t best_m = val_probs.size();
    double best = current;
    const double size = static_cast<double>(sel.bag.size() + 1);
    for (std::size_t m = 0; m < val_probs.size(); ++m) {
      const auto d = val_probs[m].data();
      std::vector<Scalar> avg(n);
      for (std::size_t i = 0; i < n; ++i) avg[i] = static_cast<Scalar>((sum[i] + d[i]) / size);
      const double s = score(Tensor::from(shape, std::move(avg)), val_labels);
      if (s > best) {
        best = s;
        best_m = m;
      }
    }
    if (best_m == val_probs.size()) break;
    const auto d = val_probs[best_m].data();
    for (std::size_t i = 0; i < n; ++i) sum[i] += d[i];
    sel.bag.push_back(best_m);
    sel.scores.push_back(best);
    current = best;
  }
  return sel;
}

Tensor ensemble_average(const std::vector<Tensor>& member_probs, const std::vector<std::size_t>& bag) {
  if (bag.empty()) throw ContractError("ensemble_average: empty bag");
  const Tensor& first = member_probs.at(bag.front());
  std::vector<double> sum(first.numel(), 0.0);
  for (std::size_t m : bag) {
    const Tensor& p = member_probs.at(m);
    if (p.shape() != first.shape()) throw DimensionError("ensemble_average: member prediction shapes differ");
    const auto d = p.data();
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += d[i];
  }
  std::vector<Scalar> out(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) out[i] = static_cast<Scalar>(sum[i] / static_cast<double>(bag.size()));
  return Tensor::from(first.shape(), std::move(out));
}

EnsemblePrediction ensemble_predict(const std::vector<ModelCheckpoint>& checkpoints,
                                    const std::vector<Tensor>& val_probs, std::span<const std::size_t> val_labels,
                                    const Dataset& dataset, std::span<const std::size_t> images, std::size_t k) {
  if (checkpoints.empty()) throw ContractError("ensemble_predict: empty checkpoint list");
  if (checkpoints.size() != val_probs.size()) {
    throw DimensionError("ensemble_predict: one validation prediction per checkpoint required");
  }
  const std::size_t first = checkpoints.size() - std::min(k, checkpoints.size());
  const std::vector<Tensor> window(val_probs.begin() + static_cast<std::ptrdiff_t>(first), val_probs.end());
  EnsembleSelection sel = ensemble_select(window, val_labels, std::max<std::size_t>(k, 1));
  std::vector<Tensor> member(window.size());
  for (std::size_t m : sel.bag)
    if (!member[m].defined()) member[m] = predict_images(checkpoints[first + m], dataset, images);
  Tensor probs = ensemble_average(member, sel.bag);
  for (std::size_t& m : sel.bag) m += first;
  return {std::move(sel), std::move(probs)};
}

// --- Grid search ---

std::vector<RunConfig> expand_grid(const RunConfig& base, const Grid& grid) {
  if (grid.empty()) return {base};
  std::vector<std::pair<std::string, std::vector<json>>> axes;
  for (const auto& [key, values] : grid) {
    if (values.empty()) throw ConfigError("grid key '" + key + "' has no values");
    std::vector<json> parsed;
    for (const std::string& v : values) parsed.push_back(parse_json(v));
    axes.emplace_back(key, std::move(parsed));
  }
  std::vector<RunConfig> out;
  std::vector<std::size_t> idx(axes.size(), 0);
  while (true) {
    json patch = json::object();
    for (std::size_t a = 0; a < axes.size(); ++a) {
      // "vat.epsilon" addresses a nested field.
      json* node = &patch;
      std::string key = axes[a].first;
      for (std::size_t dot; (dot = key.find('.')) != std::string::npos; key = key.substr(dot + 1)) {
        node = &(*node)[key.substr(0, dot)];
      }
      (*node)[key] = axes[a].second[idx[a]];
    }
    RunConfig cell = base;
    assign(cell, patch);
    out.push_back(std::move(cell));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < axes[a].second.size()) break;
      idx[a] = 0;
      if (a == 0) return out;
    }
  }
}

GridResult grid_search(const RunConfig& base, const Grid& grid, const Dataset& dataset, const SplitSpec& split,
                       const std::string& out_dir, std::size_t jobs, const std::string& dataset_info) {
  std::vector<RunConfig> configs = expand_grid(base, grid);
  GridResult result;
  result.cells.resize(configs.size());
  for (std::size_t i = 0; i < configs.size(); ++i) {
    configs[i].seed = mix_seed(base.seed, i);
    configs[i].validate();
    result.cells[i].config = configs[i];
  }

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      GridCell& cell = result.cells[i];
      TrainOptions opt;
      opt.run_id = "cell" + std::to_string(i);
      opt.keep_checkpoints = false;
      opt.dataset_info = dataset_info;
      if (!out_dir.empty()) opt.out_dir = (fs::path(out_dir) / opt.run_id).string();
      try {
        RunResult run = run_training(configs[i], dataset, split, opt);
        const std::size_t k = configs[i].effective_ensemble_k();
        const std::vector<Tensor> window(run.val_probs.end() - static_cast<std::ptrdiff_t>(k), run.val_probs.end());
        cell.ensemble_val_balanced_accuracy = ensemble_select(window, run.val_labels, k).score();
        cell.log = std::move(run.log);
      } catch (const DivergenceError& e) {
        cell.failed = true;
        cell.error = e.what();
        log::warning("grid cell " + std::to_string(i) + " failed: " + e.what());
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, configs.size()));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (std::thread& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);

  bool any = false;
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    const GridCell& c = result.cells[i];
    if (c.failed) continue;
    if (!any || c.ensemble_val_balanced_accuracy > result.cells[result.best].ensemble_val_balanced_accuracy) {
      result.best = i;
      any = true;
    }
  }
  if (!any) throw DivergenceError("every grid cell diverged");
  return result;
}

}  // namespace sslecho

#include <gtest/gtest.h>

#include "sslecho/error.hpp"
#include "sslecho/model.hpp"
#include "sslecho/objectives.hpp"
#include "test_util.hpp"

using namespace sslecho;
using sslecho::testing::TempDir;

namespace {

// Parameter count of the pre-activation residual family, summed from layer
// shapes: 3x3 convolutions without bias, two batchnorm vectors per norm
// layer, 1x1 projections where width or stride changes, linear head.
std::size_t expected_parameter_count(const BackboneConfig& c) {
  std::size_t n = 9 * c.channels * c.stem_width;
  std::size_t in = c.stem_width;
  for (std::size_t s = 0; s < c.widths.size(); ++s) {
    const std::size_t w = c.widths[s];
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
      const bool strided = s > 0 && b == 0;
      n += 2 * in + 9 * in * w + 2 * w + 9 * w * w;
      if (in != w || strided) n += in * w;
      in = w;
    }
  }
  n += 2 * in;
  n += in * c.num_classes + c.num_classes;
  if (c.aux_classes > 0) n += in * c.aux_classes + c.aux_classes;
  return n;
}

BackboneConfig tiny(std::uint64_t seed = 1) {
  BackboneConfig c;
  c.stem_width = 4;
  c.widths = {4, 8};
  c.blocks_per_stage = 1;
  c.seed = seed;
  return c;
}

bool same_bytes(const ParameterMap& a, const ParameterMap& b) {
  if (a.trainable.size() != b.trainable.size() || a.buffers.size() != b.buffers.size()) return false;
  for (const auto* maps : {&a.trainable, &a.buffers}) {
    const auto& other = maps == &a.trainable ? b.trainable : b.buffers;
    for (const auto& [name, t] : *maps) {
      auto it = other.find(name);
      if (it == other.end() || it->second.shape() != t.shape()) return false;
      if (!std::equal(t.data().begin(), t.data().end(), it->second.data().begin())) return false;
    }
  }
  return true;
}

}  // namespace

TEST(Backbone, DeskDefaultParameterCountMatchesFormula) {
  const BackboneConfig c = BackboneConfig::desk_default();
  const ParameterMap p = build_backbone(c);
  EXPECT_EQ(p.trainable_count(), expected_parameter_count(c));
  EXPECT_EQ(p.trainable_count(), 174323u);
}

TEST(Backbone, OtherConfigurationsMatchFormula) {
  BackboneConfig c = tiny();
  c.aux_classes = 3;
  EXPECT_EQ(build_backbone(c).trainable_count(), expected_parameter_count(c));
  const BackboneConfig wrn = BackboneConfig::wrn28_preset();
  EXPECT_EQ(build_backbone(wrn).trainable_count(), expected_parameter_count(wrn));
}

TEST(Backbone, SameSeedGivesIdenticalBytes) {
  EXPECT_TRUE(same_bytes(build_backbone(tiny(5)), build_backbone(tiny(5))));
  EXPECT_FALSE(same_bytes(build_backbone(tiny(5)), build_backbone(tiny(6))));
}

TEST(Backbone, UnsupportedInputSizeIsConfigError) {
  BackboneConfig c = tiny();
  c.input_size = 20;
  EXPECT_THROW(build_backbone(c), ConfigError);
}

TEST(Forward, HeadWidthAndIdenticalRows) {
  BackboneConfig c = tiny();
  ParameterMap p = build_backbone(c);
  Rng rng(2);
  const Tensor one = sslecho::testing::random_tensor({1, 1, 16, 16}, rng);
  std::vector<Scalar> rep;
  for (int i = 0; i < 4; ++i) rep.insert(rep.end(), one.data().begin(), one.data().end());
  Tape tape = Tape::no_grad();
  const Tensor logits = forward_logits(tape, c, p, Tensor::from({4, 1, 16, 16}, rep), ForwardMode::kInference);
  ASSERT_EQ(logits.shape(), (Shape{4, 3}));
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(logits.at(r * 3 + k), logits.at(k));
}

TEST(Forward, ZeroHeadGivesUniformProbabilities) {
  BackboneConfig c = tiny();
  ParameterMap p = build_backbone(c);
  for (Scalar& v : p.trainable.at("head.weight").mutable_data()) v = 0;
  Rng rng(3);
  const Tensor probs = predict_probs(c, p, sslecho::testing::random_tensor({2, 1, 16, 16}, rng));
  for (Scalar v : probs.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Forward, WrongInputShapeIsDimensionError) {
  BackboneConfig c = tiny();
  ParameterMap p = build_backbone(c);
  Tape tape = Tape::no_grad();
  EXPECT_THROW(forward_logits(tape, c, p, Tensor::zeros({2, 1, 8, 8}), ForwardMode::kInference), DimensionError);
}

TEST(Forward, InferenceLeavesBuffersAndTrainModeUpdatesThem) {
  BackboneConfig c = tiny();
  ParameterMap p = build_backbone(c);
  Rng rng(4);
  const Tensor x = sslecho::testing::random_tensor({3, 1, 16, 16}, rng);
  const ParameterMap before = p.clone();
  Tape t1 = Tape::no_grad();
  forward_logits(t1, c, p, x, ForwardMode::kInference);
  forward_logits(t1, c, p, x, ForwardMode::kTrainNoUpdate);
  EXPECT_TRUE(same_bytes(before, p));
  forward_logits(t1, c, p, x, ForwardMode::kTrain);
  EXPECT_FALSE(same_bytes(before, p));
}

TEST(Forward, CrossEntropyGradientMatchesFiniteDifferences) {
  BackboneConfig c = tiny(9);
  ParameterMap p = build_backbone(c);
  Rng rng(5);
  const Tensor x = sslecho::testing::random_tensor({2, 1, 16, 16}, rng);
  const std::vector<std::size_t> labels{0, 2};
  const Tensor targets = one_hot(labels, 3);
  auto loss = [&](Tape& tape) {
    Tensor probs = ops::softmax(tape, forward_logits(tape, c, p, x, ForwardMode::kTrainNoUpdate));
    return weighted_cross_entropy(tape, probs, targets, ClassWeights::uniform(3));
  };
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto f = [&]() {
    Tape tape = Tape::no_grad();
    return static_cast<double>(loss(tape).item());
  };
  for (const char* name : {"head.weight", "stage1.block0.conv2", "stem.conv"}) {
    Tensor& t = p.trainable.at(name);
    const std::vector<std::size_t> entries{0, t.numel() / 2, t.numel() - 1};
    const auto numeric = sslecho::testing::numeric_gradient(t, f, 1e-5, entries);
    for (std::size_t e = 0; e < entries.size(); ++e) {
      EXPECT_LT(sslecho::testing::relative_error(t.grad()[entries[e]], numeric[e]), 1e-4) << name;
    }
  }
}

TEST(DetachedView, SharesValuesButCollectsNoGradients) {
  BackboneConfig c = tiny();
  ParameterMap p = build_backbone(c);
  ParameterMap view = detached_view(p);
  Rng rng(6);
  Tape tape;
  Tensor x = sslecho::testing::random_tensor({2, 1, 16, 16}, rng, 1.0, true);
  tape.backward(ops::sum(tape, forward_logits(tape, c, view, x, ForwardMode::kTrainNoUpdate)));
  for (const auto& [name, t] : p.trainable) EXPECT_FALSE(t.has_grad()) << name;
  EXPECT_TRUE(x.has_grad());
}

TEST(Checkpoint, RoundTripIsBitIdenticalWithMetadata) {
  TempDir dir("ckpt");
  ModelCheckpoint ck{tiny(3), build_backbone(tiny(3)), Task::kView, 7, 0.8125, "runA"};
  Tape tape = Tape::no_grad();
  Rng rng(7);
  forward_logits(tape, ck.config, ck.params, sslecho::testing::random_tensor({4, 1, 16, 16}, rng), ForwardMode::kTrain);
  save_checkpoint(ck, dir.sub("a.ckpt"));
  const ModelCheckpoint back = load_checkpoint(dir.sub("a.ckpt"));
  EXPECT_TRUE(same_bytes(ck.params, back.params));
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.task, Task::kView);
  EXPECT_EQ(back.epoch, 7);
  EXPECT_EQ(back.validation_balanced_accuracy, 0.8125);
  EXPECT_EQ(back.run_id, "runA");
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
}

TEST(Checkpoint, TruncationIsParseErrorWithOffset) {
  const std::string bytes = serialize_checkpoint({tiny(), build_backbone(tiny()), Task::kDiagnosis, 1, 0.5, "r"});
  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      deserialize_checkpoint(bytes.substr(0, cut));
      FAIL() << "truncated at " << cut << " decoded";
    } catch (const ParseError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
}

TEST(Checkpoint, VersionMismatchIsExplicit) {
  std::string bytes = serialize_checkpoint({tiny(), build_backbone(tiny()), Task::kDiagnosis, 1, 0.5, "r"});
  bytes[8] = static_cast<char>(kCheckpointVersion + 1);  // u32 version follows the 8-byte magic
  EXPECT_THROW(deserialize_checkpoint(bytes), VersionError);
  bytes[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bytes), ParseError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/ckpt"), IoError);
}

TEST(WarmStart, BackboneCopiedAndHeadsFresh) {
  const BackboneConfig view_cfg = tiny(11);
  ModelCheckpoint view{view_cfg, build_backbone(view_cfg), Task::kView, 3, 0.9, "v"};
  for (auto& [name, t] : view.params.trainable)
    for (Scalar& v : t.mutable_data()) v += 0.25;  // distinguish from any fresh init
  BackboneConfig diag_cfg = view_cfg;
  diag_cfg.seed = 12;
  const ParameterMap warm = warm_start_from_view(view, diag_cfg);
  const ParameterMap fresh = build_backbone(diag_cfg);
  for (const auto& [name, t] : warm.trainable) {
    const Tensor& expected = is_head_parameter(name) ? fresh.trainable.at(name) : view.params.trainable.at(name);
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), expected.data().begin())) << name;
    EXPECT_TRUE(t.requires_grad()) << name;
  }
  for (const auto& [name, t] : warm.buffers) {
    const Tensor& src = view.params.buffers.at(name);
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), src.data().begin())) << name;
  }
}

TEST(WarmStart, WidthMismatchListsFields) {
  const BackboneConfig view_cfg = tiny();
  ModelCheckpoint view{view_cfg, build_backbone(view_cfg), Task::kView, 1, 0.5, "v"};
  BackboneConfig diag_cfg = view_cfg;
  diag_cfg.widths = {4, 16};
  try {
    warm_start_from_view(view, diag_cfg);
    FAIL() << "expected TransferError";
  } catch (const TransferError& e) {
    EXPECT_NE(std::string(e.what()).find("widths"), std::string::npos) << e.what();
  }
}

#include <gtest/gtest.h>

#include <filesystem>

#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "sslecho/trainer.hpp"
#include "test_util.hpp"

using namespace sslecho;
using sslecho::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const SynthResult& small_synth() {
  static const SynthResult s = [] {
    SynthConfig cfg;
    cfg.n_labeled_patients = 27;
    cfg.n_unlabeled_patients = 6;
    cfg.images_per_patient = {4, 8};
    cfg.seed = 31;
    return synth_generate(cfg);
  }();
  return s;
}

RunConfig tiny_run(Method method = Method::kBaseline) {
  log::set_level(log::Level::kError);
  RunConfig cfg;
  cfg.method = method;
  cfg.backbone.stem_width = 4;
  cfg.backbone.widths = {4, 8};
  cfg.backbone.blocks_per_stage = 1;
  cfg.epochs = 2;
  cfg.images_per_epoch = 64;
  cfg.batch_labeled = 16;
  cfg.batch_unlabeled = 16;
  cfg.seed = 4;
  return cfg;
}

bool same_params(const ParameterMap& a, const ParameterMap& b) {
  for (const auto& [name, t] : a.trainable) {
    const Tensor& u = b.trainable.at(name);
    if (!std::equal(t.data().begin(), t.data().end(), u.data().begin())) return false;
  }
  for (const auto& [name, t] : a.buffers) {
    const Tensor& u = b.buffers.at(name);
    if (!std::equal(t.data().begin(), t.data().end(), u.data().begin())) return false;
  }
  return true;
}

Tensor probs(std::vector<Scalar> v) {
  const std::size_t rows = v.size() / 3;
  return Tensor::from({rows, 3}, std::move(v));
}

}  // namespace

TEST(Training, MixMatchWithoutUnlabeledTermAugmentOrMixupIsBaseline) {
  const auto& s = small_synth();
  RunConfig mm = tiny_run(Method::kMixMatch);
  mm.lambda_max = 0.0;
  mm.mixmatch.augment = false;
  mm.mixmatch.mixup = false;
  const RunResult a = run_training(tiny_run(), s.dataset, s.split);
  const RunResult b = run_training(mm, s.dataset, s.split);
  ASSERT_EQ(a.checkpoints.size(), b.checkpoints.size());
  for (std::size_t e = 0; e < a.checkpoints.size(); ++e) {
    EXPECT_TRUE(same_params(a.checkpoints[e].params, b.checkpoints[e].params)) << "epoch " << e + 1;
    EXPECT_EQ(a.log.epochs[e].labeled_loss, b.log.epochs[e].labeled_loss);
  }
}

TEST(Training, SameSeedIsBitIdenticalAndWritesOneCheckpointPerEpoch) {
  const auto& s = small_synth();
  TempDir dir("train");
  RunConfig cfg = tiny_run();
  cfg.epochs = 1;
  TrainOptions opts;
  opts.out_dir = dir.str();
  const RunResult a = run_training(cfg, s.dataset, s.split, opts);
  const RunResult b = run_training(cfg, s.dataset, s.split);
  ASSERT_EQ(a.checkpoints.size(), 1u);
  ASSERT_EQ(a.log.epochs.size(), 1u);
  EXPECT_TRUE(same_params(a.checkpoints[0].params, b.checkpoints[0].params));
  EXPECT_TRUE(fs::exists(dir.path() / "ckpt_epoch1"));
  EXPECT_TRUE(fs::exists(dir.path() / "config.json"));
  const std::string log_csv = sslecho::testing::read_file(dir.sub("log.csv"));
  EXPECT_EQ(std::count(log_csv.begin(), log_csv.end(), '\n'), 2);
  const ModelCheckpoint back = load_checkpoint(a.checkpoint_paths[0]);
  EXPECT_TRUE(same_params(back.params, a.checkpoints[0].params));
  EXPECT_EQ(back.validation_balanced_accuracy, a.log.epochs[0].val_balanced_accuracy);
}

TEST(Training, LambdaTraceFollowsSchedule) {
  const auto& s = small_synth();
  RunConfig cfg = tiny_run(Method::kPseudoLabel);
  cfg.epochs = 4;
  cfg.lambda_max = 2.0;
  cfg.lambda_delay_epochs = 1;
  cfg.lambda_ramp_epochs = 2;
  const RunResult r = run_training(cfg, s.dataset, s.split);
  const long ipe = cfg.iterations_per_epoch();
  ASSERT_EQ(r.log.lambda_trace.size(), static_cast<std::size_t>(4 * ipe));
  const LambdaSchedule sched = cfg.lambda_schedule();
  EXPECT_EQ(sched.delay_iters, ipe);
  EXPECT_EQ(sched.ramp_iters, 2 * ipe);
  for (long t = 0; t < 4 * ipe; ++t) EXPECT_EQ(r.log.lambda_trace[t], lambda_at(t, sched));
  EXPECT_EQ(r.log.lambda_trace.front(), 0.0);
  EXPECT_EQ(r.log.lambda_trace.back(), 2.0);
  EXPECT_EQ(r.log.epochs[0].unlabeled_loss, 0.0);
}

TEST(Training, DerivedScheduleAndBaselineZeroLambda) {
  RunConfig cfg = tiny_run(Method::kMixMatch);
  cfg.epochs = 32;
  const LambdaSchedule s = cfg.lambda_schedule();
  EXPECT_EQ(s.delay_iters, 4 * cfg.iterations_per_epoch());
  EXPECT_EQ(s.ramp_iters, 16 * cfg.iterations_per_epoch());
  const LambdaSchedule none = tiny_run().lambda_schedule();
  for (long t : {0L, 100L, 100000L}) EXPECT_EQ(lambda_at(t, none), 0.0);
}

TEST(Training, EveryMethodRunsOneEpoch) {
  const auto& s = small_synth();
  for (Method m : {Method::kPseudoLabel, Method::kVat, Method::kMixMatchAugmentOnly, Method::kMultitask}) {
    RunConfig cfg = tiny_run(m);
    cfg.epochs = 1;
    cfg.lambda_mode = RampMode::kConstant;
    cfg.lambda_max = 1.0;
    if (m == Method::kMultitask) cfg.task = Task::kDiagnosis;
    const RunResult r = run_training(cfg, s.dataset, s.split);
    ASSERT_EQ(r.log.epochs.size(), 1u) << to_string(m);
    EXPECT_TRUE(std::isfinite(r.log.epochs[0].labeled_loss)) << to_string(m);
    EXPECT_EQ(r.checkpoints[0].task, m == Method::kMultitask ? Task::kMultitask : Task::kView);
  }
}

TEST(Training, HugeLearningRateIsDivergenceError) {
  const auto& s = small_synth();
  RunConfig cfg = tiny_run();
  cfg.lr = 1e300;
  try {
    run_training(cfg, s.dataset, s.split);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}

TEST(Training, MissingUnlabeledPoolIsConfigError) {
  SynthConfig sc;
  sc.n_labeled_patients = 27;
  sc.n_unlabeled_patients = 0;
  const SynthResult s = synth_generate(sc);
  EXPECT_THROW(run_training(tiny_run(Method::kMixMatch), s.dataset, s.split), ConfigError);
}

TEST(Ensemble, IdenticalMembersEqualTheSingleModel) {
  const Tensor p = probs({0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.2, 0.2, 0.6});
  const std::vector<std::size_t> labels{0, 1, 2};
  const auto sel = ensemble_select({p, p, p}, labels, 5);
  EXPECT_EQ(sel.bag, (std::vector<std::size_t>{0}));
  EXPECT_EQ(sel.score(), 1.0);
  EXPECT_EQ(sel.best_single, 1.0);
  const Tensor avg = ensemble_average({p, p, p}, {0, 1, 2});
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(avg.at(i), p.at(i), 1e-15);
}

TEST(Ensemble, ScoreNeverBelowBestSingleAndNonDecreasing) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 12;
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % 3;
    std::vector<Tensor> members;
    for (int m = 0; m < 6; ++m) {
      std::vector<Scalar> v(n * 3);
      for (std::size_t r = 0; r < n; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < 3; ++c) sum += (v[r * 3 + c] = rng.uniform() + (c == labels[r] ? 0.3 : 0.0));
        for (std::size_t c = 0; c < 3; ++c) v[r * 3 + c] /= sum;
      }
      members.push_back(Tensor::from({n, 3}, v));
    }
    const auto sel = ensemble_select(members, labels, 10);
    ASSERT_FALSE(sel.bag.empty());
    EXPECT_GE(sel.score(), sel.best_single);
    for (std::size_t i = 1; i < sel.scores.size(); ++i) EXPECT_GT(sel.scores[i], sel.scores[i - 1]);
    EXPECT_LE(sel.bag.size(), 10u);
  }
}

TEST(Ensemble, ComplementaryMembersCombine) {
  // Member 0 is right on rows 0-1, member 1 on rows 1-2; their mean on all three.
  const Tensor a = probs({0.6, 0.4, 0.0, 0.3, 0.7, 0.0, 0.5, 0.0, 0.5});
  const Tensor b = probs({0.4, 0.6, 0.0, 0.0, 0.7, 0.3, 0.0, 0.2, 0.8});
  const std::vector<std::size_t> labels{0, 1, 2};
  const auto sel = ensemble_select({a, b}, labels, 4);
  EXPECT_EQ(sel.bag, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sel.score(), 1.0);
  EXPECT_LT(sel.best_single, 1.0);
}

TEST(Ensemble, EmptyInputsAreContractErrors) {
  const std::vector<std::size_t> labels{0};
  EXPECT_THROW(ensemble_select({}, labels, 3), ContractError);
  EXPECT_THROW(ensemble_average({probs({1, 0, 0})}, {}), ContractError);
  EXPECT_THROW(ensemble_predict({}, {}, labels, Dataset(), {}, 3), ContractError);
}

TEST(Ensemble, PredictUsesLastKCheckpoints) {
  const auto& s = small_synth();
  RunConfig cfg = tiny_run();
  cfg.epochs = 3;
  const RunResult r = run_training(cfg, s.dataset, s.split);
  const auto test = partition_images(s.dataset, s.split, Partition::kTest);
  const auto ep = ensemble_predict(r.checkpoints, r.val_probs, r.val_labels, s.dataset, test, 2);
  for (std::size_t m : ep.selection.bag) EXPECT_GE(m, 1u);
  EXPECT_EQ(ep.probs.shape(), (Shape{test.size(), 3}));
  const auto single = ensemble_predict(r.checkpoints, r.val_probs, r.val_labels, s.dataset, test, 1);
  EXPECT_EQ(single.selection.bag, (std::vector<std::size_t>{2}));
  const Tensor last = predict_images(r.checkpoints.back(), s.dataset, test);
  EXPECT_TRUE(std::equal(last.data().begin(), last.data().end(), single.probs.data().begin()));
}

TEST(GridSearch, ExpansionOrderAndSeeds) {
  RunConfig base = tiny_run();
  const Grid grid{{"lr", {"0.001", "0.01"}}, {"weight_decay", {"0", "0.1", "0.2"}}};
  const auto cells = expand_grid(base, grid);
  ASSERT_EQ(cells.size(), 6u);
  EXPECT_EQ(cells[0].lr, 0.001);
  EXPECT_EQ(cells[1].weight_decay, 0.1);
  EXPECT_EQ(cells[3].lr, 0.01);
  EXPECT_EQ(cells[3].weight_decay, 0.0);
  EXPECT_EQ(expand_grid(base, {}).size(), 1u);
  EXPECT_THROW(expand_grid(base, {{"lr", {}}}), ConfigError);
  EXPECT_THROW(expand_grid(base, {{"no_such_key", {"1"}}}), ConfigError);
}

TEST(GridSearch, SingleCellAndArgmaxAndDeterminism) {
  const auto& s = small_synth();
  RunConfig base = tiny_run();
  base.epochs = 1;
  const GridResult one = grid_search(base, {}, s.dataset, s.split);
  ASSERT_EQ(one.cells.size(), 1u);
  EXPECT_EQ(one.best, 0u);

  const Grid grid{{"lr", {"0.0001", "0.003", "1e300"}}};
  const GridResult a = grid_search(base, grid, s.dataset, s.split);
  const GridResult b = grid_search(base, grid, s.dataset, s.split);
  ASSERT_EQ(a.cells.size(), 3u);
  EXPECT_TRUE(a.cells[2].failed);
  std::size_t argmax = 0;
  for (std::size_t i = 1; i < 2; ++i)
    if (a.cells[i].ensemble_val_balanced_accuracy > a.cells[argmax].ensemble_val_balanced_accuracy) argmax = i;
  EXPECT_EQ(a.best, argmax);
  EXPECT_EQ(a.best, b.best);
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_EQ(a.cells[i].ensemble_val_balanced_accuracy, b.cells[i].ensemble_val_balanced_accuracy);
  EXPECT_EQ(a.cells[1].config.seed, mix_seed(base.seed, 1));
}

TEST(RunConfigJson, RoundTripAndStrictness) {
  RunConfig cfg = tiny_run(Method::kVat);
  cfg.vat.epsilon = 2.5;
  cfg.lambda_mode = RampMode::kImmediateRamp;
  const RunConfig back = run_config_from_json(run_config_to_json(cfg));
  EXPECT_EQ(run_config_to_json(back), run_config_to_json(cfg));
  EXPECT_EQ(back.vat.epsilon, 2.5);

  EXPECT_THROW(run_config_from_json(R"({"lr": 0.1, "typo": 1})"), ConfigError);
  EXPECT_THROW(run_config_from_json(R"({"lr": "fast"})"), ConfigError);
  EXPECT_THROW(run_config_from_json("{not json"), ConfigError);
  EXPECT_THROW(run_config_from_json(R"({"method": "baseline", "tau": 0.9})"), ConfigError);
  // Parsing checks keys and types; value consistency is checked by validate().
  EXPECT_THROW(run_config_from_json(R"({"method": "multitask", "task": "view"})").validate(), ConfigError);
  EXPECT_THROW(run_config_from_json(R"({"epochs": 0})").validate(), ConfigError);
  EXPECT_NO_THROW(cfg.validate());

  const RunConfig applied = apply_run_config_json(cfg, R"({"lr": 0.5})");
  EXPECT_EQ(applied.lr, 0.5);
  EXPECT_EQ(applied.vat.epsilon, 2.5);
}

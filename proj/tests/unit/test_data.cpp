#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "sslecho/data.hpp"
#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "sslecho/metrics.hpp"
#include "sslecho/png_io.hpp"
#include "sslecho/trainer.hpp"
#include "test_util.hpp"

using namespace sslecho;
using sslecho::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<StudyLabel> labeled_studies(std::size_t n) {
  std::vector<StudyLabel> out;
  for (std::size_t i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "s%04zu", i);
    out.push_back({id, static_cast<Diagnosis>(i % 3)});
  }
  return out;
}

ImageRecord flat_image(const std::string& study, const std::string& image, std::size_t size, Scalar value,
                       std::optional<View> view) {
  ImageRecord r;
  r.study_id = study;
  r.image_id = image;
  r.size = size;
  r.pixels.assign(size * size, value);
  r.view_label = view;
  return r;
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.images().size() != b.images().size() || a.studies().size() != b.studies().size()) return false;
  for (std::size_t i = 0; i < a.images().size(); ++i) {
    const auto& x = a.images()[i];
    const auto& y = b.images()[i];
    if (x.study_id != y.study_id || x.image_id != y.image_id || x.pixels != y.pixels || x.view_label != y.view_label)
      return false;
  }
  for (std::size_t i = 0; i < a.studies().size(); ++i) {
    if (a.studies()[i].study_id != b.studies()[i].study_id ||
        a.studies()[i].diagnosis_label != b.studies()[i].diagnosis_label)
      return false;
  }
  return true;
}

}  // namespace

TEST(Doppler, WhitelistIsOrientationExact) {
  EXPECT_TRUE(is_doppler(831, 323));
  EXPECT_TRUE(is_doppler(563, 294));
  EXPECT_FALSE(is_doppler(708, 608));
  EXPECT_FALSE(is_doppler(323, 831));
  EXPECT_FALSE(is_doppler(832, 323));
  EXPECT_EQ(default_doppler_dims().size(), 7u);
}

TEST(Preprocess, PadsShorterAxisSymmetrically) {
  std::vector<double> gray(60 * 100, 0.5);
  std::size_t side = 0;
  const auto padded = pad_to_square(gray, 100, 60, &side);
  ASSERT_EQ(side, 100u);
  for (std::size_t r = 0; r < 100; ++r) {
    const double expected = (r >= 20 && r < 80) ? 0.5 : 0.0;
    for (std::size_t c = 0; c < 100; ++c) ASSERT_EQ(padded[r * 100 + c], expected) << r << "," << c;
  }
  // Odd remainder goes after the image.
  std::vector<double> tall(5 * 2, 1.0);
  const auto p2 = pad_to_square(tall, 2, 5, &side);
  ASSERT_EQ(side, 5u);
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_EQ(p2[r * 5 + 0], 0.0);
    EXPECT_EQ(p2[r * 5 + 1], 1.0);
    EXPECT_EQ(p2[r * 5 + 2], 1.0);
    EXPECT_EQ(p2[r * 5 + 3], 0.0);
    EXPECT_EQ(p2[r * 5 + 4], 0.0);
  }
}

TEST(Preprocess, IdentityOnConformingInput) {
  Rng rng(1);
  PixelGrid raw{16, 16, 1, std::vector<double>(256)};
  for (double& v : raw.values) v = rng.uniform();
  const auto out = preprocess_image(raw, 16);
  ASSERT_EQ(out.size(), 256u);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_NEAR(out[i], raw.values[i], 1e-15);
  PixelGrid again{16, 16, 1, std::vector<double>(out.begin(), out.end())};
  EXPECT_EQ(preprocess_image(again, 16), out);
}

TEST(Preprocess, AllWhiteStaysWhiteAtTargetSize) {
  PixelGrid raw{100, 60, 3, std::vector<double>(100 * 60 * 3, 1.0)};
  // The padded band is black, so only a square white input stays all-white.
  PixelGrid square{90, 90, 3, std::vector<double>(90 * 90 * 3, 1.0)};
  const auto out = preprocess_image(square, 16);
  ASSERT_EQ(out.size(), 256u);
  for (Scalar v : out) EXPECT_NEAR(v, 1.0, 1e-12);
  const auto padded = preprocess_image(raw, 20);
  ASSERT_EQ(padded.size(), 400u);
  EXPECT_EQ(padded[0], 0.0);
  EXPECT_NEAR(padded[10 * 20 + 10], 1.0, 1e-12);
}

TEST(Preprocess, AreaResizeAveragesBlocksAndGrayscaleIsChannelMean) {
  const std::vector<double> sq{0, 1, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1};
  const auto r = resize_area(sq, 4, 2);
  EXPECT_NEAR(r[0], 0.75, 1e-15);
  EXPECT_NEAR(r[1], 0.75, 1e-15);
  EXPECT_NEAR(r[2], 0.0, 1e-15);
  EXPECT_NEAR(r[3], 0.5, 1e-15);
  const PixelGrid rgb{1, 1, 3, {0.3, 0.6, 0.9}};
  EXPECT_NEAR(to_grayscale(rgb)[0], 0.6, 1e-15);
}

TEST(Png, RoundTripAndHeaderDims) {
  TempDir dir("png");
  std::vector<std::uint8_t> bytes(7 * 5);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 7);
  write_png(dir.sub("a.png"), 7, 5, 1, bytes);
  EXPECT_EQ(read_png_dims(dir.sub("a.png")), (std::pair<std::size_t, std::size_t>{7, 5}));
  const PixelGrid g = read_png(dir.sub("a.png"));
  ASSERT_EQ(g.values.size(), bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) EXPECT_NEAR(g.values[i], bytes[i] / 255.0, 1e-15);

  sslecho::testing::write_file(dir.sub("bad.png"), "not a png at all");
  EXPECT_THROW(read_png(dir.sub("bad.png")), FormatError);
}

TEST(LoadTmed, DropsDopplerSizedImages) {
  TempDir dir("tmed");
  std::vector<StudyRecord> studies{{"p1", {}, Diagnosis::kSevereAS}};
  std::vector<ImageRecord> images{flat_image("p1", "a", 16, 0.2, View::kPLAX),
                                  flat_image("p1", "b", 16, 0.8, View::kOther)};
  const Dataset ds(16, studies, images);
  SplitSpec split;
  split.labeled_train = {"p1"};
  write_tmed(ds, split, dir.str());
  write_png(dir.sub("images/p1/c.png"), 831, 323, 1, std::vector<std::uint8_t>(831 * 323, 128));

  log::set_level(log::Level::kError);
  const LoadResult r = load_tmed(dir.str(), split);
  EXPECT_EQ(r.doppler_dropped, 1u);
  ASSERT_EQ(r.dataset.images().size(), 2u);
  EXPECT_EQ(r.dataset.images()[0].view_label, View::kPLAX);
  EXPECT_EQ(r.dataset.studies()[0].diagnosis_label, Diagnosis::kSevereAS);
  EXPECT_NEAR(r.dataset.images()[1].pixels[0], 204.0 / 255.0, 1e-15);
}

TEST(LoadTmed, MissingDiagnosisRowNamesTheStudy) {
  TempDir dir("tmed");
  std::vector<StudyRecord> studies{{"p1", {}, Diagnosis::kNoAS}, {"p2", {}, Diagnosis::kNoAS}};
  std::vector<ImageRecord> images{flat_image("p1", "a", 8, 0.0, View::kPSAX),
                                  flat_image("p2", "a", 8, 0.0, View::kPSAX)};
  SplitSpec split;
  split.labeled_train = {"p1", "p2"};
  write_tmed(Dataset(8, studies, images), split, dir.str());
  sslecho::testing::write_file(dir.sub("labels/diagnosis.csv"), "study_id,diagnosis\np1,no_AS\n");
  try {
    load_tmed(dir.str(), split, {8});
    FAIL() << "expected IntegrityError";
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find("p2"), std::string::npos) << e.what();
  }
}

TEST(LoadTmed, UnlabeledStudiesCarryNoLabelsAndReloadIsIdentical) {
  TempDir dir("tmed");
  SynthConfig cfg;
  cfg.n_labeled_patients = 9;
  cfg.n_unlabeled_patients = 4;
  cfg.images_per_patient = {2, 3};
  cfg.seed = 3;
  const SynthResult s = synth_generate(cfg);
  write_tmed(s.dataset, s.split, dir.str());
  write_split_csv(s.split, fold_path(dir.str(), 0));
  const SplitSpec split = read_split_csv(fold_path(dir.str(), 0));
  EXPECT_EQ(split.labeled_train, s.split.labeled_train);
  EXPECT_EQ(split.unlabeled_pool, s.split.unlabeled_pool);

  const LoadResult a = load_tmed(dir.str(), split);
  const LoadResult b = load_tmed(dir.str(), split);
  EXPECT_TRUE(same_dataset(a.dataset, b.dataset));
  ASSERT_EQ(a.dataset.images().size(), s.dataset.images().size());
  for (const ImageRecord& img : a.dataset.images()) {
    EXPECT_EQ(img.view_label.has_value(), split.is_labeled(img.study_id));
  }
  for (const StudyRecord& st : a.dataset.studies()) {
    EXPECT_EQ(st.diagnosis_label.has_value(), split.is_labeled(st.study_id));
  }
}

TEST(Splits, StandardSizesAndDisjointness) {
  auto check = [](std::size_t n, SplitRatio ratio, std::size_t tr, std::size_t va, std::size_t te) {
    const auto folds = make_splits(labeled_studies(n), ratio, 4, 7);
    ASSERT_EQ(folds.size(), 4u);
    for (const SplitSpec& f : folds) {
      EXPECT_EQ(f.labeled_train.size(), tr);
      EXPECT_EQ(f.validation.size(), va);
      EXPECT_EQ(f.test.size(), te);
      EXPECT_NO_THROW(f.validate());
      for (const auto& id : f.test) EXPECT_FALSE(f.labeled_train.count(id));
    }
    EXPECT_NE(folds[0].test, folds[1].test);
  };
  check(260, SplitRatio::parse("3:1:1"), 156, 52, 52);
  check(54, SplitRatio::parse("1:1:1"), 18, 18, 18);
}

TEST(Splits, StratifiedAndDeterministic) {
  auto studies = labeled_studies(30);
  studies.push_back({"u1", std::nullopt});
  const auto a = make_splits(studies, {1, 1, 1}, 2, 3);
  const auto b = make_splits(studies, {1, 1, 1}, 2, 3);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(a[k].test, b[k].test);
    EXPECT_EQ(a[k].unlabeled_pool, (std::set<std::string>{"u1"}));
    std::array<int, 3> per_class{};
    for (const auto& id : a[k].labeled_train) ++per_class[std::stoi(id.substr(1)) % 3];
    EXPECT_EQ(per_class[0] + per_class[1] + per_class[2], 10);
    for (int c : per_class) EXPECT_TRUE(c == 3 || c == 4) << c;
  }
}

TEST(Splits, TooFewStudiesAndBadRatio) {
  EXPECT_THROW(make_splits(labeled_studies(8), {1, 1, 1}, 1, 0), SplitError);
  EXPECT_THROW(SplitRatio::parse("3:1"), ConfigError);
  EXPECT_THROW(SplitRatio::parse("3:0:1"), ConfigError);
  SplitSpec s;
  s.labeled_train = {"a"};
  s.test = {"a"};
  EXPECT_THROW(s.validate(), SplitError);
}

TEST(Synth, DeterministicAndOtherFractionNearTarget) {
  SynthConfig cfg;
  cfg.n_labeled_patients = 120;
  cfg.n_unlabeled_patients = 80;
  cfg.seed = 11;
  const SynthResult a = synth_generate(cfg);
  const SynthResult b = synth_generate(cfg);
  EXPECT_TRUE(same_dataset(a.dataset, b.dataset));
  EXPECT_EQ(a.split.test, b.split.test);

  // Unlabeled images draw views the same way but carry no label to count.
  std::size_t labeled = 0, other = 0;
  for (const ImageRecord& img : a.dataset.images()) {
    if (!img.view_label) continue;
    ++labeled;
    other += *img.view_label == View::kOther;
  }
  ASSERT_GE(a.dataset.images().size(), 2000u);
  ASSERT_GT(labeled, 1000u);
  EXPECT_NEAR(static_cast<double>(other) / static_cast<double>(labeled), 0.8, 0.03);
  for (const ImageRecord& img : a.dataset.images())
    for (Scalar v : img.pixels) ASSERT_TRUE(v >= 0.0 && v <= 1.0);

  cfg.seed = 12;
  EXPECT_FALSE(same_dataset(a.dataset, synth_generate(cfg).dataset));
}

TEST(Synth, InvalidConfigIsConfigError) {
  SynthConfig cfg;
  cfg.other_fraction = 1.0;
  EXPECT_THROW(synth_generate(cfg), ConfigError);
  cfg = {};
  cfg.images_per_patient = {3, 2};
  EXPECT_THROW(synth_generate(cfg), ConfigError);
}

TEST(Synth, DiagnosisSignalLivesOnlyInRelevantViews) {
  SynthConfig sc;
  sc.n_labeled_patients = 150;
  sc.n_unlabeled_patients = 0;
  sc.seed = 21;
  const SynthResult s = synth_generate(sc);

  auto subset = [&](bool relevant) {
    std::vector<ImageRecord> kept;
    for (const ImageRecord& img : s.dataset.images())
      if ((*img.view_label != View::kOther) == relevant) kept.push_back(img);
    return Dataset(s.dataset.image_size(), s.dataset.studies(), kept);
  };
  auto test_ba = [&](const Dataset& ds) {
    RunConfig cfg;
    cfg.task = Task::kDiagnosis;
    cfg.backbone.stem_width = 8;
    cfg.backbone.widths = {8, 16, 32};
    cfg.backbone.blocks_per_stage = 1;
    cfg.epochs = 8;
    cfg.images_per_epoch = 1024;
    cfg.batch_labeled = 32;
    cfg.seed = 5;
    const RunResult run = run_training(cfg, ds, s.split);
    const auto test = partition_images(ds, s.split, Partition::kTest);
    const auto pred = argmax_rows(predict_images(run.checkpoints.back(), ds, test));
    std::vector<std::size_t> truth;
    for (std::size_t i : test) truth.push_back(*ds.label(i, Task::kDiagnosis));
    return balanced_accuracy(truth, pred, 3);
  };
  log::set_level(log::Level::kError);
  const double relevant = test_ba(subset(true));
  const double other = test_ba(subset(false));
  EXPECT_GT(relevant, 0.70);
  EXPECT_LT(other, 0.40);
}

TEST(Sampler, EpochCoverageAndDeterminism) {
  std::vector<std::size_t> pool{3, 5, 7, 9, 11, 13, 15};
  IndexSampler a(pool, Rng(4)), b(pool, Rng(4));
  std::vector<std::size_t> first = a.next(7);
  EXPECT_EQ(first, b.next(7));
  std::sort(first.begin(), first.end());
  EXPECT_EQ(first, pool);
  auto second = a.next(7);
  std::sort(second.begin(), second.end());
  EXPECT_EQ(second, pool);
  EXPECT_THROW(IndexSampler({}, Rng(1)).next(1), SamplerError);
}

TEST(Sampler, MinibatchSizesLabelsAndEmptyUnlabeledPool) {
  SynthConfig cfg;
  cfg.n_labeled_patients = 9;
  cfg.n_unlabeled_patients = 3;
  cfg.seed = 2;
  const SynthResult s = synth_generate(cfg);
  MinibatchSampler sampler(s.dataset, s.split, Task::kMultitask, Rng(8));
  const LabeledMinibatch lb = sampler.next_labeled(10);
  EXPECT_EQ(lb.images.shape(), (Shape{10, 1, 16, 16}));
  EXPECT_EQ(lb.labels.size(), 10u);
  EXPECT_EQ(lb.view_labels.size(), 10u);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_TRUE(s.split.labeled_train.count(s.dataset.images()[lb.indices[k]].study_id));
    EXPECT_EQ(lb.labels[k], *s.dataset.label(lb.indices[k], Task::kDiagnosis));
  }
  EXPECT_EQ(sampler.next_unlabeled(6).images.shape(), (Shape{6, 1, 16, 16}));

  cfg.n_unlabeled_patients = 0;
  const SynthResult none = synth_generate(cfg);
  MinibatchSampler empty(none.dataset, none.split, Task::kView, Rng(8));
  EXPECT_THROW(empty.next_unlabeled(1), SamplerError);
}

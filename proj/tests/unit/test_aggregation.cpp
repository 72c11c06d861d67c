#include <gtest/gtest.h>

#include "sslecho/aggregation.hpp"
#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "test_util.hpp"

using namespace sslecho;
using sslecho::testing::TempDir;

namespace {

// View probabilities whose relevant mass P(PLAX) + P(PSAX) is w.
Probs3 view_with_weight(double w) { return {w / 2, w / 2, 1 - w}; }

struct Study {
  PredictionSet diag{Task::kDiagnosis, {}};
  PredictionSet view{Task::kView, {}};
};

Study make_study(const std::vector<Probs3>& diag, const std::vector<double>& weights) {
  Study s;
  for (std::size_t i = 0; i < diag.size(); ++i) {
    const std::string id = "img" + std::to_string(i);
    s.diag.add("p", id, diag[i]);
    s.view.add("p", id, view_with_weight(weights[i]));
  }
  return s;
}

void expect_probs(const Probs3& got, const Probs3& want, double tol = 1e-12) {
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(got[c], want[c], tol) << "class " << c;
}

const Probs3 kP1{0.8, 0.1, 0.1};
const Probs3 kP2{0.2, 0.5, 0.3};

}  // namespace

TEST(SimpleAverage, Examples) {
  expect_probs(simple_average(make_study({kP1}, {0.5}).diag, "p").probs, kP1);
  const auto two = simple_average(make_study({kP1, kP2}, {0.5, 0.5}).diag, "p");
  expect_probs(two.probs, {0.5, 0.3, 0.2});
  EXPECT_EQ(two.predicted_class, 0u);
  expect_probs(simple_average(make_study({kP2, kP2, kP2}, {1, 1, 1}).diag, "p").probs, kP2);
  EXPECT_THROW(simple_average(make_study({kP1}, {0.5}).diag, "nobody"), IntegrityError);
}

TEST(ViewPrioritized, Examples) {
  expect_probs(view_prioritized_average(make_study({kP1, kP2}, {1.0, 0.0}).diag,
                                        make_study({kP1, kP2}, {1.0, 0.0}).view, "p")
                   .probs,
               kP1);
  const Study s = make_study({kP1, kP2}, {0.6, 0.2});
  expect_probs(view_prioritized_average(s.diag, s.view, "p").probs, {0.65, 0.20, 0.15});
  const Study u = make_study({kP1, kP2, {0.1, 0.1, 0.8}}, {0.3, 0.3, 0.3});
  expect_probs(view_prioritized_average(u.diag, u.view, "p").probs, simple_average(u.diag, "p").probs);
}

TEST(ViewPrioritized, ZeroWeightsFallBackWithWarning) {
  const Study s = make_study({kP1, kP2}, {0.0, 0.0});
  log::set_level(log::Level::kError);
  const long before = log::warning_count();
  expect_probs(view_prioritized_average(s.diag, s.view, "p").probs, {0.5, 0.3, 0.2});
  EXPECT_EQ(log::warning_count(), before + 1);
}

TEST(ViewPrioritized, MissingViewPredictionIsIntegrityError) {
  Study s = make_study({kP1, kP2}, {0.5, 0.5});
  s.diag.add("p", "img9", kP1);
  EXPECT_THROW(view_prioritized_average(s.diag, s.view, "p"), IntegrityError);
}

TEST(ThresholdThenAverage, Examples) {
  const Study s = make_study({kP1, kP2}, {0.9, 0.2});
  expect_probs(threshold_then_average(s.diag, s.view, "p", 0.5).probs, kP1);
  expect_probs(threshold_then_average(s.diag, s.view, "p", 0.0).probs, simple_average(s.diag, "p").probs);
  log::set_level(log::Level::kError);
  const long before = log::warning_count();
  expect_probs(threshold_then_average(s.diag, s.view, "p", 1.0).probs, simple_average(s.diag, "p").probs);
  EXPECT_EQ(log::warning_count(), before + 1);
  EXPECT_THROW(threshold_then_average(s.diag, s.view, "p", 1.5), ContractError);
}

TEST(Aggregation, SimplexScaleAndOrderInvariance) {
  Rng rng(3);
  auto random_probs = [&] {
    Probs3 p{rng.uniform(), rng.uniform(), rng.uniform()};
    const double s = p[0] + p[1] + p[2];
    for (double& v : p) v /= s;
    return p;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(6);
    std::vector<Probs3> diag(n);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      diag[i] = random_probs();
      w[i] = rng.uniform(0.05, 0.95);
    }
    const Study s = make_study(diag, w);
    const auto vp = view_prioritized_average(s.diag, s.view, "p").probs;
    EXPECT_NEAR(vp[0] + vp[1] + vp[2], 1.0, 1e-12);

    std::vector<double> half(w);
    for (double& x : half) x *= 0.5;
    const Study h = make_study(diag, half);
    expect_probs(view_prioritized_average(h.diag, h.view, "p").probs, vp);

    // Reversed image order; ids sort differently so the summation order changes.
    std::vector<Probs3> rd(diag.rbegin(), diag.rend());
    std::vector<double> rw(w.rbegin(), w.rend());
    const Study r = make_study(rd, rw);
    expect_probs(view_prioritized_average(r.diag, r.view, "p").probs, vp);
    expect_probs(simple_average(r.diag, "p").probs, simple_average(s.diag, "p").probs);
  }
}

TEST(Aggregation, ArgmaxTiesResolveLowAndAreFlagged) {
  bool tie = false;
  EXPECT_EQ(argmax3({0.4, 0.4, 0.2}, &tie), 0u);
  EXPECT_TRUE(tie);
  EXPECT_EQ(argmax3({0.2, 0.3, 0.5}, &tie), 2u);
  EXPECT_FALSE(tie);
  EXPECT_TRUE(simple_average(make_study({{0.45, 0.1, 0.45}}, {1}).diag, "p").tie);
}

TEST(Aggregation, AllStrategiesOverStudiesAndValidation) {
  PredictionSet diag{Task::kDiagnosis, {}}, view{Task::kView, {}};
  diag.add("b", "1", kP2);
  diag.add("a", "1", kP1);
  view.add("a", "1", view_with_weight(0.7));
  view.add("b", "1", view_with_weight(0.7));
  for (auto strategy : {AggregationStrategy::kSimpleAverage, AggregationStrategy::kViewPrioritized,
                        AggregationStrategy::kThresholdThenAverage}) {
    const auto out = aggregate(diag, &view, strategy);
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[0].study_id, "a");
    expect_probs(out[1].probs, kP2);
    EXPECT_EQ(strategy_from_string(to_string(strategy)), strategy);
  }
  EXPECT_THROW(aggregate(diag, nullptr, AggregationStrategy::kViewPrioritized), ContractError);
  EXPECT_THROW(strategy_from_string("majority"), ConfigError);
  EXPECT_THROW(diag.add("c", "1", {0.5, 0.5, 0.5}), ContractError);
  EXPECT_THROW(diag.add("c", "1", {1.2, -0.2, 0.0}), ContractError);
}

TEST(Aggregation, PredictionCsvRoundTrip) {
  TempDir dir("agg");
  PredictionSet set{Task::kView, {}};
  set.add("s1", "a", {0.1, 0.2, 0.7});
  set.add("s1", "b", {1.0 / 3, 1.0 / 3, 1.0 / 3});
  set.add("s2", "a", {0.25, 0.5, 0.25});
  write_prediction_csv(set, dir.sub("p.csv"));
  const PredictionSet back = read_prediction_csv(dir.sub("p.csv"), Task::kView);
  EXPECT_EQ(back.entries, set.entries);
  EXPECT_EQ(back.study_ids(), (std::vector<std::string>{"s1", "s2"}));

  write_patient_csv(aggregate(set, nullptr, AggregationStrategy::kSimpleAverage), dir.sub("patients.csv"));
  const std::string text = sslecho::testing::read_file(dir.sub("patients.csv"));
  EXPECT_EQ(text.substr(0, text.find('\n')), "study_id,p_no,p_mildmod,p_severe,predicted");

  sslecho::testing::write_file(dir.sub("bad.csv"), "study_id,image_id,p0,p1,p2\ns1,a,0.5,x,0.5\n");
  EXPECT_THROW(read_prediction_csv(dir.sub("bad.csv"), Task::kView), ParseError);
}

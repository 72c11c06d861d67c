#include <gtest/gtest.h>

#include <cmath>

#include "sslecho/error.hpp"
#include "sslecho/ops.hpp"
#include "test_util.hpp"

using namespace sslecho;
using sslecho::testing::random_tensor;

namespace {

void expect_values(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.at(i), expected[i], tol) << "index " << i;
}

// Direct seven-loop cross-correlation.
std::vector<double> naive_conv(const Tensor& in, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t b = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(b * f * oh * ow, 0.0);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double s = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long sy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long sx = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                s += in.at(((n * c + ch) * h + sy) * w + sx) * k.at(((o * c + ch) * kh + i) * kw + j);
              }
          out[((n * f + o) * oh + y) * ow + x] = s;
        }
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape tape;
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  expect_values(ops::matmul(tape, a, eye), {1, 2, 3, 4});
}

TEST(Matmul, HandArithmetic) {
  Tape tape;
  const Tensor c = ops::matmul(tape, Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c.item(), 11.0);
}

TEST(Matmul, ZerosAnnihilate) {
  Rng rng(1);
  Tape tape;
  expect_values(ops::matmul(tape, random_tensor({3, 4}, rng), Tensor::zeros({4, 2})), std::vector<double>(6, 0.0));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  try {
    ops::matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] . [2x3]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, HandExample) {
  Tape tape;
  const Tensor in = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor k = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
  const Tensor out = ops::conv2d(tape, in, k, 1, 0);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 2, 2}));
  expect_values(out, {6, 8, 12, 14});
}

TEST(Conv2d, UnitKernelIsIdentityAndZeroKernelIsZero) {
  Rng rng(2);
  Tape tape;
  const Tensor in = random_tensor({2, 1, 5, 5}, rng);
  const Tensor same = ops::conv2d(tape, in, Tensor::from({1, 1, 1, 1}, {1}), 1, 0);
  for (std::size_t i = 0; i < in.numel(); ++i) EXPECT_EQ(same.at(i), in.at(i));
  const Tensor zero = ops::conv2d(tape, in, Tensor::zeros({3, 1, 3, 3}), 1, 1);
  for (Scalar v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesNaiveOracleAcrossStridesAndPadding) {
  Rng rng(3);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      Tape tape;
      const Tensor in = random_tensor({3, 2, 7, 6}, rng);
      const Tensor k = random_tensor({4, 2, 3, 3}, rng);
      expect_values(ops::conv2d(tape, in, k, stride, pad), naive_conv(in, k, stride, pad), 1e-12);
    }
  }
}

TEST(Conv2d, NonPositiveOutputIsDimensionError) {
  Tape tape;
  EXPECT_THROW(ops::conv2d(tape, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), DimensionError);
}

TEST(Softmax, Examples) {
  Tape tape;
  expect_values(ops::softmax(tape, Tensor::from({1, 3}, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  expect_values(ops::softmax(tape, Tensor::from({1, 2}, {std::log(2.0), 0})), {2.0 / 3, 1.0 / 3});
}

TEST(Softmax, ShiftInvariantAndStableForLargeLogits) {
  Rng rng(4);
  Tape tape;
  const Tensor z = random_tensor({4, 5}, rng);
  Tensor shifted = z.clone();
  for (Scalar& v : shifted.mutable_data()) v += 1000.0;
  const Tensor a = ops::softmax(tape, z);
  const Tensor b = ops::softmax(tape, shifted);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
  EXPECT_FALSE(b.has_non_finite());
}

TEST(Backward, SquareGradient) {
  Tensor x = Tensor::from({1}, {3}, true);
  Tape tape;
  tape.backward(ops::sum(tape, ops::square(tape, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(5);
  Tensor z = random_tensor({2, 4}, rng, 1.0, true);
  Tape tape;
  tape.backward(ops::sum(tape, ops::softmax(tape, z)));
  for (Scalar g : z.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  const Tensor y = ops::square(tape, x);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, SecondCallIsStateError) {
  Tensor x = Tensor::from({1}, {2}, true);
  Tape tape;
  const Tensor loss = ops::sum(tape, ops::square(tape, x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), StateError);
}

TEST(Backward, NoGradTapeRecordsNothing) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape = Tape::no_grad();
  ops::sum(tape, ops::square(tape, x));
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, DetachedTensorReceivesNoGradient) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor d = x.detach();
  Tape tape;
  tape.backward(ops::sum(tape, ops::mul(tape, ops::square(tape, x), d)));
  EXPECT_FALSE(d.has_grad());
  EXPECT_EQ(x.grad()[0], 2.0 * 1 * 1);  // d/dx (x^2 * c) = 2xc with c = x
  EXPECT_EQ(x.grad()[1], 2.0 * 2 * 2);
}

// Two-layer perceptron with 50 parameters against central differences.
TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  Rng rng(6);
  Tensor w1 = random_tensor({4, 6}, rng, 0.7, true);
  Tensor b1 = random_tensor({6}, rng, 0.3, true);
  Tensor w2 = random_tensor({6, 3}, rng, 0.7, true);
  Tensor b2 = random_tensor({3}, rng, 0.3, true);
  ASSERT_EQ(w1.numel() + b1.numel() + w2.numel() + b2.numel(), 51u);
  const Tensor x = random_tensor({5, 4}, rng);
  const Tensor target = Tensor::from({5, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0});

  auto loss = [&](Tape& tape) {
    Tensor h = ops::relu(tape, ops::linear(tape, x, w1, b1));
    Tensor lp = ops::log_softmax(tape, ops::linear(tape, h, w2, b2));
    return ops::scale(tape, ops::sum(tape, ops::mul(tape, lp, target)), -1.0 / 5);
  };
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto f = [&]() {
    Tape tape = Tape::no_grad();
    return static_cast<double>(loss(tape).item());
  };
  for (Tensor* p : {&w1, &b1, &w2, &b2}) {
    const auto numeric = sslecho::testing::numeric_gradient(*p, f, 1e-5);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      EXPECT_LT(sslecho::testing::relative_error(p->grad()[i], numeric[i]), 1e-4) << "entry " << i;
    }
  }
}

TEST(Backward, ConvAndBatchNormMatchFiniteDifferences) {
  Rng rng(7);
  Tensor x = random_tensor({3, 2, 5, 5}, rng, 1.0, true);
  Tensor k = random_tensor({3, 2, 3, 3}, rng, 0.5, true);
  Tensor gamma = Tensor::from({3}, {1.2, 0.7, -0.4}, true);
  Tensor beta = Tensor::from({3}, {0.1, -0.2, 0.3}, true);
  Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
  const Tensor weight = random_tensor({3, 3, 3, 3}, rng);

  auto loss = [&](Tape& tape) {
    Tensor y = ops::conv2d(tape, x, k, 2, 1);
    y = ops::batch_norm(tape, y, gamma, beta, rm, rv, ops::BatchNormMode::kTrainNoUpdate);
    return ops::sum(tape, ops::mul(tape, y, weight));
  };
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto f = [&]() {
    Tape tape = Tape::no_grad();
    return static_cast<double>(loss(tape).item());
  };
  for (Tensor* p : {&x, &k, &gamma, &beta}) {
    const auto numeric = sslecho::testing::numeric_gradient(*p, f, 1e-5);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      EXPECT_LT(sslecho::testing::relative_error(p->grad()[i], numeric[i]), 1e-4) << "entry " << i;
    }
  }
}

TEST(BatchNorm, RunningStatisticsFollowMomentumOnlyInTrainMode) {
  Tensor x = Tensor::from({2, 1, 1, 2}, {1, 3, 5, 7});
  Tensor gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
  Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  Tape tape = Tape::no_grad();
  ops::batch_norm(tape, x, gamma, beta, rm, rv, ops::BatchNormMode::kTrainNoUpdate);
  EXPECT_EQ(rm.at(0), 0.0);
  ops::batch_norm(tape, x, gamma, beta, rm, rv, ops::BatchNormMode::kTrain);
  EXPECT_NEAR(rm.at(0), 0.1 * 4.0, 1e-12);  // batch mean 4
  // Population variance 5 over 4 values; the running estimate is unbiased.
  EXPECT_NEAR(rv.at(0), 0.9 + 0.1 * 20.0 / 3.0, 1e-12);
}

TEST(Tensor, CloneIsDeepAndCopyIsShared) {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor shared = a;
  Tensor deep = a.clone();
  a.mutable_data()[0] = 9;
  EXPECT_EQ(shared.at(0), 9);
  EXPECT_EQ(deep.at(0), 1);
}

TEST(Tensor, FromRejectsWrongValueCount) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gattn/ops.hpp"
#include "gattn/rng.hpp"
#include "oracles.hpp"

using gattn::Rng;
using gattn::Shape;
using gattn::Tape;
using gattn::Tensor;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, T lo = T(-1), T hi = T(1)) {
  return Tensor<T>::uniform(std::move(shape), lo, hi, rng);
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto w = Tensor<double>::from_data({1, 1, 1, 1}, {1});
  auto y = gattn::conv2d(x, w, std::nullopt, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, OnesKernelSums) {
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = gattn::conv2d(x, w, std::nullopt, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
  Rng rng(7);
  auto x = random_tensor<double>({2, 3, 8, 8}, rng);
  auto w = random_tensor<double>({4, 3, 3, 3}, rng);
  auto b = random_tensor<double>({4}, rng);
  auto y = gattn::conv2d(x, w, b, 1, 1);
  auto ref = oracle::conv2d(x.data(), 2, 3, 8, 8, w.data(), 4, 3, 3, b.data(), 1, 1);
  ASSERT_EQ(y.data().size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double denom = std::max(std::abs(ref[i]), 1.0);
    EXPECT_NEAR(y.data()[i], ref[i], 1e-6 * denom);
  }
}

TEST(Conv2d, StridedMatchesOracle) {
  Rng rng(11);
  auto x = random_tensor<double>({2, 2, 9, 9}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng);
  auto y = gattn::conv2d(x, w, std::nullopt, 2, 1);
  auto ref = oracle::conv2d(x.data(), 2, 2, 9, 9, w.data(), 3, 3, 3, {}, 2, 1);
  ASSERT_EQ(y.data().size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-9);
}

TEST(Conv2d, ChannelMismatchNamesAxes) {
  auto x = Tensor<double>::zeros({1, 3, 4, 4});
  auto w = Tensor<double>::zeros({2, 4, 3, 3});
  try {
    gattn::conv2d(x, w);
    FAIL() << "expected ShapeError";
  } catch (const gattn::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("axis 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find('3'), std::string::npos);
    EXPECT_NE(msg.find('4'), std::string::npos);
  }
}

TEST(SpatialSoftmax, UniformOnZeros) {
  auto x = Tensor<double>::zeros({1, 1, 2, 2});
  auto y = gattn::spatial_softmax(x);
  for (double v : y.data()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(SpatialSoftmax, ExpNormalizeCase) {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {std::log(2.0), 0, 0, 0});
  auto y = gattn::spatial_softmax(x);
  EXPECT_NEAR(y.data()[0], 0.4, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.2, 1e-12);
  EXPECT_NEAR(y.data()[2], 0.2, 1e-12);
  EXPECT_NEAR(y.data()[3], 0.2, 1e-12);
}

TEST(SpatialSoftmax, ShiftInvariance) {
  Rng rng(3);
  auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  auto shifted = Tensor<double>::zeros(x.shape());
  for (std::size_t i = 0; i < x.data().size(); ++i) shifted.data()[i] = x.data()[i] + 17.5;
  auto a = gattn::spatial_softmax(x);
  auto b = gattn::spatial_softmax(shifted);
  for (std::size_t i = 0; i < a.data().size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(SpatialSoftmax, RejectsNonFinite) {
  auto x = Tensor<double>::from_data({1, 1, 1, 2}, {1.0, std::nan("")});
  EXPECT_THROW(gattn::spatial_softmax(x), gattn::ValueError);
}

TEST(SpatialSoftmax, SumsToOneAtExtremes) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor<double>({2, 2, 3, 3}, rng, -1e4, 1e4);
    auto y = gattn::spatial_softmax(x);
    for (std::int64_t nc = 0; nc < 4; ++nc) {
      double s = 0.0;
      for (std::int64_t p = 0; p < 9; ++p) {
        const double v = y.data()[static_cast<std::size_t>(nc * 9 + p)];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Softmax, Basics) {
  auto x = Tensor<double>::from_data({2}, {0, 0});
  auto y = gattn::softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 0.5, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.5, 1e-12);

  auto x2 = Tensor<double>::from_data({2}, {1, -1});
  auto y2 = gattn::softmax(x2, 0);
  EXPECT_NEAR(y2.data()[0], 0.8808, 1e-3);
  EXPECT_NEAR(y2.data()[1], 0.1192, 1e-3);
}

TEST(Softmax, PreservesArgmax) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<double>({7}, rng, -5, 5);
    auto y = gattn::softmax(x, 0);
    auto amax = [](const std::vector<double>& v) {
      return std::max_element(v.begin(), v.end()) - v.begin();
    };
    EXPECT_EQ(amax(x.data()), amax(y.data()));
  }
}

TEST(Softmax, AxisOneMatchesVectorOracle) {
  Rng rng(13);
  auto x = random_tensor<double>({3, 5}, rng, -3, 3);
  auto y = gattn::softmax(x, 1);
  for (int n = 0; n < 3; ++n) {
    std::vector<double> row(x.data().begin() + n * 5, x.data().begin() + (n + 1) * 5);
    auto ref = oracle::softmax_vec(row);
    for (int l = 0; l < 5; ++l)
      EXPECT_NEAR(y.data()[static_cast<std::size_t>(n * 5 + l)], ref[static_cast<std::size_t>(l)], 1e-12);
  }
}

TEST(WeightedSpatialSum, UniformMaskIsMean) {
  Rng rng(17);
  auto maps = random_tensor<double>({1, 2, 3, 2, 2}, rng);
  auto mask = Tensor<double>::full({1, 2, 2, 2}, 0.25);
  auto y = gattn::weighted_spatial_sum(mask, maps);
  for (int k = 0; k < 2; ++k)
    for (int l = 0; l < 3; ++l) {
      double mean = 0.0;
      for (int p = 0; p < 4; ++p) mean += maps.data()[static_cast<std::size_t>((k * 3 + l) * 4 + p)] / 4.0;
      EXPECT_NEAR(y.data()[static_cast<std::size_t>(k * 3 + l)], mean, 1e-12);
    }
}

TEST(WeightedSpatialSum, OneHotMaskSelects) {
  Rng rng(19);
  auto maps = random_tensor<double>({1, 1, 4, 3, 3}, rng);
  auto mask = Tensor<double>::zeros({1, 1, 3, 3});
  mask.data()[5] = 1.0;  // (x0,y0) = (1,2)
  auto y = gattn::weighted_spatial_sum(mask, maps);
  for (int l = 0; l < 4; ++l)
    EXPECT_DOUBLE_EQ(y.data()[static_cast<std::size_t>(l)], maps.data()[static_cast<std::size_t>(l * 9 + 5)]);
}

TEST(WeightedSpatialSum, MatchesLoopOracle) {
  Rng rng(23);
  auto mask = random_tensor<double>({2, 3, 4, 5}, rng, 0, 1);
  auto maps = random_tensor<double>({2, 3, 6, 4, 5}, rng);
  auto y = gattn::weighted_spatial_sum(mask, maps);
  auto ref = oracle::weighted_sum(mask.data(), maps.data(), 2, 3, 6, 20);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-9);
}

TEST(WeightedSpatialSum, ShapeMismatchThrows) {
  auto mask = Tensor<double>::zeros({1, 2, 3, 3});
  auto maps = Tensor<double>::zeros({1, 2, 4, 2, 3});
  EXPECT_THROW(gattn::weighted_spatial_sum(mask, maps), gattn::ShapeError);
}

TEST(MaxPool, Basic) {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = gattn::max_pool2d(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(MaxPool, MatchesOracle) {
  Rng rng(29);
  auto x = random_tensor<double>({2, 3, 6, 8}, rng);
  auto y = gattn::max_pool2d(x);
  auto ref = oracle::max_pool(x.data(), 6, 6, 8);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], ref[i]);
}

TEST(Tanh, BoundsAndZero) {
  auto x = Tensor<double>::from_data({3}, {0.0, 100.0, -100.0});
  auto y = gattn::tanh_op(x);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_LT(y.data()[1], 1.0 + 1e-12);
  EXPECT_GT(y.data()[2], -1.0 - 1e-12);
}

TEST(BatchNorm, TrainModeMoments) {
  Rng rng(31);
  auto x = random_tensor<double>({4, 3, 5, 5}, rng, -2, 3);
  auto gamma = Tensor<double>::full({3}, 1.0);
  auto beta = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  auto y = gattn::batch_norm2d(x, gamma, beta, rm, rv, /*train=*/true);
  // Recompute moments of the output with a direct pass.
  const std::int64_t plane = 25, C = 3, N = 4;
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < plane; ++i) {
        const double v = y.data()[static_cast<std::size_t>((n * C + c) * plane + i)];
        s += v;
        s2 += v * v;
      }
    const double m = s / (N * plane);
    const double var = s2 / (N * plane) - m * m;
    EXPECT_NEAR(m, 0.0, 1e-4);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(BatchNorm, EvalUsesRunningStats) {
  auto x = Tensor<double>::from_data({1, 1, 1, 2}, {3.0, 5.0});
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::full({1}, 4.0);
  auto rv = Tensor<double>::full({1}, 4.0);
  auto y = gattn::batch_norm2d(x, gamma, beta, rm, rv, /*train=*/false, 0.1, 0.0);
  EXPECT_NEAR(y.data()[0], -0.5, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.5, 1e-12);
  // Running stats untouched in eval mode.
  EXPECT_DOUBLE_EQ(rm.item(), 4.0);
  EXPECT_DOUBLE_EQ(rv.item(), 4.0);
}

TEST(NllFromProbs, RejectsUnnormalizedRow) {
  auto p = Tensor<double>::from_data({1, 2}, {0.7, 0.7});
  std::vector<int> t{0};
  EXPECT_THROW(gattn::nll_from_probs(p, t), gattn::ValueError);
}

TEST(NllFromProbs, Value) {
  auto p = Tensor<double>::from_data({2, 2}, {0.25, 0.75, 0.5, 0.5});
  std::vector<int> t{1, 0};
  auto loss = gattn::nll_from_probs(p, t);
  EXPECT_NEAR(loss.item(), -(std::log(0.75) + std::log(0.5)) / 2.0, 1e-12);
}

TEST(Backward, LinearChainGradIsInput) {
  auto w = Tensor<double>::from_data({3}, {0.5, -1.0, 2.0}).set_requires_grad();
  auto x = Tensor<double>::from_data({3}, {2.0, 3.0, 4.0});
  Tape<double> tape;
  auto loss = gattn::sum_all(gattn::mul(w, x));
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(w.grad()[static_cast<std::size_t>(i)], x.data()[static_cast<std::size_t>(i)]);
}

TEST(Backward, TanhAnalyticDerivative) {
  Rng rng(37);
  auto w = random_tensor<double>({5}, rng).set_requires_grad();
  Tape<double> tape;
  auto loss = gattn::sum_all(gattn::tanh_op(w));
  tape.backward(loss);
  for (int i = 0; i < 5; ++i) {
    const double t = std::tanh(w.data()[static_cast<std::size_t>(i)]);
    EXPECT_NEAR(w.grad()[static_cast<std::size_t>(i)], 1.0 - t * t, 1e-6);
  }
}

TEST(Backward, RepeatedCallsAccumulateAdditively) {
  auto w = Tensor<double>::from_data({2}, {1.5, -0.5}).set_requires_grad();
  auto x = Tensor<double>::from_data({2}, {2.0, 7.0});
  Tape<double> tape;
  auto loss = gattn::sum_all(gattn::mul(w, x));
  tape.backward(loss);
  const std::vector<double> once = w.grad();
  tape.backward(loss);
  for (int i = 0; i < 2; ++i)
    EXPECT_DOUBLE_EQ(w.grad()[static_cast<std::size_t>(i)], 2.0 * once[static_cast<std::size_t>(i)]);
}

TEST(Backward, NonScalarLossRejected) {
  auto w = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad();
  Tape<double> tape;
  auto y = gattn::tanh_op(w);
  EXPECT_THROW(tape.backward(y), gattn::ValueError);
}

TEST(Backward, DetachBlocksGradient) {
  auto w = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad();
  Tape<double> tape;
  auto y = gattn::detach(gattn::tanh_op(w));
  EXPECT_FALSE(y.requires_grad());
  auto z = gattn::sum_all(gattn::mul(y, y));
  // z does not require grad at all: nothing upstream of the detach.
  EXPECT_FALSE(z.requires_grad());
}

TEST(Forward, BitwiseDeterministicForFixedSeed) {
  auto run = [] {
    Rng rng(123);
    auto x = random_tensor<float>({2, 3, 8, 8}, rng);
    auto w = random_tensor<float>({4, 3, 3, 3}, rng);
    auto y = gattn::conv2d(x, w, std::nullopt, 1, 1);
    return gattn::spatial_softmax(y).data();
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(MixDistributions, MatchesOracle) {
  Rng rng(41);
  auto w = random_tensor<double>({3, 4}, rng, 0, 1);
  auto c = random_tensor<double>({3, 4, 5}, rng);
  auto y = gattn::mix_distributions(w, c);
  auto ref = oracle::mix(w.data(), c.data(), 3, 4, 5);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(StackRows, RoundTripsThroughBackward) {
  auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4}).set_requires_grad();
  auto b = Tensor<double>::from_data({2, 2}, {5, 6, 7, 8}).set_requires_grad();
  Tape<double> tape;
  auto s = gattn::stack_rows<double>({a, b});
  EXPECT_EQ(s.shape(), (Shape{2, 2, 2}));
  EXPECT_DOUBLE_EQ((s.at({0, 0, 1})), 2.0);
  EXPECT_DOUBLE_EQ((s.at({0, 1, 0})), 5.0);
  EXPECT_DOUBLE_EQ((s.at({1, 1, 1})), 8.0);
  auto loss = gattn::sum_all(gattn::mul(s, s));
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(a.grad()[static_cast<std::size_t>(i)], 2.0 * a.data()[static_cast<std::size_t>(i)]);
    EXPECT_DOUBLE_EQ(b.grad()[static_cast<std::size_t>(i)], 2.0 * b.data()[static_cast<std::size_t>(i)]);
  }
}

TEST(Renormalize, RowsSumToOne) {
  Rng rng(43);
  auto x = random_tensor<double>({3, 4}, rng, 0.1, 2.0);
  auto y = gattn::renormalize(x, 1);
  for (int n = 0; n < 3; ++n) {
    double s = 0.0;
    for (int l = 0; l < 4; ++l) s += y.data()[static_cast<std::size_t>(n * 4 + l)];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

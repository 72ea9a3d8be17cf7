#include <gtest/gtest.h>

#include <random>

#include "smt/ops.hpp"
#include "test_util.hpp"

using namespace smt;
using smt::testing::max_abs_diff;
using smt::testing::random_tensor;

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  Tensor<float> x(Shape{1, 3, 3, 1});
  std::mt19937_64 rng(1);
  auto w = random_tensor<float>({3, 3, 1, 1}, rng);
  auto y = ops::conv2d(x, w, Tensor<float>{}, {1, 1, 1});
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 1}));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, ScalarAffine) {
  Tensor<float> x(Shape{1, 1, 1, 1}, {2.0f});
  Tensor<float> w(Shape{1, 1, 1, 1}, {3.0f});
  Tensor<float> b(Shape{1}, {1.0f});
  auto y = ops::conv2d(x, w, b, {});
  EXPECT_EQ(y.item(), 7.0f);
}

TEST(Conv2d, DepthwiseMatchesNaiveLoop) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<float>({1, 5, 5, 2}, rng);
  auto w = random_tensor<float>({3, 3, 1, 2}, rng);
  auto b = random_tensor<float>({2}, rng);
  auto y = ops::conv2d(x, w, b, {1, 1, 2});
  Index oh, ow;
  auto ref = smt::testing::naive_conv2d(x, w, b, 1, 1, 2, oh, ow);
  ASSERT_EQ(y.shape(), (Shape{1, oh, ow, 2}));
  EXPECT_LE(max_abs_diff(y.data(), ref), 1e-6);
}

TEST(Conv2d, RandomShapesMatchNaiveLoop) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> ext(1, 7);
  for (int trial = 0; trial < 60; ++trial) {
    const Index groups = std::uniform_int_distribution<int>(1, 3)(rng);
    const Index cin = groups * std::uniform_int_distribution<int>(1, 3)(rng);
    const Index cout = groups * std::uniform_int_distribution<int>(1, 3)(rng);
    const Index k = std::uniform_int_distribution<int>(1, 3)(rng);
    const Index stride = std::uniform_int_distribution<int>(1, 2)(rng);
    const Index pad = std::uniform_int_distribution<int>(0, 1)(rng);
    const Index h = std::max<Index>(k, ext(rng)), w = std::max<Index>(k, ext(rng));
    auto x = random_tensor<double>({2, h, w, cin}, rng);
    auto wt = random_tensor<double>({k, k, cin / groups, cout}, rng);
    auto b = random_tensor<double>({cout}, rng);
    auto y = ops::conv2d(x, wt, b, {stride, pad, groups});
    Index oh, ow;
    auto ref = smt::testing::naive_conv2d(x, wt, b, stride, pad, groups, oh, ow);
    ASSERT_EQ(y.shape(), (Shape{2, oh, ow, cout}));
    EXPECT_LE(max_abs_diff(y.data(), ref), 1e-12) << "trial " << trial;
  }
}

TEST(Conv2d, RejectsBadGrouping) {
  Tensor<float> x(Shape{1, 4, 4, 3});
  Tensor<float> w(Shape{3, 3, 1, 4});
  EXPECT_THROW(ops::conv2d(x, w, Tensor<float>{}, {1, 1, 2}), ConfigError);
  Tensor<float> w2(Shape{3, 3, 2, 4});
  try {
    ops::conv2d(x, w2, Tensor<float>{}, {1, 1, 1});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("input-channel"), std::string::npos);
  }
}

TEST(Conv2d, DepthwiseChannelsAreIndependent) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>({1, 6, 6, 4}, rng);
  auto w = random_tensor<double>({5, 5, 1, 4}, rng);
  auto base = ops::conv2d(x, w, Tensor<double>{}, {1, 2, 4});
  for (Index c = 0; c < 4; ++c) {
    auto x2 = x.clone();
    for (Index p = 0; p < 36; ++p) x2[p * 4 + c] += 0.5;
    auto y = ops::conv2d(x2, w, Tensor<double>{}, {1, 2, 4});
    for (Index p = 0; p < 36; ++p)
      for (Index oc = 0; oc < 4; ++oc) {
        if (oc == c) continue;
        EXPECT_EQ(y[p * 4 + oc], base[p * 4 + oc]) << "channel " << c << " leaked into " << oc;
      }
  }
}

TEST(Linear, IdentityAndPermutation) {
  Tensor<float> x(Shape{1, 2}, {1.0f, 2.0f});
  Tensor<float> eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<float> zero(Shape{2}, {0, 0});
  auto y = ops::linear(x, eye, zero);
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_EQ(y[1], 2.0f);
  Tensor<float> swap(Shape{2, 2}, {0, 1, 1, 0});
  auto z = ops::linear(x, swap);
  EXPECT_EQ(z[0], 2.0f);
  EXPECT_EQ(z[1], 1.0f);
}

TEST(Linear, MatchesNaiveMatmul) {
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({2, 3}, rng);
  auto w = random_tensor<float>({3, 4}, rng);
  auto b = random_tensor<float>({4}, rng);
  auto y = ops::linear(x, w, b);
  EXPECT_LE(max_abs_diff(y.data(), smt::testing::naive_matmul(x, w, b)), 1e-6);
}

TEST(Linear, RejectsDimensionMismatch) {
  Tensor<float> x(Shape{2, 3});
  Tensor<float> w(Shape{4, 2});
  EXPECT_THROW(ops::linear(x, w), ConfigError);
}

TEST(LayerNorm, ConstantInputIsZero) {
  Tensor<float> x(Shape{2, 5}, 3.5f);
  auto y = ops::layer_norm(x, Tensor<float>::ones({5}), Tensor<float>::zeros({5}), 1e-6f);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, ClosedFormSmallVectors) {
  // [1, 3]: mean 2, biased variance 1 -> [-1, 1].
  Tensor<double> two(Shape{1, 2}, {1.0, 3.0});
  auto y = ops::layer_norm(two, Tensor<double>::ones({2}), Tensor<double>::zeros({2}), 1e-12);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
  // [1, 2, 3]: variance 2/3 -> +-sqrt(3/2).
  Tensor<double> three(Shape{1, 3}, {1.0, 2.0, 3.0});
  auto z = ops::layer_norm(three, Tensor<double>::ones({3}), Tensor<double>::zeros({3}), 1e-12);
  EXPECT_NEAR(z[0], -1.2247448714, 1e-9);
  EXPECT_NEAR(z[1], 0.0, 1e-12);
  EXPECT_NEAR(z[2], 1.2247448714, 1e-9);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<float>({3, 4}, rng);
  Tensor<float> beta(Shape{4}, {0.5f, -1.0f, 2.0f, 0.0f});
  auto y = ops::layer_norm(x, Tensor<float>::zeros({4}), beta, 1e-6f);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 4; ++c) EXPECT_EQ(y[r * 4 + c], beta[c]);
}

TEST(LayerNorm, RandomMatchesTwoPassOracle) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const Index rows = std::uniform_int_distribution<int>(1, 7)(rng);
    const Index c = std::uniform_int_distribution<int>(1, 7)(rng);
    auto x = random_tensor<float>({rows, c}, rng);
    auto gamma = random_tensor<float>({c}, rng);
    auto beta = random_tensor<float>({c}, rng);
    auto y = ops::layer_norm(x, gamma, beta, 1e-6f);
    for (Index r = 0; r < rows; ++r) {
      double mean = 0, var = 0;
      for (Index i = 0; i < c; ++i) mean += x[r * c + i];
      mean /= double(c);
      for (Index i = 0; i < c; ++i) var += (x[r * c + i] - mean) * (x[r * c + i] - mean);
      var /= double(c);
      for (Index i = 0; i < c; ++i) {
        const double ref = (x[r * c + i] - mean) / std::sqrt(var + 1e-6) * gamma[i] + beta[i];
        EXPECT_NEAR(y[r * c + i], ref, 1e-5);
      }
    }
  }
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({2, 3, 3, 4}, rng);
  auto rm = Tensor<double>::zeros({4});
  auto rv = Tensor<double>::ones({4});
  auto y = ops::batch_norm(x, Tensor<double>::ones({4}), Tensor<double>::zeros({4}), rm, rv, ops::NormMode::eval, 0.1, 1e-5);
  for (Index i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, TrainOnConstantBatchIsZero) {
  Tensor<float> x(Shape{4, 2, 2, 3}, 1.25f);
  auto rm = Tensor<float>::zeros({3});
  auto rv = Tensor<float>::ones({3});
  auto y = ops::batch_norm(x, Tensor<float>::ones({3}), Tensor<float>::zeros({3}), rm, rv, ops::NormMode::train, 0.1f, 1e-5f);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  for (Index c = 0; c < 3; ++c) EXPECT_NEAR(rm[c], 0.125f, 1e-7);
}

TEST(BatchNorm, TrainMatchesTwoPassStatistics) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<float>({3, 4, 5, 6}, rng);
  auto gamma = random_tensor<float>({6}, rng);
  auto beta = random_tensor<float>({6}, rng);
  auto rm = Tensor<float>::zeros({6});
  auto rv = Tensor<float>::ones({6});
  auto y = ops::batch_norm(x, gamma, beta, rm, rv, ops::NormMode::train, 0.1f, 1e-5f);
  const Index rows = 3 * 4 * 5;
  for (Index c = 0; c < 6; ++c) {
    double mean = 0, var = 0;
    for (Index r = 0; r < rows; ++r) mean += x[r * 6 + c];
    mean /= rows;
    for (Index r = 0; r < rows; ++r) var += (x[r * 6 + c] - mean) * (x[r * 6 + c] - mean);
    for (Index r = 0; r < rows; ++r) {
      const double ref = (x[r * 6 + c] - mean) / std::sqrt(var / rows + 1e-5) * gamma[c] + beta[c];
      EXPECT_NEAR(y[r * 6 + c], ref, 1e-5);
    }
    EXPECT_NEAR(rm[c], 0.1 * mean, 1e-6);
    EXPECT_NEAR(rv[c], 0.9 + 0.1 * var / (rows - 1), 1e-6);
  }
}

TEST(Softmax, UniformAndNormalized) {
  Tensor<float> x(Shape{3}, {0, 0, 0});
  auto y = ops::softmax(x, 0);
  for (float v : y.data()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);

  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_tensor<float>({3, 4, 5}, rng, -6.0f, 6.0f);
    const int axis = trial % 3;
    auto s = ops::softmax(t, axis);
    for (float v : s.data()) EXPECT_GE(v, 0.0f);
    const Index len = t.dim(axis);
    Index inner = 1;
    for (int i = axis + 1; i < 3; ++i) inner *= t.dim(i);
    for (Index o = 0; o < t.numel() / (len * inner); ++o)
      for (Index in = 0; in < inner; ++in) {
        double total = 0;
        for (Index i = 0; i < len; ++i) total += s[o * len * inner + i * inner + in];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
  }
}

TEST(Elementwise, MulByOnesIsExact) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<float>({2, 3, 4}, rng);
  auto y = ops::mul(x, Tensor<float>::ones({2, 3, 4}));
  for (Index i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_THROW(ops::mul(x, Tensor<float>::ones({2, 3})), InputError);
}

TEST(CrossEntropy, ConfidentLogits) {
  const double big = 10.0;
  Tensor<double> logits(Shape{1, 2}, {big, -big});
  auto plain = ops::cross_entropy(logits, {0}, 0.0);
  EXPECT_NEAR(plain.item(), std::log1p(std::exp(-2 * big)), 1e-15);
  EXPECT_LT(plain.item(), 1e-8);
  // Direct formula: -(0.95 log p0 + 0.05 log p1) with p0 = 1/(1+e^-2L), p1 = e^-2L p0.
  const double log_p0 = -std::log1p(std::exp(-2 * big));
  const double log_p1 = -2 * big + log_p0;
  const double want = -(0.95 * log_p0 + 0.05 * log_p1);
  auto smooth = ops::cross_entropy(logits, {0}, 0.1);
  EXPECT_NEAR(smooth.item(), want, 1e-12);
  EXPECT_THROW(ops::cross_entropy(logits, {2}, 0.0), InputError);
}

TEST(GlobalAvgPool, AveragesSpatialPositions) {
  Tensor<float> x(Shape{1, 2, 2, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  auto y = ops::global_avg_pool(x);
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_FLOAT_EQ(y[0], 2.5f);
  EXPECT_FLOAT_EQ(y[1], 25.0f);
}

TEST(Attention, SingleTokenAndSymmetry) {
  // One token: probabilities [[1]], output equals v.
  std::mt19937_64 rng(10);
  auto qkv = random_tensor<double>({1, 1, 12}, rng);
  Tensor<double> probs;
  auto y = ops::attention(qkv, 2, 0.5, &probs);
  EXPECT_EQ(probs.numel(), 2);
  EXPECT_DOUBLE_EQ(probs[0], 1.0);
  for (Index c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y[c], qkv[8 + c]);
  // Two identical tokens attend uniformly.
  Tensor<double> twin(Shape{1, 2, 12});
  for (Index t = 0; t < 2; ++t)
    for (Index c = 0; c < 12; ++c) twin[t * 12 + c] = qkv[c];
  ops::attention(twin, 2, 0.5, &probs);
  for (double p : probs.data()) EXPECT_DOUBLE_EQ(p, 0.5);
}

TEST(Attention, MatchesNaivePerHeadLoop) {
  std::mt19937_64 rng(12);
  auto qkv = random_tensor<float>({1, 4, 24}, rng);
  auto y = ops::attention(qkv, 2, 0.5f);
  EXPECT_LE(max_abs_diff(y.data(), smt::testing::naive_attention(qkv, 2, 0.5)), 1e-6);
}

TEST(ChannelOps, SliceConcatPermute) {
  std::mt19937_64 rng(14);
  auto x = random_tensor<float>({2, 2, 6}, rng);
  auto a = ops::slice_channels(x, 0, 2);
  auto b = ops::slice_channels(x, 2, 4);
  auto y = ops::concat_channels<float>({a, b});
  for (Index i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  std::vector<Index> perm{5, 4, 3, 2, 1, 0};
  auto p = ops::permute_channels(x, perm);
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 6; ++c) EXPECT_EQ(p[r * 6 + c], x[r * 6 + 5 - c]);
  EXPECT_THROW(ops::slice_channels(x, 4, 3), InputError);
}

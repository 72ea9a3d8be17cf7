#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "smt/autograd/gradcheck.hpp"
#include "smt/model.hpp"
#include "test_util.hpp"

using namespace smt;
using smt::testing::max_abs_diff;
using smt::testing::random_tensor;

namespace {

template <typename T>
void set_delta(Conv2d<T>& conv) {
  std::fill(conv.weight.data().begin(), conv.weight.data().end(), T(0));
  const Index k = conv.kernel, c = conv.out;
  const Index center = (k / 2) * k + k / 2;
  for (Index i = 0; i < c; ++i) conv.weight[center * c + i] = T(1);
  if (conv.bias.defined()) std::fill(conv.bias.data().begin(), conv.bias.data().end(), T(0));
}

template <typename T>
void fill(Tensor<T>& t, T v) {
  std::fill(t.data().begin(), t.data().end(), v);
}

template <typename T>
Tensor<T> weighted_loss(const Tensor<T>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, random_tensor<T>(y.shape(), rng)));
}

// Gradcheck of every tensor a layer owns through `fn`.
template <typename Layer>
GradReport check_layer(const Layer& layer, Tensor<double> x, const std::function<Tensor<double>(const Tensor<double>&)>& fn) {
  NamedTensors<double> ts;
  layer.collect("layer", ts);
  ts.push_back({"input", x});
  return grad_check<double>(ts, [&] { return weighted_loss(fn(x), 5); }, GradCheckOptions{1e-5, 1e-5, 20, 1});
}

void expect_pass(const GradReport& r) {
  for (const auto& e : r.entries)
    EXPECT_LE(e.max_rel_error, r.tolerance) << e.name << " worst index " << e.worst_index << ": " << e.worst_analytic << " vs "
                                            << e.worst_numeric;
}

}  // namespace

// ---------------------------------------------------------------------------
// MHMC
// ---------------------------------------------------------------------------

TEST(Mhmc, FourHeadsOverSixtyFourChannels) {
  Rng rng(1);
  Mhmc<float> m(64, 4, HeadSplit::even, true, rng);
  EXPECT_EQ(m.kernels, (std::vector<Index>{3, 5, 7, 9}));
  EXPECT_EQ(m.head_sizes, (std::vector<Index>{16, 16, 16, 16}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(m.convs[i].weight.shape(), (Shape{m.kernels[i], m.kernels[i], 1, 16}));
}

TEST(Mhmc, SingleHeadIsOneDepthwise3x3) {
  Rng rng(1);
  Mhmc<float> m(32, 1, HeadSplit::even, true, rng);
  ASSERT_EQ(m.convs.size(), 1u);
  EXPECT_EQ(m.kernels[0], 3);
  EXPECT_EQ(m.convs[0].params.groups, 32);
}

TEST(Mhmc, DeltaKernelsGiveIdentity) {
  Rng rng(2);
  Mhmc<float> m(12, 3, HeadSplit::even, true, rng);
  for (auto& c : m.convs) set_delta(c);
  std::mt19937_64 g(3);
  auto x = random_tensor<float>({2, 6, 5, 12}, g);
  auto y = m.forward(x);
  for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
}

TEST(Mhmc, RejectsIndivisibleChannels) {
  Rng rng(1);
  EXPECT_THROW(Mhmc<float>(10, 4, HeadSplit::even, true, rng), ConfigError);
  Mhmc<float> balanced(10, 4, HeadSplit::balanced, true, rng);
  EXPECT_EQ(balanced.head_sizes, (std::vector<Index>{3, 3, 2, 2}));
}

TEST(Mhmc, MatchesPerHeadNaiveOracle) {
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 25; ++trial) {
    const Index heads = std::uniform_int_distribution<int>(1, 4)(g);
    const Index c = heads * std::uniform_int_distribution<int>(1, 2)(g);
    const Index h = std::uniform_int_distribution<int>(1, 8)(g), w = std::uniform_int_distribution<int>(1, 8)(g);
    Rng rng(static_cast<std::uint64_t>(trial));
    Mhmc<float> m(c, heads, HeadSplit::even, true, rng);
    for (auto& conv : m.convs)
      for (auto& b : conv.bias.data()) b = static_cast<float>(rng.uniform(-1, 1));
    auto x = random_tensor<float>({1, h, w, c}, g);
    auto y = m.forward(x);
    const Index per = c / heads;
    for (Index j = 0; j < heads; ++j) {
      // Slice the head's channels by hand, run the loop oracle, compare.
      Tensor<float> xs(Shape{1, h, w, per});
      for (Index p = 0; p < h * w; ++p)
        for (Index i = 0; i < per; ++i) xs[p * per + i] = x[p * c + j * per + i];
      const auto& conv = m.convs[static_cast<std::size_t>(j)];
      Index oh, ow;
      auto ref = smt::testing::naive_conv2d(xs, conv.weight, conv.bias, 1, conv.kernel / 2, per, oh, ow);
      ASSERT_EQ(oh, h);
      for (Index p = 0; p < h * w; ++p)
        for (Index i = 0; i < per; ++i)
          EXPECT_NEAR(y[p * c + j * per + i], ref[static_cast<std::size_t>(p * per + i)], 1e-6) << "trial " << trial;
    }
  }
}

// ---------------------------------------------------------------------------
// SAA
// ---------------------------------------------------------------------------

TEST(SaaShuffle, GroupMajorOrder) {
  EXPECT_EQ(saa_permutation(split_heads(8, 2, HeadSplit::even)), (std::vector<Index>{0, 4, 1, 5, 2, 6, 3, 7}));
  EXPECT_EQ(saa_permutation(split_heads(4, 4, HeadSplit::even)), (std::vector<Index>{0, 1, 2, 3}));
  Tensor<float> x(Shape{1, 1, 1, 8}, {0, 1, 2, 3, 4, 5, 6, 7});
  auto y = saa_shuffle(x, 2);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{0, 4, 1, 5, 2, 6, 3, 7}));
  EXPECT_THROW(saa_shuffle(x, 3), ConfigError);
}

TEST(SaaShuffle, FormulaAndBijection) {
  for (Index c : {4, 8, 12, 64, 256})
    for (Index n : {1, 2, 4}) {
      const auto perm = saa_permutation(split_heads(c, n, HeadSplit::even));
      const Index m = c / n;
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) EXPECT_EQ(perm[static_cast<std::size_t>(i * n + j)], j * m + i);
      auto sorted = perm;
      std::sort(sorted.begin(), sorted.end());
      std::vector<Index> iota(static_cast<std::size_t>(c));
      std::iota(iota.begin(), iota.end(), Index{0});
      EXPECT_EQ(sorted, iota);
    }
  // Uneven heads still yield a permutation.
  auto perm = saa_permutation(split_heads(64, 6, HeadSplit::balanced));
  std::sort(perm.begin(), perm.end());
  for (Index i = 0; i < 64; ++i) EXPECT_EQ(perm[static_cast<std::size_t>(i)], i);
  EXPECT_EQ(saa_group_sizes(split_heads(64, 6, HeadSplit::balanced)).size(), 11u);
}

TEST(SaaShuffle, InverseRestoresValues) {
  std::mt19937_64 g(4);
  auto x = random_tensor<double>({2, 3, 3, 24}, g);
  const auto perm = saa_permutation(split_heads(24, 4, HeadSplit::even));
  auto back = ops::permute_channels(ops::permute_channels(x, perm), invert_permutation(perm));
  for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(back[i], x[i]);
}

TEST(Saa, BottleneckParameterCounts) {
  Rng rng(1);
  Saa<float> saa(64, 4, 2, SaaWiring::bottleneck, HeadSplit::even, false, rng);
  EXPECT_EQ(saa.expand.param_count() + saa.reduce.param_count(), 16 * (4 * 8 + 8 * 4));
  EXPECT_EQ(saa.expand.param_count() + saa.reduce.param_count(), 1024);
  EXPECT_EQ(saa.inter.param_count(), 64 * 64);
  // Per-group channel trajectory 4 -> 8 -> 4.
  EXPECT_EQ(saa.expand.layout.in_sizes[0], 4);
  EXPECT_EQ(saa.expand.layout.out_sizes[0], 8);
  EXPECT_EQ(saa.reduce.layout.out_sizes[0], 4);
  EXPECT_EQ(saa.expand.layout.in_sizes.size(), 16u);
}

TEST(Saa, ExpandMixParameterCounts) {
  Rng rng(1);
  Saa<float> saa(64, 4, 2, SaaWiring::expand_mix, HeadSplit::even, false, rng);
  EXPECT_EQ(saa.expand.param_count(), 16 * 4 * 8);
  EXPECT_FALSE(saa.reduce.weight.defined());
  EXPECT_EQ(saa.inter.param_count(), 128 * 64);
}

TEST(Saa, ConstructedIdentityEqualsShuffle) {
  const Index c = 16, n = 4, e = 2, gsize = n;
  Rng rng(1);
  Saa<double> saa(c, n, e, SaaWiring::bottleneck, HeadSplit::even, false, rng);
  saa.activation = false;
  // expand = [I; I] and reduce = [I/2, I/2] in every group.
  fill(saa.expand.weight, 0.0);
  fill(saa.reduce.weight, 0.0);
  const Index groups = c / n;
  for (Index g = 0; g < groups; ++g) {
    const Index ebase = g * gsize * e * gsize, rbase = g * e * gsize * gsize;
    for (Index i = 0; i < gsize; ++i) {
      saa.expand.weight[ebase + i * (e * gsize) + i] = 1;
      saa.expand.weight[ebase + i * (e * gsize) + gsize + i] = 1;
      saa.reduce.weight[rbase + i * gsize + i] = 0.5;
      saa.reduce.weight[rbase + (gsize + i) * gsize + i] = 0.5;
    }
  }
  fill(saa.inter.weight, 0.0);
  for (Index i = 0; i < c; ++i) saa.inter.weight[i * c + i] = 1;
  std::mt19937_64 g(5);
  auto x = random_tensor<double>({2, 3, 3, c}, g);
  auto y = saa.forward(x);
  auto shuffled = saa.shuffle(x);
  for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], shuffled[i]);
}

TEST(Saa, MatchesDenseOracle) {
  // Grouped expand written as a dense block-diagonal matrix, then the oracle
  // applies shuffle, matmul, GELU, matmul with naive loops.
  std::mt19937_64 g(8);
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = std::uniform_int_distribution<int>(1, 4)(g);
    const Index c = n * std::uniform_int_distribution<int>(1, 3)(g);
    const Index e = std::uniform_int_distribution<int>(1, 3)(g);
    Rng rng(static_cast<std::uint64_t>(trial + 100));
    Saa<float> saa(c, n, e, SaaWiring::expand_mix, HeadSplit::even, true, rng);
    for (auto& b : saa.expand.bias.data()) b = static_cast<float>(rng.uniform(-1, 1));
    auto x = random_tensor<float>({1, 2, 3, c}, g);
    auto y = saa.forward(x);
    const Index rows = 6, m = c / n;
    Tensor<float> dense(Shape{c, e * c});
    for (Index grp = 0; grp < m; ++grp)
      for (Index i = 0; i < n; ++i)
        for (Index o = 0; o < e * n; ++o) dense[(grp * n + i) * (e * c) + grp * e * n + o] = saa.expand.weight[grp * n * e * n + i * e * n + o];
    Tensor<float> xs(Shape{rows, c});
    for (Index r = 0; r < rows; ++r)
      for (Index o = 0; o < c; ++o) xs[r * c + o] = x[r * c + (o % n) * m + o / n];
    auto h = smt::testing::naive_matmul(xs, dense, saa.expand.bias);
    Tensor<float> ht(Shape{rows, e * c}, h);
    for (auto& v : ht.data()) v = 0.5f * v * (1.0f + std::erf(v / std::sqrt(2.0f)));
    auto ref = smt::testing::naive_matmul(ht, saa.inter.weight, saa.inter.bias);
    EXPECT_LE(max_abs_diff(y.data(), ref), 1e-6) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------
// Aggregation variants
// ---------------------------------------------------------------------------

TEST(Aggregation, NoneIsIdentityAndIbnCount) {
  Rng rng(1);
  Aggregation<float> none(AggregationKind::none, 8, 4, 2, SaaWiring::expand_mix, HeadSplit::even, true, rng);
  std::mt19937_64 g(1);
  auto x = random_tensor<float>({1, 2, 2, 8}, g);
  EXPECT_TRUE(none.forward(x).same(x));
  Aggregation<float> ibn(AggregationKind::ibn, 64, 4, 2, SaaWiring::expand_mix, HeadSplit::even, false, rng);
  EXPECT_EQ(ibn.fc1.param_count() + ibn.fc2.param_count(), 16384);
}

TEST(Aggregation, ParameterOrderingAt256) {
  auto params = [](AggregationKind k) {
    Rng rng(1);
    rng.draws = false;
    Aggregation<float> a(k, 256, 4, 2, SaaWiring::expand_mix, HeadSplit::even, true, rng);
    NamedTensors<float> ts;
    a.collect("a", ts);
    std::int64_t n = 0;
    for (auto& t : ts) n += t.tensor.numel();
    return n;
  };
  EXPECT_LT(params(AggregationKind::none), params(AggregationKind::single_linear));
  EXPECT_LT(params(AggregationKind::single_linear), params(AggregationKind::two_linears));
  EXPECT_LE(params(AggregationKind::two_linears), params(AggregationKind::saa));
  EXPECT_LT(params(AggregationKind::saa), params(AggregationKind::ibn));
}

// ---------------------------------------------------------------------------
// SAM
// ---------------------------------------------------------------------------

TEST(Sam, ModulatorOfOneLeavesValue) {
  Rng rng(3);
  Sam<double> sam(16, SamOptions{}, rng);
  fill(sam.agg.saa.inter.weight, 0.0);
  fill(sam.agg.saa.inter.bias, 1.0);
  std::mt19937_64 g(2);
  auto x = random_tensor<double>({1, 4, 4, 16}, g);
  Captures<double> caps;
  caps.sam = true;
  ForwardContext<double> ctx;
  ctx.captures = &caps;
  Tensor<double> z;
  sam.forward(x, ctx, &z);
  const auto& c = caps.sams.at(0);
  for (Index i = 0; i < z.numel(); ++i) {
    ASSERT_EQ(c.modulator[i], 1.0);
    ASSERT_EQ(z[i], c.value[i]);
  }
}

TEST(Sam, ZeroInputBiasFreeGivesZero) {
  Rng rng(3);
  SamOptions o;
  o.bias = false;
  Sam<double> sam(16, o, rng);
  ForwardContext<double> ctx;
  Tensor<double> z;
  auto y = sam.forward(Tensor<double>(Shape{1, 3, 3, 16}), ctx, &z);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sam, ZEqualsModulatorTimesValueExactly) {
  for (auto agg : {AggregationKind::saa, AggregationKind::ibn, AggregationKind::none}) {
    Rng rng(9);
    SamOptions o;
    o.aggregation = agg;
    Sam<double> sam(24, o, rng);
    std::mt19937_64 g(3);
    auto x = random_tensor<double>({2, 5, 4, 24}, g);
    Captures<double> caps;
    caps.sam = true;
    ForwardContext<double> ctx;
    ctx.captures = &caps;
    sam.forward(x, ctx);
    const auto& c = caps.sams.at(0);
    EXPECT_EQ(c.modulator.shape(), x.shape());
    for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(c.modulated[i], c.modulator[i] * c.value[i]);
    EXPECT_EQ(c.heads.size(), 4u);
  }
}

TEST(Sam, GradientCheck) {
  Rng rng(4);
  Sam<double> sam(16, SamOptions{}, rng);
  // Non-zero biases so every bias path is exercised.
  NamedTensors<double> ts;
  sam.collect("", ts);
  for (auto& nt : ts)
    if (nt.name.find("bias") != std::string::npos)
      for (auto& v : nt.tensor.data()) v = rng.uniform(-0.5, 0.5);
  std::mt19937_64 g(6);
  auto x = random_tensor<double>({2, 5, 5, 16}, g);
  ForwardContext<double> ctx;
  expect_pass(check_layer(sam, x, [&](const Tensor<double>& in) { return sam.forward(in, ctx); }));
}

TEST(Sam, BottleneckWiringGradientCheck) {
  Rng rng(5);
  SamOptions o;
  o.wiring = SaaWiring::bottleneck;
  o.heads = 3;
  o.split = HeadSplit::balanced;
  Sam<double> sam(10, o, rng);
  std::mt19937_64 g(6);
  auto x = random_tensor<double>({1, 4, 4, 10}, g);
  ForwardContext<double> ctx;
  expect_pass(check_layer(sam, x, [&](const Tensor<double>& in) { return sam.forward(in, ctx); }));
}

// ---------------------------------------------------------------------------
// MSA
// ---------------------------------------------------------------------------

TEST(Msa, SingleTokenOutputsProjectedValue) {
  Rng rng(1);
  Msa<double> msa(8, 2, true, rng);
  for (auto& b : msa.qkv.bias.data()) b = rng.uniform(-1, 1);
  std::mt19937_64 g(1);
  auto x = random_tensor<double>({1, 1, 1, 8}, g);
  Captures<double> caps;
  caps.attention = true;
  ForwardContext<double> ctx;
  ctx.captures = &caps;
  auto y = msa.forward(x, ctx);
  const auto& probs = caps.attentions.at(0).probs;
  EXPECT_EQ(probs.numel(), 2);
  for (double p : probs.data()) EXPECT_DOUBLE_EQ(p, 1.0);
  auto qkv = msa.qkv.forward(x);
  auto v = ops::slice_channels(qkv, 16, 8);
  auto ref = msa.proj.forward(v);
  for (Index i = 0; i < 8; ++i) EXPECT_NEAR(y[i], ref[i], 1e-15);
}

TEST(Msa, IdenticalTokensAttendUniformly) {
  Rng rng(1);
  Msa<double> msa(8, 2, true, rng);
  Tensor<double> x(Shape{1, 1, 2, 8});
  for (Index c = 0; c < 8; ++c) x[c] = x[8 + c] = 0.1 * static_cast<double>(c);
  Captures<double> caps;
  caps.attention = true;
  ForwardContext<double> ctx;
  ctx.captures = &caps;
  msa.forward(x, ctx);
  for (double p : caps.attentions.at(0).probs.data()) EXPECT_DOUBLE_EQ(p, 0.5);
}

TEST(Msa, MatchesNaiveOracle) {
  Rng rng(7);
  Msa<float> msa(8, 2, true, rng);
  for (auto& b : msa.qkv.bias.data()) b = static_cast<float>(rng.uniform(-1, 1));
  std::mt19937_64 g(2);
  auto x = random_tensor<float>({1, 2, 2, 8}, g);
  ForwardContext<float> ctx;
  auto y = msa.forward(x, ctx);
  Tensor<float> flat(Shape{4, 8}, std::vector<float>(x.data().begin(), x.data().end()));
  auto qkv = smt::testing::naive_matmul(flat, msa.qkv.weight, msa.qkv.bias);
  auto att = smt::testing::naive_attention(Tensor<float>(Shape{1, 4, 24}, qkv), 2, 0.5);
  auto ref = smt::testing::naive_matmul(Tensor<float>(Shape{4, 8}, att), msa.proj.weight, msa.proj.bias);
  EXPECT_LE(max_abs_diff(y.data(), ref), 1e-6);
  EXPECT_THROW(Msa<float>(8, 3, true, rng), ConfigError);
}

TEST(Msa, GradientCheck) {
  Rng rng(8);
  Msa<double> msa(12, 3, true, rng);
  std::mt19937_64 g(6);
  auto x = random_tensor<double>({2, 3, 3, 12}, g);
  ForwardContext<double> ctx;
  expect_pass(check_layer(msa, x, [&](const Tensor<double>& in) { return msa.forward(in, ctx); }));
}

// ---------------------------------------------------------------------------
// FFN
// ---------------------------------------------------------------------------

TEST(Ffn, ZeroInputBiasFree) {
  Rng rng(1);
  Ffn<float> ffn(8, 4, false, rng);
  auto y = ffn.forward(Tensor<float>(Shape{1, 3, 3, 8}));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  Ffn<float> wide(64, 4, true, rng);
  EXPECT_EQ(wide.fc1.out, 256);
  EXPECT_EQ(wide.fc2.out, 64);
}

TEST(Ffn, ZeroDepthwiseIsPlainMlp) {
  Rng rng(2);
  Ffn<double> ffn(6, 2, true, rng);
  fill(ffn.dw.weight, 0.0);
  fill(ffn.dw.bias, 0.0);
  for (auto& b : ffn.fc1.bias.data()) b = rng.uniform(-1, 1);
  std::mt19937_64 g(2);
  auto x = random_tensor<double>({1, 3, 3, 6}, g);
  auto y = ffn.forward(x);
  Tensor<double> flat(Shape{9, 6}, std::vector<double>(x.data().begin(), x.data().end()));
  auto h = smt::testing::naive_matmul(flat, ffn.fc1.weight, ffn.fc1.bias);
  for (auto& v : h) v = 0.5 * v * (1 + std::erf(v / std::sqrt(2.0)));
  auto ref = smt::testing::naive_matmul(Tensor<double>(Shape{9, 12}, h), ffn.fc2.weight, ffn.fc2.bias);
  EXPECT_LE(max_abs_diff(y.data(), ref), 1e-12);
}

TEST(Ffn, GradientCheck) {
  Rng rng(9);
  Ffn<double> ffn(4, 2, true, rng);
  std::mt19937_64 g(6);
  auto x = random_tensor<double>({2, 4, 4, 4}, g);
  expect_pass(check_layer(ffn, x, [&](const Tensor<double>& in) { return ffn.forward(in); }));
}

// ---------------------------------------------------------------------------
// Residual block and drop path
// ---------------------------------------------------------------------------

namespace {
Block<double> make_block(BlockKind kind, double drop, std::uint64_t seed) {
  Rng rng(seed);
  return Block<double>(kind, 16, SamOptions{}, 4, 2, drop, 3, rng);
}
}  // namespace

TEST(Block, FullyDroppedIsIdentity) {
  for (auto kind : {BlockKind::sam, BlockKind::msa}) {
    auto b = make_block(kind, 1.0, 1);
    std::mt19937_64 g(1);
    auto x = random_tensor<double>({3, 4, 4, 16}, g);
    ForwardContext<double> ctx;
    ctx.mode = ops::NormMode::train;
    auto y = b.forward(x, ctx);
    for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
  }
}

TEST(Block, ZeroOutputProjectionsGiveIdentity) {
  for (auto kind : {BlockKind::sam, BlockKind::msa}) {
    auto b = make_block(kind, 0.0, 2);
    auto& proj = kind == BlockKind::sam ? b.sam.proj : b.msa.proj;
    fill(proj.weight, 0.0);
    fill(proj.bias, 0.0);
    fill(b.ffn.fc2.weight, 0.0);
    fill(b.ffn.fc2.bias, 0.0);
    std::mt19937_64 g(1);
    auto x = random_tensor<double>({1, 4, 4, 16}, g);
    ForwardContext<double> ctx;
    auto y = b.forward(x, ctx);
    for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
  }
}

TEST(Block, EvalModeMatchesUnscaledResidualFormula) {
  auto b = make_block(BlockKind::sam, 0.3, 3);
  std::mt19937_64 g(1);
  auto x = random_tensor<double>({2, 4, 4, 16}, g);
  ForwardContext<double> ctx;
  auto y = b.forward(x, ctx);
  auto h = ops::add(x, b.sam.forward(b.norm1.forward(x), ctx));
  auto ref = ops::add(h, b.ffn.forward(b.norm2.forward(h)));
  for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], ref[i]);
}

TEST(DropPath, KeepProbabilityDivision) {
  const double p = 0.25;
  const Index n = 4000;
  Tensor<double> branch(Shape{n, 1}, 1.0);
  ForwardContext<double> ctx;
  ctx.mode = ops::NormMode::train;
  ctx.drop_seed = 77;
  auto y = drop_path(branch, p, ctx, 0, 0);
  double mean = 0;
  Index kept = 0;
  for (Index s = 0; s < n; ++s) {
    ASSERT_TRUE(y[s] == 0.0 || y[s] == 1.0 / (1.0 - p));
    kept += y[s] != 0.0;
    mean += y[s];
  }
  mean /= static_cast<double>(n);
  // E[factor] = (1 - p) * 1/(1 - p) = 1; binomial std of the mean ~ 0.0091.
  EXPECT_NEAR(mean, 1.0, 0.04);
  EXPECT_NEAR(static_cast<double>(kept) / static_cast<double>(n), 1 - p, 0.03);
  ctx.mode = ops::NormMode::eval;
  EXPECT_TRUE(drop_path(branch, p, ctx, 0, 0).same(branch));
}

TEST(Block, GradientChecks) {
  for (auto kind : {BlockKind::sam, BlockKind::msa}) {
    auto b = make_block(kind, 0.0, 4);
    std::mt19937_64 g(6);
    auto x = random_tensor<double>({2, 4, 4, 16}, g);
    ForwardContext<double> ctx;
    expect_pass(check_layer(b, x, [&](const Tensor<double>& in) { return b.forward(in, ctx); }));
  }
}

TEST(StemAndDownsample, GradientChecks) {
  Rng rng(3);
  Stem<double> stem(3, 4, 3, true, rng);
  std::mt19937_64 g(6);
  // Default init leaves the LN input with a tiny spread, where the h^2 term
  // of the central difference dominates; wider weights keep it well posed.
  stem.conv1.weight = random_tensor<double>(stem.conv1.weight.shape(), g, -0.5, 0.5);
  stem.conv2.weight = random_tensor<double>(stem.conv2.weight.shape(), g, -0.5, 0.5);
  auto x = random_tensor<double>({2, 8, 8, 3}, g);
  stem.bn.running_var[0] = 0.5;
  expect_pass(check_layer(stem, x, [&](const Tensor<double>& in) { return stem.forward(in, ops::NormMode::eval); }));
  expect_pass(check_layer(stem, x, [&](const Tensor<double>& in) {
    // Fresh buffers per call so finite differences see the same statistics.
    Stem<double> copy = stem;
    copy.bn.running_mean = stem.bn.running_mean.clone();
    copy.bn.running_var = stem.bn.running_var.clone();
    return copy.forward(in, ops::NormMode::train);
  }));
  Downsample<double> down(4, 6, true, rng);
  auto y = random_tensor<double>({1, 6, 6, 4}, g);
  expect_pass(check_layer(down, y, [&](const Tensor<double>& in) { return down.forward(in); }));
}

// ---------------------------------------------------------------------------
// Whole-model shapes
// ---------------------------------------------------------------------------

TEST(Model, StageResolutionsAt224And64) {
  auto m = build_model<float>(preset("smt-micro"), 0);
  for (auto [size, expect] : {std::pair<Index, std::vector<Index>>{224, {56, 28, 14, 7}}, {64, {16, 8, 4, 2}}}) {
    std::mt19937_64 g(1);
    auto x = random_tensor<float>({1, size, size, 3}, g);
    ForwardContext<float> ctx;
    std::vector<Tensor<float>> outs;
    auto logits = m.forward(x, ctx, &outs);
    ASSERT_EQ(outs.size(), 4u);
    for (std::size_t s = 0; s < 4; ++s) {
      EXPECT_EQ(outs[s].dim(1), expect[s]);
      EXPECT_EQ(outs[s].dim(2), expect[s]);
      EXPECT_EQ(outs[s].dim(3), m.config.stages[s].dim);
    }
    EXPECT_EQ(logits.shape(), (Shape{1, 2}));
  }
}

TEST(Model, RejectsIndivisibleInput) {
  auto m = build_model<float>(preset("smt-micro"), 0);
  try {
    m.forward(Tensor<float>(Shape{1, 65, 64, 3}));
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("32"), std::string::npos);
  }
}

TEST(Model, TinyPresetProducesThousandLogits) {
  auto m = build_model<float>(preset("smt-t"), 0);
  std::mt19937_64 g(1);
  auto x = random_tensor<float>({1, 224, 224, 3}, g);
  auto logits = m.forward(x);
  EXPECT_EQ(logits.shape(), (Shape{1, 1000}));
  for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, ForwardIsBitIdenticalForFixedSeed) {
  auto a = build_model<float>(preset("smt-micro"), 42);
  auto b = build_model<float>(preset("smt-micro"), 42);
  std::mt19937_64 g(9);
  auto x = random_tensor<float>({2, 64, 64, 3}, g);
  auto ya = a.forward(x), yb = b.forward(x);
  for (Index i = 0; i < ya.numel(); ++i) ASSERT_EQ(ya[i], yb[i]);
}

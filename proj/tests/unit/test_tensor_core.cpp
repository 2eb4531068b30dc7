#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dbconformer/gradcheck.hpp"
#include "dbconformer/layers.hpp"
#include "dbconformer/ops.hpp"
#include "dbconformer/optim.hpp"
#include "test_support.hpp"

using namespace dbc;
using dbc::test::fd_max_magnitude;
using dbc::test::fd_max_rel_error;
using dbc::test::random_tensor;

namespace {

// Random linear functional of t so every output coordinate carries gradient.
Tensor probe(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor r = random_tensor(t.shape(), rng, 1.0, false);
  return ops::sum(ops::mul(t, r));
}

void expect_values(const Tensor& t, std::initializer_list<double> want, double tol = 1e-12) {
  ASSERT_EQ(t.size(), want.size());
  std::size_t i = 0;
  for (double w : want) EXPECT_NEAR(t[i++], w, tol) << "index " << i - 1;
}

}  // namespace

// --- matmul ----------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  expect_values(ops::matmul(eye, m), {1, 2, 3, 4});
}

TEST(Matmul, Projector) {
  Tensor p({2, 2}, {1, 0, 0, 0});
  Tensor v({2, 1}, {5, 7});
  expect_values(ops::matmul(p, v), {5, 0});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a({2, 3}), b({2, 3});
  try {
    ops::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    EXPECT_LE(fd_max_rel_error([&] { return probe(ops::matmul(a, b)); }, {a, b}, 1e-5), 1e-6);
  }
}

TEST(Bmm, TransposedAndPlainGradients) {
  Rng rng(3);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 5, 4}, rng), c = random_tensor({2, 4, 5}, rng);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::bmm(a, b, true)); }, {a, b}, 1e-5), 1e-6);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::bmm(a, c)); }, {a, c}, 1e-5), 1e-6);
}

TEST(Linear, GradientWithAndWithoutBias) {
  Rng rng(4);
  Tensor x = random_tensor({2, 3, 5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::linear(x, w, b)); }, {x, w, b}, 1e-5), 1e-6);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::linear(x, w)); }, {x, w}, 1e-5), 1e-6);
}

// --- conv1d ----------------------------------------------------------------

TEST(Conv1d, IdentityKernel) {
  Tensor x({1, 1, 4}, {1, 2, 3, 4});
  Tensor w({1, 1, 1}, {1});
  expect_values(ops::conv1d(x, w), {1, 2, 3, 4});
}

TEST(Conv1d, MovingAverage) {
  Tensor x({1, 1, 4}, {1, 2, 3, 4});
  Tensor w({1, 1, 2}, {0.5, 0.5});
  expect_values(ops::conv1d(x, w), {1.5, 2.5, 3.5});
}

TEST(Conv1d, OutputLengthFollowsStridePaddingFormula) {
  Rng rng(5);
  for (std::size_t T : {7u, 10u, 16u}) {
    for (std::size_t K : {1u, 3u, 4u}) {
      for (std::size_t s : {1u, 2u, 3u}) {
        for (std::size_t p : {0u, 1u, 2u}) {
          Tensor x = random_tensor({1, 2, T}, rng, 1.0, false);
          Tensor w = random_tensor({2, 2, K}, rng, 1.0, false);
          Tensor y = ops::conv1d(x, w, {}, ops::Conv1dOptions::padded(p, 1, s));
          EXPECT_EQ(y.dim(2), (T + 2 * p - K) / s + 1);
        }
      }
    }
  }
}

TEST(Conv1d, DepthwiseIdentityKernelsAreIdentityMap) {
  Rng rng(6);
  Tensor x = random_tensor({2, 5, 9}, rng, 1.0, false);
  Tensor w({5, 1, 3}, 0.0);
  for (std::size_t c = 0; c < 5; ++c) w[c * 3 + 1] = 1.0;
  Tensor y = ops::conv1d(x, w, {}, ops::Conv1dOptions::same(3, 5));
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv1d, SamePaddingPreservesLengthForEvenKernels) {
  Rng rng(7);
  Tensor x = random_tensor({1, 3, 20}, rng, 1.0, false);
  Tensor w = random_tensor({3, 1, 22}, rng, 1.0, false);
  EXPECT_EQ(ops::conv1d(x, w, {}, ops::Conv1dOptions::same(22, 3)).dim(2), 20u);
}

TEST(Conv1d, GroupingAndKernelErrors) {
  Tensor x({1, 3, 8});
  EXPECT_THROW(ops::conv1d(x, Tensor({2, 1, 3}), {}, {2, 1, 0, 0}), DimensionError);
  EXPECT_THROW(ops::conv1d(x, Tensor({3, 3, 9})), DimensionError);
  EXPECT_NO_THROW(ops::conv1d(x, Tensor({3, 3, 9}), {}, ops::Conv1dOptions::padded(1)));
}

TEST(Conv1d, GroupedGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor x = random_tensor({2, 4, 10}, rng), w = random_tensor({4, 2, 3}, rng), b = random_tensor({4}, rng);
    auto f = [&] { return probe(ops::conv1d(x, w, b, {2, 1, 1, 1})); };
    EXPECT_LE(fd_max_rel_error(f, {x, w, b}, 1e-5), 1e-6);
  }
}

TEST(Conv1d, StridedGradientMatchesFiniteDifferences) {
  Rng rng(8);
  Tensor x = random_tensor({1, 2, 11}, rng), w = random_tensor({3, 2, 4}, rng);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::conv1d(x, w, {}, {1, 2, 2, 1})); }, {x, w}, 1e-5), 1e-6);
}

TEST(Conv1dGlobalMean, EqualsConvolutionThenTimeMean) {
  Rng rng(9);
  Tensor x = random_tensor({6, 1, 40}, rng), w = random_tensor({16, 1, 25}, rng), b = random_tensor({16}, rng);
  Tensor fused = ops::conv1d_global_mean(x, w, b);
  Tensor reference = ops::mean(ops::conv1d(x, w, b), 2);
  ASSERT_EQ(fused.shape(), reference.shape());
  for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_NEAR(fused[i], reference[i], 1e-12);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::conv1d_global_mean(x, w, b)); }, {x, w, b}, 1e-5), 1e-6);
  EXPECT_THROW(ops::conv1d_global_mean(Tensor({1, 1, 10}), w), DimensionError);
}

// --- batchnorm ---------------------------------------------------------------

TEST(BatchNorm, ConstantInputMapsToBeta) {
  Tensor x({4, 2, 5}, 3.0);
  ops::BatchNormStats stats(2);
  Tensor y = ops::batchnorm1d(x, Tensor({2}, 1.0), Tensor({2}, 0.0), stats, Mode::train);
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(BatchNorm, StandardizesEachFeature) {
  Rng rng(10);
  const std::size_t B = 8, F = 3, T = 50;
  Tensor x({B, F, T});
  for (auto& v : x.data()) v = rng.normal(5.0, 2.0);
  ops::BatchNormStats stats(F);
  Tensor y = ops::batchnorm1d(x, Tensor({F}, 1.0), Tensor({F}, 0.0), stats, Mode::train);
  for (std::size_t f = 0; f < F; ++f) {
    double s = 0, ss = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t) s += y[(b * F + f) * T + t];
    const double m = s / (B * T);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t) ss += std::pow(y[(b * F + f) * T + t] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(ss / (B * T)), 1.0, 1e-5);
  }
}

TEST(BatchNorm, GammaBetaSetOutputMoments) {
  Rng rng(11);
  Tensor x = random_tensor({6, 2, 20}, rng, 3.0, false);
  ops::BatchNormStats stats(2);
  Tensor y = ops::batchnorm1d(x, Tensor({2}, {2.0, 0.5}), Tensor({2}, {1.0, -3.0}), stats, Mode::train);
  for (std::size_t f = 0; f < 2; ++f) {
    double s = 0, ss = 0;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t t = 0; t < 20; ++t) s += y[(b * 2 + f) * 20 + t];
    const double m = s / 120;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t t = 0; t < 20; ++t) ss += std::pow(y[(b * 2 + f) * 20 + t] - m, 2);
    EXPECT_NEAR(m, f == 0 ? 1.0 : -3.0, 1e-12);
    EXPECT_NEAR(ss / 120, f == 0 ? 4.0 : 0.25, 1e-3);
  }
}

TEST(BatchNorm, TrainGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor x = random_tensor({3, 2, 5}, rng), g = random_tensor({2}, rng), b = random_tensor({2}, rng);
    ops::BatchNormStats stats(2);
    auto f = [&] { return probe(ops::batchnorm1d(x, g, b, stats, Mode::train)); };
    EXPECT_LE(fd_max_rel_error(f, {x, g, b}, 1e-5), 1e-5);
  }
}

TEST(BatchNorm, PlainSumHasZeroInputGradient) {
  // Sum of train-mode outputs is B*T*sum(beta), independent of x.
  Rng rng(12);
  Tensor x = random_tensor({3, 2, 5}, rng);
  Tensor gamma = random_tensor({2}, rng), beta = random_tensor({2}, rng);
  ops::BatchNormStats stats(2);
  Graph g;
  Tensor y;
  {
    Graph::Scope s(g);
    y = ops::sum(ops::batchnorm1d(x, gamma, beta, stats, Mode::train));
  }
  g.backward(y);
  for (double v : x.grad()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(BatchNorm, EvalGradientMatchesFiniteDifferences) {
  Rng rng(13);
  Tensor x = random_tensor({3, 2, 5}, rng), g = random_tensor({2}, rng), b = random_tensor({2}, rng);
  ops::BatchNormStats stats(2);
  stats.running_mean[0] = 0.3;
  stats.running_var[1] = 2.0;
  auto f = [&] { return probe(ops::batchnorm1d(x, g, b, stats, Mode::eval)); };
  EXPECT_LE(fd_max_rel_error(f, {x, g, b}, 1e-5), 1e-6);
}

TEST(BatchNorm, RejectsTooSmallBatchInTrainMode) {
  ops::BatchNormStats stats(2);
  EXPECT_THROW(ops::batchnorm1d(Tensor({1, 2}), Tensor({2}, 1.0), Tensor({2}), stats, Mode::train), DimensionError);
  EXPECT_NO_THROW(ops::batchnorm1d(Tensor({1, 2}), Tensor({2}, 1.0), Tensor({2}), stats, Mode::eval));
}

TEST(BatchNorm, RunningStatsUseMomentumAndUnbiasedVariance) {
  Tensor x({2, 1, 2}, {1, 2, 3, 4});
  ops::BatchNormStats stats(1);
  ops::batchnorm1d(x, Tensor({1}, 1.0), Tensor({1}), stats, Mode::train, 1e-5, 0.1);
  EXPECT_NEAR(stats.running_mean[0], 0.1 * 2.5, 1e-15);
  EXPECT_NEAR(stats.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);
}

// --- activations, softmax, pooling -------------------------------------------

TEST(Activation, FixedPointsAndAsymptote) {
  Tensor z({1}, 0.0);
  EXPECT_EQ(ops::gelu(z)[0], 0.0);
  EXPECT_EQ(ops::tanh(z)[0], 0.0);
  EXPECT_EQ(ops::elu(z)[0], 0.0);
  EXPECT_NEAR(ops::elu(Tensor({1}, -1000.0))[0], -1.0, 1e-12);
  // Exact-CDF GELU, not the tanh approximation.
  EXPECT_NEAR(ops::gelu(Tensor({1}, 1.0))[0], 0.5 * (1 + std::erf(1 / std::sqrt(2.0))), 1e-15);
}

TEST(Activation, GradientsMatchFiniteDifferences) {
  Rng rng(14);
  Tensor x = random_tensor({100}, rng, 3.0);
  for (auto kind : {ops::Activation::gelu, ops::Activation::elu, ops::Activation::tanh}) {
    EXPECT_LE(fd_max_rel_error([&] { return ops::sum(ops::activation(x, kind)); }, {x}, 1e-5), 1e-7);
  }
}

TEST(Softmax, AnalyticCases) {
  expect_values(ops::softmax(Tensor({3}, 0.0), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  expect_values(ops::softmax(Tensor({2}, {std::log(2.0), 0.0}), 0), {2.0 / 3, 1.0 / 3});
  Tensor big = ops::softmax(Tensor({2}, {1000.0, 0.0}), 0);
  EXPECT_EQ(big[0], 1.0);
  EXPECT_LT(big[1], 1e-300);
  EXPECT_TRUE(std::isfinite(big[1]));
}

TEST(Softmax, SumsToOneAlongEachAxis) {
  Rng rng(15);
  Tensor x = random_tensor({3, 4, 5}, rng, 1000.0, false);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor y = ops::softmax(x, axis);
    const std::size_t n = x.dim(axis);
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= x.dim(i);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const double v = y[(o * n + j) * inner + in];
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor x = random_tensor({2, 3, 4}, rng, 2.0);
    EXPECT_LE(fd_max_rel_error([&] { return probe(ops::softmax(x, seed % 3)); }, {x}, 1e-5), 1e-6);
  }
}

TEST(AvgPool, MeansAndRemainder) {
  expect_values(ops::avgpool1d(Tensor({1, 1, 4}, {1, 2, 3, 4}), 2), {1.5, 3.5});
  expect_values(ops::avgpool1d(Tensor({1, 1, 5}, {1, 2, 3, 4, 5}), 2), {1.5, 3.5});
  EXPECT_EQ(ops::avgpool1d(Tensor({1, 1, 1000}), 125).dim(2), 8u);
  EXPECT_THROW(ops::avgpool1d(Tensor({1, 1, 3}), 4), DimensionError);
  EXPECT_THROW(ops::avgpool1d(Tensor({1, 1, 3}), 0), DimensionError);
}

TEST(AvgPool, GradientMatchesFiniteDifferences) {
  Rng rng(16);
  Tensor x = random_tensor({2, 3, 11}, rng);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::avgpool1d(x, 3)); }, {x}, 1e-5), 1e-6);
}

TEST(ShapeOps, PermuteReshapeMeanConcatGradients) {
  Rng rng(17);
  Tensor x = random_tensor({2, 3, 4}, rng), y = random_tensor({2, 3, 2}, rng), pos = random_tensor({3, 4}, rng);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::permute(x, {2, 0, 1})); }, {x}, 1e-5), 1e-6);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::mean(x, 1)); }, {x}, 1e-5), 1e-6);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::concat_last(x, y)); }, {x, y}, 1e-5), 1e-6);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::add_broadcast(x, pos)); }, {x, pos}, 1e-5), 1e-6);
  Tensor p = ops::permute(x, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  // p[d, b, n] == x[b, n, d]
  EXPECT_EQ(p[(3 * 2 + 1) * 3 + 2], x[(1 * 3 + 2) * 4 + 3]);
}

TEST(LayerNorm, GradientIncludingAffineTerms) {
  Rng rng(18);
  Tensor x = random_tensor({3, 5}, rng), g = random_tensor({5}, rng), b = random_tensor({5}, rng);
  EXPECT_LE(fd_max_rel_error([&] { return probe(ops::layernorm(x, g, b)); }, {x, g, b}, 1e-5), 1e-6);
}

// --- dropout -----------------------------------------------------------------

TEST(Dropout, EvalModeIsIdentity) {
  Rng rng(19);
  Tensor x = random_tensor({50}, rng, 1.0, false);
  Tensor y = ops::dropout(x, 0.5, Mode::eval, &rng);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Dropout, TrainModePreservesExpectation) {
  Rng rng(20);
  const std::size_t n = 20000;
  for (double p : {0.1, 0.5}) {
    Tensor x({n}, 1.0);
    Tensor y = ops::dropout(x, p, Mode::train, &rng);
    double s = 0;
    std::size_t kept = 0;
    for (double v : y.data()) {
      s += v;
      if (v != 0.0) {
        ++kept;
        EXPECT_NEAR(v, 1.0 / (1.0 - p), 1e-15);
      }
    }
    EXPECT_NEAR(s / n, 1.0, 0.02);
    EXPECT_NEAR(static_cast<double>(kept) / n, 1.0 - p, 0.02);
  }
}

// --- attention and encoder ---------------------------------------------------

TEST(MultiHeadAttention, SingleTokenAttendsToItself) {
  Rng rng(21);
  auto p = AttentionParams::make(4, rng);
  Tensor x = random_tensor({1, 1, 4}, rng, 1.0, false);
  Tensor y = multihead_attention(x, p, 2);
  Tensor expected = p.out(p.v(x));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(MultiHeadAttention, IdenticalTokensGiveIdenticalOutputs) {
  Rng rng(22);
  auto p = AttentionParams::make(6, rng);
  Tensor x({1, 2, 6});
  for (std::size_t d = 0; d < 6; ++d) x[d] = x[6 + d] = rng.uniform(-1, 1);
  Tensor y = multihead_attention(x, p, 3);
  for (std::size_t d = 0; d < 6; ++d) EXPECT_EQ(y[d], y[6 + d]);
}

TEST(MultiHeadAttention, RejectsIndivisibleHeads) {
  Rng rng(23);
  auto p = AttentionParams::make(6, rng);
  EXPECT_THROW(multihead_attention(Tensor({1, 2, 6}), p, 4), DimensionError);
}

TEST(MultiHeadAttention, AllParameterGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    auto p = AttentionParams::make(8, rng);
    Tensor x = random_tensor({2, 4, 8}, rng);
    std::vector<Tensor> all{x}, key_bias;
    p.visit("a", [&](const std::string& name, Tensor& t) { (name == "a.k.bias" ? key_bias : all).push_back(t); });
    auto f = [&] { return probe(multihead_attention(x, p, 2)); };
    EXPECT_LE(fd_max_rel_error(f, all, 1e-5), 1e-5);
    // Softmax is shift-invariant per query, so the key bias has exactly zero gradient.
    EXPECT_LE(fd_max_magnitude(f, key_bias, 1e-5), 1e-9);
  }
}

TEST(EncoderLayer, ZeroResidualBranchesReduceToDoubleLayerNorm) {
  Rng rng(24);
  auto p = EncoderLayerParams::make(6, 24, rng);
  p.visit("l", [](const std::string& name, Tensor& t) {
    if (name.find("norm") == std::string::npos) std::fill(t.data().begin(), t.data().end(), 0.0);
  });
  Tensor x = random_tensor({2, 3, 6}, rng, 2.0, false);
  Tensor y = transformer_encoder_layer(x, p, {2, 0.0, Mode::eval, nullptr});
  Tensor ones({6}, 1.0), zeros({6}, 0.0);
  Tensor ref = ops::layernorm(ops::layernorm(x, ones, zeros), ones, zeros);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(EncoderLayer, PreservesShape) {
  Rng rng(25);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t B = 1 + rng.below(3), N = 1 + rng.below(6), H = 1 + rng.below(3), D = H * (1 + rng.below(4));
    auto p = EncoderLayerParams::make(D, 4 * D, rng);
    Tensor x = random_tensor({B, N, D}, rng, 1.0, false);
    EXPECT_EQ(transformer_encoder_layer(x, p, {H, 0.1, Mode::train, &rng}).shape(), x.shape());
  }
}

TEST(EncoderLayer, TwoStackedLayersGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    auto l1 = EncoderLayerParams::make(8, 16, rng), l2 = EncoderLayerParams::make(8, 16, rng);
    Tensor x = random_tensor({2, 3, 8}, rng);
    std::vector<Tensor> all{x}, key_bias;
    auto collect = [&](const std::string& name, Tensor& t) {
      (name.ends_with("attn.k.bias") ? key_bias : all).push_back(t);
    };
    l1.visit("l1", collect);
    l2.visit("l2", collect);
    auto f = [&] {
      EncoderContext ctx{2, 0.0, Mode::eval, nullptr};
      return probe(transformer_encoder_layer(transformer_encoder_layer(x, l1, ctx), l2, ctx));
    };
    EXPECT_LE(fd_max_rel_error(f, all, 1e-5), 1e-4);
    EXPECT_LE(fd_max_magnitude(f, key_bias, 1e-5), 1e-9);
  }
}

// --- cross entropy -----------------------------------------------------------

TEST(CrossEntropy, UniformAndPerfectPredictions) {
  const int labels[] = {0, 1};
  EXPECT_NEAR(ops::cross_entropy(Tensor({2, 2}, 0.0), labels).item(), std::log(2.0), 1e-15);
  const int one[] = {1};
  EXPECT_NEAR(ops::cross_entropy(Tensor({1, 2}, {-800.0, 800.0}), one).item(), 0.0, 1e-300);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  Rng rng(26);
  Tensor logits = random_tensor({4, 3}, rng, 2.0);
  const std::vector<int> labels{0, 2, 1, 2};
  Graph g;
  Tensor loss;
  {
    Graph::Scope s(g);
    loss = ops::cross_entropy(logits, labels);
  }
  g.backward(loss);
  for (std::size_t b = 0; b < 4; ++b) {
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits[b * 3 + c]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double expect = (std::exp(logits[b * 3 + c]) / z - (static_cast<int>(c) == labels[b])) / 4.0;
      EXPECT_NEAR(logits.grad()[b * 3 + c], expect, 1e-15);
    }
  }
  logits.zero_grad();
  EXPECT_LE(fd_max_rel_error([&] { return ops::cross_entropy(logits, labels); }, {logits}, 1e-6), 1e-7);
}

TEST(CrossEntropy, RejectsOutOfRangeLabels) {
  const int bad[] = {2};
  EXPECT_THROW(ops::cross_entropy(Tensor({1, 2}), bad), LabelError);
  const int neg[] = {-1};
  EXPECT_THROW(ops::cross_entropy(Tensor({1, 2}), neg), LabelError);
}

// --- Adam ----------------------------------------------------------------------

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {0.3, -2.0, 1e-3}) {
    Tensor w({1}, 1.0);
    AdamState st(std::span<const Tensor>(&w, 1), 0.01);
    w.grad()[0] = g;
    adam_step(std::span<Tensor>(&w, 1), st);
    EXPECT_NEAR(w[0], 1.0 - 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    EXPECT_EQ(st.step, 1u);
  }
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor w({3}, 0.7);
  AdamState st(std::span<const Tensor>(&w, 1), 0.1);
  for (int i = 0; i < 5; ++i) adam_step(std::span<Tensor>(&w, 1), st);
  for (double v : w.data()) EXPECT_EQ(v, 0.7);
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, DescendsOnQuadratic) {
  Tensor w = Tensor({1}, 1.0).set_requires_grad(true);
  AdamState st(std::span<const Tensor>(&w, 1), 0.1);
  double prev = std::abs(w[0]);
  for (int i = 0; i < 10; ++i) {
    w.zero_grad();
    Graph g;
    Tensor loss;
    {
      Graph::Scope s(g);
      loss = ops::sum(ops::mul(w, w));
    }
    g.backward(loss);
    adam_step(std::span<Tensor>(&w, 1), st);
    EXPECT_LT(std::abs(w[0]), prev);
    prev = std::abs(w[0]);
  }
}

TEST(Adam, ShapeMismatch) {
  Tensor w({2}), other({3});
  AdamState st(std::span<const Tensor>(&other, 1), 0.1);
  EXPECT_THROW(adam_step(std::span<Tensor>(&w, 1), st), DimensionError);
}

// --- tape and grad_check -------------------------------------------------------

TEST(Graph, BackwardVisitsNodesInReverseOrder) {
  Rng rng(27);
  Tensor x = random_tensor({2, 3}, rng);
  Graph g;
  Tensor y;
  {
    Graph::Scope s(g);
    y = ops::sum(ops::tanh(ops::scale(ops::gelu(x), 2.0)));
  }
  ASSERT_EQ(g.size(), 4u);
  EXPECT_EQ(g.op_name(0), "gelu");
  EXPECT_EQ(g.op_name(3), "sum");
  g.backward(y);
  EXPECT_EQ(g.visit_order(), (std::vector<std::size_t>{3, 2, 1, 0}));
}

TEST(Graph, ParameterUsedTwiceAccumulatesBothPaths) {
  Rng rng(28);
  Tensor w = random_tensor({5}, rng);
  Tensor shared_grad, split_grad_a, split_grad_b;
  {
    Graph g;
    Tensor loss;
    {
      Graph::Scope s(g);
      loss = ops::sum(ops::mul(ops::tanh(w), ops::elu(w)));
    }
    g.backward(loss);
  }
  // Duplicated-parameter construction: two independent copies, one per use.
  Tensor a = w.clone().set_requires_grad(true), b = w.clone().set_requires_grad(true);
  {
    Graph g;
    Tensor loss;
    {
      Graph::Scope s(g);
      loss = ops::sum(ops::mul(ops::tanh(a), ops::elu(b)));
    }
    g.backward(loss);
  }
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(w.grad()[i], a.grad()[i] + b.grad()[i], 1e-15);
}

TEST(Graph, NoRecordingWithoutScope) {
  Rng rng(29);
  Tensor x = random_tensor({3}, rng);
  Tensor y = ops::tanh(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, SumIsExact) {
  Rng rng(30);
  Tensor x = random_tensor({7}, rng);
  EXPECT_LE(grad_check([&] { return ops::sum(x); }, x, 1e-5), 1e-9);
}

TEST(GradCheck, SquaredNorm) {
  Rng rng(31);
  Tensor x = random_tensor({10}, rng);
  EXPECT_LE(grad_check([&] { return ops::sum(ops::mul(x, x)); }, x, 1e-5), 1e-8);
}

TEST(GradCheck, RejectsNonScalarFunctions) {
  Rng rng(32);
  Tensor x = random_tensor({3}, rng);
  EXPECT_THROW(grad_check([&] { return ops::tanh(x); }, x, 1e-5), ContractError);
}

TEST(GradCheck, DetectsCorruptedBackwardRule) {
  Rng rng(33);
  Tensor x = random_tensor({6}, rng);
  fault::gelu_backward_scale = 1.5;
  const double err = grad_check([&] { return probe(ops::gelu(x)); }, x, 1e-5);
  fault::gelu_backward_scale = 1.0;
  EXPECT_GT(err, 1e-2);
}

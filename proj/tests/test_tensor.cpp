#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "megabyte/megabyte.hpp"
#include "oracles.hpp"

using namespace megabyte;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<real>(rng.normal() * scale);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Checks d loss_fn / d x against central differences.
void expect_gradient(const std::function<Tensor()>& loss_fn, Tensor& x, double tol, double floor = 1e-8) {
  x.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  const std::vector<real> analytic(x.grad().begin(), x.grad().end());
  auto f = [&] {
    NoGradGuard g;
    return static_cast<double>(loss_fn().item());
  };
  const auto numeric = oracle::numeric_grad(f, x);
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    EXPECT_LT(oracle::relative_error(analytic[i], numeric[i], floor), tol) << "element " << i;
  }
}

// Weighted sum with fixed random weights: a scalar with a generic gradient.
Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(rng, y.shape(), false)));
}

}  // namespace

TEST(Tensor, ShapeAndDataLengthAgree) {
  Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.data().size(), 24u);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, MatmulIdentity) {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(eye, m);
  EXPECT_EQ(std::vector<real>(c.data().begin(), c.data().end()), (std::vector<real>{1, 2, 3, 4}));
}

TEST(Tensor, MatmulRowTimesColumn) {
  Tensor c = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11);
}

TEST(Tensor, MatmulDimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Tensor, MatmulGradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  Tensor a = random_tensor(rng, {3, 3});
  Tensor b = random_tensor(rng, {3, 3});
  expect_gradient([&] { return sum(matmul(a, b)); }, a, 1e-6);
  expect_gradient([&] { return sum(matmul(a, b)); }, b, 1e-6);
}

TEST(Tensor, MatmulNtAndLinearMatchOracle) {
  Rng rng(2);
  Tensor a = random_tensor(rng, {4, 3});
  Tensor b = random_tensor(rng, {5, 3});
  Tensor c = matmul_nt(a, b);
  const auto ref = oracle::matmul(oracle::rows(a), [&] {
    oracle::Mat bt(3, oracle::Vec(5));
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 3; ++j) bt[j][i] = b[i * 3 + j];
    return bt;
  }());
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(c[i * 5 + j], ref[i][j], 1e-12);
  expect_gradient([&] { return probe(matmul_nt(a, b)); }, a, 1e-6);
  expect_gradient([&] { return probe(matmul_nt(a, b)); }, b, 1e-6);
  Tensor x = random_tensor(rng, {2, 3, 4});
  Tensor w = random_tensor(rng, {4, 6});
  Tensor bias = random_tensor(rng, {6});
  expect_gradient([&] { return probe(linear(x, w, bias)); }, x, 1e-6);
  expect_gradient([&] { return probe(linear(x, w, bias)); }, w, 1e-6);
  expect_gradient([&] { return probe(linear(x, w, bias)); }, bias, 1e-6);
}

TEST(Tensor, SoftmaxUniformOnEqualInputs) {
  Tensor p = softmax_last(Tensor::from({4}, {0, 0, 0, 0}));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p[i], 0.25);
}

TEST(Tensor, SoftmaxLargeLogitsDoNotOverflow) {
  Tensor p = softmax_last(Tensor::from({2}, {1000, 0}));
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_GE(p[1], 0.0);
  EXPECT_LT(p[1], 1e-300);
}

TEST(Tensor, SoftmaxRowsSumToOneAndStayInUnitInterval) {
  Rng rng(3);
  Tensor x = random_tensor(rng, {7, 13}, false, 20.0);
  Tensor p = softmax_last(x);
  for (int r = 0; r < 7; ++r) {
    double s = 0;
    for (int j = 0; j < 13; ++j) {
      EXPECT_GE(p[r * 13 + j], 0.0);
      EXPECT_LE(p[r * 13 + j], 1.0);
      s += p[r * 13 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Tensor, SoftmaxAndLogSoftmaxGradients) {
  Rng rng(4);
  Tensor x = random_tensor(rng, {3, 5});
  expect_gradient([&] { return probe(softmax_last(x)); }, x, 1e-6);
  expect_gradient([&] { return probe(log_softmax_last(x)); }, x, 1e-6);
}

TEST(Tensor, CrossEntropyGradientIsSoftmaxMinusOnehot) {
  Rng rng(5);
  Tensor logits = random_tensor(rng, {1, 6});
  const std::vector<int> target{4};
  Tensor loss = cross_entropy_bits(logits, target);
  backward(loss);
  Tensor p = softmax_last(logits.detach());
  for (int j = 0; j < 6; ++j) {
    const double expected = (p[j] - (j == 4 ? 1.0 : 0.0)) / std::numbers::ln2;
    EXPECT_NEAR(logits.grad()[j], expected, 1e-12);
  }
}

TEST(Tensor, CrossEntropyMaskedRowsContributeNothing) {
  Rng rng(6);
  Tensor logits = random_tensor(rng, {3, 4});
  const std::vector<int> targets{1, 2, 3};
  const std::vector<real> mask{1, 0, 1};
  Tensor loss = cross_entropy_bits(logits, targets, mask);
  backward(loss);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(logits.grad()[4 + j], 0.0);
  Tensor all_masked = Tensor::from({1, 4}, {0, 0, 0, 0});
  const std::vector<int> one{0};
  const std::vector<real> zero{0};
  EXPECT_THROW(cross_entropy_bits(all_masked, one, zero), DataError);
  expect_gradient([&] { return cross_entropy_bits(logits, targets, mask); }, logits, 1e-6);
}

TEST(Tensor, LayerNormConstantSliceIsZero) {
  Tensor y = layer_norm(Tensor::from({1, 3}, {5, 5, 5}), Tensor::full({3}, 1), Tensor::zeros({3}));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(Tensor, LayerNormNormalizedInputNearlyUnchanged) {
  Tensor y = layer_norm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1), Tensor::zeros({2}));
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], expected, 1e-12);
  EXPECT_NEAR(y[1], -expected, 1e-12);
}

TEST(Tensor, LayerNormGradients) {
  Rng rng(7);
  Tensor x = random_tensor(rng, {4, 6});
  Tensor g = random_tensor(rng, {6});
  Tensor b = random_tensor(rng, {6});
  expect_gradient([&] { return probe(layer_norm(x, g, b)); }, x, 1e-5);
  expect_gradient([&] { return probe(layer_norm(x, g, b)); }, g, 1e-5);
  expect_gradient([&] { return probe(layer_norm(x, g, b)); }, b, 1e-5);
}

TEST(Tensor, ElementwiseGradients) {
  Rng rng(8);
  Tensor a = random_tensor(rng, {2, 3, 4});
  Tensor b = random_tensor(rng, {2, 3, 4});
  Tensor c = random_tensor(rng, {3, 4});
  expect_gradient([&] { return probe(mul(a, b)); }, a, 1e-6);
  expect_gradient([&] { return probe(add(a, b)); }, b, 1e-6);
  expect_gradient([&] { return probe(add_broadcast(a, c)); }, c, 1e-6);
  expect_gradient([&] { return probe(relu(a)); }, a, 1e-6);
  expect_gradient([&] { return probe(scale(a, 2.5)); }, a, 1e-6);
  expect_gradient([&] { return probe(reshape(a, {6, 4})); }, a, 1e-6);
}

TEST(Tensor, IndexingOpGradients) {
  Rng rng(9);
  Tensor table = random_tensor(rng, {5, 3});
  const std::vector<int> ids{4, 0, 4, 2};
  expect_gradient([&] { return probe(embedding(table, ids)); }, table, 1e-6);
  EXPECT_THROW(embedding(table, std::vector<int>{5}), DataError);
  Tensor a = random_tensor(rng, {2, 3});
  Tensor b = random_tensor(rng, {1, 3});
  expect_gradient([&] { return probe(concat0(a, b)); }, b, 1e-6);
  Tensor s = random_tensor(rng, {2, 4, 3});
  Tensor u = random_tensor(rng, {2, 1, 3});
  expect_gradient([&] { return probe(concat_seq(u, s)); }, s, 1e-6);
  expect_gradient([&] { return probe(concat_seq(u, s)); }, u, 1e-6);
  expect_gradient([&] { return probe(slice_seq(s, 1, 2)); }, s, 1e-6);
  Tensor pad = random_tensor(rng, {4, 3});
  expect_gradient([&] { return probe(repeat_leading(pad, 3)); }, pad, 1e-6);
  Tensor patches = random_tensor(rng, {4, 3, 2});
  expect_gradient([&] { return probe(previous_patch_tail(patches, 2, 2)); }, patches, 1e-6);
}

TEST(Tensor, PreviousPatchTailZeroForFirstPatchOfGroup) {
  std::vector<real> v(2 * 3 * 1);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<real>(i + 1);
  Tensor out = previous_patch_tail(Tensor::from({2, 3, 1}, v), 2, 2);
  EXPECT_EQ(out.shape(), (Shape{2, 2, 1}));
  EXPECT_EQ(out[0], 0);
  EXPECT_EQ(out[1], 0);
  EXPECT_EQ(out[2], 2);
  EXPECT_EQ(out[3], 3);
}

TEST(Attention, SingleSlotReturnsItsValue) {
  Rng rng(10);
  Tensor q = random_tensor(rng, {1, 1, 4}, false);
  Tensor k = random_tensor(rng, {1, 1, 4}, false);
  Tensor v = random_tensor(rng, {1, 1, 4}, false);
  Tensor out = causal_attention(q, k, v, 2);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(out[i], v[i], 1e-15);
}

TEST(Attention, FutureValuesDoNotAffectEarlierOutputs) {
  Rng rng(11);
  Tensor q = random_tensor(rng, {1, 5, 4}, false);
  Tensor k = random_tensor(rng, {1, 5, 4}, false);
  Tensor v = random_tensor(rng, {1, 5, 4}, false);
  Tensor base = causal_attention(q, k, v, 2);
  for (int j = 1; j < 5; ++j) {
    std::vector<real> vv(v.data().begin(), v.data().end());
    for (int c = 0; c < 4; ++c) vv[j * 4 + c] += 3.0;
    std::vector<real> kk(k.data().begin(), k.data().end());
    for (int c = 0; c < 4; ++c) kk[j * 4 + c] -= 2.0;
    Tensor out = causal_attention(q, Tensor::from({1, 5, 4}, kk), Tensor::from({1, 5, 4}, vv), 2);
    for (int i = 0; i < j * 4; ++i) EXPECT_EQ(out[i], base[i]) << "perturbed " << j;
  }
}

TEST(Attention, TwoPositionsOneDimHandComputed) {
  Tensor q = Tensor::from({1, 2, 1}, {0.5, -1.0});
  Tensor k = Tensor::from({1, 2, 1}, {2.0, 0.25});
  Tensor v = Tensor::from({1, 2, 1}, {3.0, -7.0});
  Tensor out = causal_attention(q, k, v, 1);
  // Position 1 scores: q1·k0 = -2, q1·k1 = -0.25 (d = 1, no scaling).
  const double w0 = std::exp(-2.0) / (std::exp(-2.0) + std::exp(-0.25));
  EXPECT_NEAR(out[0], 3.0, 1e-12);
  EXPECT_NEAR(out[1], w0 * 3.0 + (1 - w0) * -7.0, 1e-12);
  const auto ref = oracle::attention(oracle::rows(q), oracle::rows(k), oracle::rows(v), 1);
  EXPECT_NEAR(out[1], ref[1][0], 1e-12);
}

TEST(Attention, MatchesDenseOracleWithExtrasAndRotary) {
  Rng rng(12);
  const std::size_t N = 3, t = 4, C = 8, heads = 2, r = 2;
  for (bool rotary : {false, true}) {
    Tensor q = random_tensor(rng, {N, t, C});
    Tensor k = random_tensor(rng, {N, t, C});
    Tensor v = random_tensor(rng, {N, t, C});
    Tensor ek = random_tensor(rng, {N, r, C});
    Tensor ev = random_tensor(rng, {N, r, C});
    Tensor out = causal_attention(q, k, v, heads, ek, ev, rotary);
    for (std::size_t n = 0; n < N; ++n) {
      auto slab = [&](const Tensor& x, std::size_t rows) {
        oracle::Mat m(rows, oracle::Vec(C));
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t c = 0; c < C; ++c) m[i][c] = x[(n * rows + i) * C + c];
        return m;
      };
      const auto ref = oracle::attention(slab(q, t), slab(k, t), slab(v, t), heads, slab(ek, r), slab(ev, r), rotary);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < C; ++c) EXPECT_NEAR(out[(n * t + i) * C + c], ref[i][c], 1e-12);
    }
    expect_gradient([&] { return probe(causal_attention(q, k, v, heads, ek, ev, rotary)); }, q, 1e-5);
    expect_gradient([&] { return probe(causal_attention(q, k, v, heads, ek, ev, rotary)); }, k, 1e-5);
    expect_gradient([&] { return probe(causal_attention(q, k, v, heads, ek, ev, rotary)); }, v, 1e-5);
    expect_gradient([&] { return probe(causal_attention(q, k, v, heads, ek, ev, rotary)); }, ek, 1e-5);
    expect_gradient([&] { return probe(causal_attention(q, k, v, heads, ek, ev, rotary)); }, ev, 1e-5);
  }
}

TEST(Attention, ShapeMismatchThrows) {
  EXPECT_THROW(causal_attention(Tensor::zeros({1, 2, 4}), Tensor::zeros({1, 3, 4}), Tensor::zeros({1, 2, 4}), 2),
               ShapeError);
  EXPECT_THROW(causal_attention(Tensor::zeros({1, 2, 4}), Tensor::zeros({1, 2, 4}), Tensor::zeros({1, 2, 4}), 3),
               ShapeError);
}

TEST(Attention, CounterCountsVisibleAndMaskedScores) {
  attention_score_counter() = 0;
  causal_attention(Tensor::zeros({2, 4, 4}), Tensor::zeros({2, 4, 4}), Tensor::zeros({2, 4, 4}), 2);
  EXPECT_EQ(attention_score_counter().load(), 2u * 2u * 4u * 4u);
}

TEST(Conv, IdentityTapReproducesInput) {
  Rng rng(13);
  Tensor x = random_tensor(rng, {1, 6, 2}, false);
  std::vector<real> w(3 * 2 * 2, 0);
  w[(2 * 2 + 0) * 2 + 0] = 1;
  w[(2 * 2 + 1) * 2 + 1] = 1;
  Tensor y = causal_conv1d(x, Tensor::from({3, 2, 2}, w), Tensor::zeros({2}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv, OutputsIgnoreLaterInputs) {
  Rng rng(14);
  Tensor x = random_tensor(rng, {1, 8, 3}, false);
  Tensor w = random_tensor(rng, {5, 3, 3}, false);
  Tensor b = random_tensor(rng, {3}, false);
  Tensor base = causal_conv1d(x, w, b);
  for (int j = 0; j < 8; ++j) {
    std::vector<real> xv(x.data().begin(), x.data().end());
    xv[j * 3 + 1] += 1.0;
    Tensor y = causal_conv1d(Tensor::from({1, 8, 3}, xv), w, b);
    for (int i = 0; i < j * 3; ++i) EXPECT_EQ(y[i], base[i]);
  }
}

TEST(Conv, WidthThreeHandConvolution) {
  Tensor x = Tensor::from({1, 4, 1}, {1, 2, 3, 4});
  Tensor w = Tensor::from({3, 1, 1}, {0.5, -1, 2});  // taps for x[i-2], x[i-1], x[i]
  Tensor y = causal_conv1d(x, w, Tensor::from({1}, {0.25}));
  const double expected[] = {0.25 + 2 * 1, 0.25 + 2 * 2 - 1 * 1, 0.25 + 2 * 3 - 2 + 0.5 * 1, 0.25 + 2 * 4 - 3 + 0.5 * 2};
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], expected[i]);
}

TEST(Conv, MatchesOracleAndGradients) {
  Rng rng(15);
  Tensor x = random_tensor(rng, {2, 9, 3});
  Tensor w = random_tensor(rng, {7, 3, 4});
  Tensor b = random_tensor(rng, {4});
  Tensor y = causal_conv1d(x, w, b);
  for (int n = 0; n < 2; ++n) {
    oracle::Mat rows(9, oracle::Vec(3));
    for (int i = 0; i < 9; ++i)
      for (int c = 0; c < 3; ++c) rows[i][c] = x[(n * 9 + i) * 3 + c];
    const auto ref = oracle::causal_conv(rows, w, b);
    for (int i = 0; i < 9; ++i)
      for (int o = 0; o < 4; ++o) EXPECT_NEAR(y[(n * 9 + i) * 4 + o], ref[i][o], 1e-12);
  }
  expect_gradient([&] { return probe(causal_conv1d(x, w, b)); }, x, 1e-6);
  expect_gradient([&] { return probe(causal_conv1d(x, w, b)); }, w, 1e-6);
  expect_gradient([&] { return probe(causal_conv1d(x, w, b)); }, b, 1e-6);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  for (real g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SecondCallThrows) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), Error);
}

TEST(Backward, NonScalarLossThrows) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, DetachedSubgraphGetsNoGradient) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = Tensor::from({2}, {3, 4}, true);
  Tensor loss = sum(add(x, mul(y.detach(), y.detach())));
  backward(loss);
  EXPECT_TRUE(x.has_grad());
  for (real g : y.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SharedInputAccumulates) {
  Tensor x = Tensor::from({1}, {3}, true);
  backward(sum(add(mul(x, x), x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::from({1}, {3}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = mul(x, x);
  }
  EXPECT_THROW(backward(sum(y)), Error);
}

TEST(Tensor, NonFiniteResultRaisesNumericError) {
  Tensor x = Tensor::from({1}, {1e300});
  EXPECT_THROW(mul(x, x), NumericError);
}

TEST(Tensor, DropoutInvertedScalingAndEvalIdentity) {
  Rng rng(16);
  Tensor x = Tensor::full({10000}, 1.0);
  Tensor eval = dropout(x, 0.1, &rng, false);
  for (std::size_t i = 0; i < 10000; ++i) EXPECT_EQ(eval[i], 1.0);
  Tensor train = dropout(x, 0.1, &rng, true);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 10000; ++i) {
    if (train[i] == 0) {
      ++zeros;
    } else {
      EXPECT_NEAR(train[i], 1.0 / 0.9, 1e-15);
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 10000.0, 0.1, 0.02);
}

TEST(Tensor, OpsAreDeterministic) {
  Rng rng(17);
  Tensor q = random_tensor(rng, {2, 16, 8}, false);
  Tensor a = causal_attention(q, q, q, 2);
  Tensor b = causal_attention(q, q, q, 2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

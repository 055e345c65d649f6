// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "dssdrv/grad_check.hpp"
#include "dssdrv/ops.hpp"

namespace dssdrv {
namespace {

// Straight nested-loop convolution, independent of the im2col path.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, int stride, Pad4 pad,
                                std::int64_t oh, std::int64_t ow) {
  const auto b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(0);
  std::vector<double> out(static_cast<std::size_t>(b * cout * oh * ow), 0.0);
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::int64_t ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < 4; ++ky)
              for (int kx = 0; kx < 4; ++kx) {
                const auto iy = oy * stride - pad.top + ky, ix = ox * stride - pad.left + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x[((n * cin + ci) * h + iy) * wd + ix] * w[((co * cin + ci) * 4 + ky) * 4 + kx];
              }
          out[((n * cout + co) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

TEST(Conv2d, OnesKernelCornerAndInterior) {
  auto x = Tensor<float>::full({1, 1, 8, 8}, 1.0f);
  auto w = Tensor<float>::full({1, 1, 4, 4}, 1.0f);
  auto y = conv2d<float>(x, w, Tensor<float>::zeros({1}), 2, Pad4{1, 1, 1, 1});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_FLOAT_EQ(y[0], 9.0f);
  EXPECT_FLOAT_EQ(y[3], 9.0f);
  EXPECT_FLOAT_EQ(y[15], 9.0f);
  EXPECT_FLOAT_EQ(y[1 * 4 + 1], 16.0f);
  EXPECT_FLOAT_EQ(y[2 * 4 + 2], 16.0f);
  EXPECT_FLOAT_EQ(y[1], 12.0f);  // edge: 3x4 support
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2}) {
    for (Pad4 pad : {Pad4{1, 1, 1, 1}, kSamePad, Pad4{0, 0, 0, 0}}) {
      auto x = Tensor<double>::randn({2, 3, 9, 7}, rng);
      auto w = Tensor<double>::randn({4, 3, 4, 4}, rng);
      auto y = conv2d<double>(x, w, std::nullopt, stride, pad);
      auto ref = conv_oracle(x, w, stride, pad, y.dim(2), y.dim(3));
      ASSERT_EQ(ref.size(), y.numel());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
  }
}

TEST(Conv2d, ShapeArithmetic) {
  std::mt19937_64 rng(0);
  auto x = Tensor<float>::randn({2, 3, 16, 16}, rng);
  auto w = Tensor<float>::randn({5, 3, 4, 4}, rng);
  EXPECT_EQ(conv2d<float>(x, w, std::nullopt, 2, Pad4{}).shape(), (Shape{2, 5, 8, 8}));
  EXPECT_EQ(conv2d<float>(x, w, std::nullopt, 1, kSamePad).shape(), (Shape{2, 5, 16, 16}));
}

TEST(Conv2d, Linearity) {
  std::mt19937_64 rng(1);
  auto x = Tensor<float>::randn({1, 2, 8, 8}, rng);
  auto w = Tensor<float>::randn({3, 2, 4, 4}, rng);
  auto y1 = conv2d<float>(scale(x, 2.0f), w, std::nullopt, 2, Pad4{});
  auto y2 = conv2d<float>(x, w, std::nullopt, 2, Pad4{});
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_FLOAT_EQ(y1[i], 2.0f * y2[i]);
}

TEST(Conv2d, Errors) {
  std::mt19937_64 rng(1);
  auto x = Tensor<float>::randn({1, 2, 8, 8}, rng);
  EXPECT_THROW(conv2d<float>(x, Tensor<float>::zeros({3, 3, 4, 4}), std::nullopt, 2, Pad4{}), ShapeError);
  EXPECT_THROW(conv2d<float>(x, Tensor<float>::zeros({3, 2, 3, 3}), std::nullopt, 2, Pad4{}), ShapeError);
  EXPECT_THROW(conv2d<float>(Tensor<float>::zeros({1, 2, 2, 2}), Tensor<float>::zeros({3, 2, 4, 4}),
                             std::nullopt, 1, Pad4{0, 0, 0, 0}),
               ShapeError);
  EXPECT_THROW(conv2d<float>(x, Tensor<float>::zeros({3, 2, 4, 4}), std::nullopt, 3, Pad4{}), ShapeError);
}

TEST(ConvTranspose2d, ShapeAndBias) {
  auto x = Tensor<float>::zeros({1, 1, 4, 4});
  std::mt19937_64 rng(2);
  auto w = Tensor<float>::randn({1, 3, 4, 4}, rng);
  auto b = Tensor<float>({3}, {0.5f, -1.0f, 2.0f});
  auto y = conv_transpose2d<float>(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 8, 8}));
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < 64; ++i) EXPECT_EQ(y[c * 64 + i], b[c]);
  EXPECT_THROW(conv_transpose2d<float>(x, Tensor<float>::zeros({2, 3, 4, 4}), std::nullopt), ShapeError);
}

TEST(ConvTranspose2d, AdjointOfConv2d) {
  for (std::uint64_t seed : {1, 2, 3}) {
    std::mt19937_64 rng(seed);
    auto x = Tensor<double>::randn({1, 2, 8, 8}, rng);
    auto y = Tensor<double>::randn({1, 3, 4, 4}, rng);
    auto w = Tensor<double>::randn({3, 2, 4, 4}, rng);  // conv: Cout=3, Cin=2
    const double lhs = dot(conv2d<double>(x, w, std::nullopt, 2, Pad4{}).data(), y.data());
    const double rhs = dot(x.data(), conv_transpose2d<double>(y, w, std::nullopt, 2, Pad4{}).data());
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  auto x = Tensor<float>::full({2, 3, 4, 4}, 0.7f);
  auto gamma = Tensor<float>({3}, {1.5f, 2.0f, -1.0f});
  auto beta = Tensor<float>({3}, {0.1f, -0.2f, 0.3f});
  BatchNormState<float> st(3);
  auto y = batch_norm(x, gamma, beta, st, Mode::kTrain);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 16; ++i) EXPECT_NEAR(y[(n * 3 + c) * 16 + i], beta[c], 1e-7);
}

TEST(BatchNorm, TrainNormalizesPerChannel) {
  std::mt19937_64 rng(5);
  auto x = Tensor<double>::randn({3, 2, 5, 5}, rng, 3.0);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] += 4.0;
  BatchNormState<double> st(2);
  auto y = batch_norm(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), st, Mode::kTrain);
  for (std::int64_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::int64_t n = 0; n < 3; ++n)
      for (std::int64_t i = 0; i < 25; ++i) m += y[(n * 2 + c) * 25 + i];
    m /= 75;
    for (std::int64_t n = 0; n < 3; ++n)
      for (std::int64_t i = 0; i < 25; ++i) v += std::pow(y[(n * 2 + c) * 25 + i] - m, 2);
    v /= 75;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-6 + 1e-5);  // eps = 1e-5 shrinks the variance slightly
    EXPECT_NE(st.running_mean[c], 0.0);
  }
}

TEST(BatchNorm, EvalUsesRunningStats) {
  std::mt19937_64 rng(6);
  auto x = Tensor<double>::randn({2, 2, 3, 3}, rng);
  BatchNormState<double> st(2);  // mean 0, var 1
  const double eps = 1e-5;
  auto y = batch_norm(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), st, Mode::kEval, eps);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + eps), 1e-12);
  EXPECT_EQ(st.running_mean, std::vector<double>(2, 0.0));
}

TEST(Activations, Values) {
  auto x = Tensor<float>({3}, {-1.0f, -3.0f, 2.5f});
  auto l = leaky_relu(x);
  EXPECT_FLOAT_EQ(l[0], -0.2f);
  EXPECT_FLOAT_EQ(l[2], 2.5f);
  auto r = relu(x);
  EXPECT_EQ(r[1], 0.0f);
  EXPECT_EQ(r[2], 2.5f);
  EXPECT_EQ(tanh(Tensor<float>({1}, {0.0f}))[0], 0.0f);
}

TEST(SetReduce, Cases) {
  std::mt19937_64 rng(7);
  auto single = Tensor<float>::randn({2, 1, 3, 2, 2}, rng);
  for (auto kind : {SetReduce::kSum, SetReduce::kMean, SetReduce::kMax}) {
    auto r = set_reduce(single, kind);
    EXPECT_EQ(r.shape(), (Shape{2, 1, 3, 2, 2}));
    EXPECT_EQ(r.values(), single.values());
  }
  // Element 2 dominates everywhere.
  auto x = Tensor<float>::uniform({1, 4, 2, 3, 3}, rng, -1.0f, 1.0f);
  for (std::size_t i = 0; i < 18; ++i) x[2 * 18 + i] = 5.0f + static_cast<float>(i);
  auto mx = set_reduce(x, SetReduce::kMax);
  for (std::size_t i = 0; i < 18; ++i) EXPECT_EQ(mx[i], x[2 * 18 + i]);

  auto pair = Tensor<float>({1, 2, 1, 1, 2}, {0.0f, 0.0f, 2.0f, 2.0f});
  auto mean_r = set_reduce(pair, SetReduce::kMean);
  EXPECT_EQ(mean_r.values(), (std::vector<float>{1.0f, 1.0f}));
  EXPECT_THROW(set_reduce(Tensor<float>::zeros({1, 0, 2}), SetReduce::kSum), ShapeError);
}

TEST(SetReduce, MaxTiesRouteToLowestIndex) {
  auto x = Tensor<double>({1, 3, 2}, {1.0, 0.0, 1.0, 4.0, 0.5, 4.0}, true);
  backward(sum(set_reduce(x, SetReduce::kMax)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{1.0, 0.0, 0.0, 1.0, 0.0, 0.0}));
}

TEST(SetReduce, MeanIsPermutationInvariant) {
  std::mt19937_64 rng(8);
  const std::int64_t m = 5, inner = 12;
  auto x = Tensor<double>::randn({1, m, inner}, rng);
  auto ref = set_reduce(x, SetReduce::kMean);
  std::vector<int> perm{3, 0, 4, 1, 2};
  auto px = Tensor<double>::zeros({1, m, inner});
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < inner; ++i) px[j * inner + i] = x[perm[j] * inner + i];
  auto out = set_reduce(px, SetReduce::kMean);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-15);
}

TEST(Backward, SumAndMse) {
  std::mt19937_64 rng(9);
  auto x = Tensor<double>::randn({3, 4}, rng, 1.0, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  x.zero_grad();
  backward(mse(x, Tensor<double>::zeros({3, 4})));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], 2.0 * x[i] / 12.0, 1e-15);
}

TEST(Backward, Errors) {
  auto x = Tensor<double>::full({2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
  EXPECT_THROW(backward(sum(Tensor<double>::full({2}, 1.0))), ShapeError);
}

TEST(Backward, NonFiniteValuesAreSurfaced) {
  auto x = Tensor<float>({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(relu(x), NumericError);
  auto big = Tensor<float>({1}, {3e38f});
  EXPECT_THROW(scale(big, 10.0f), NumericError);
}

TEST(Graph, TopologicalOrder) {
  std::mt19937_64 rng(10);
  auto a = Tensor<double>::randn({1, 1, 4, 4}, rng, 1.0, true);
  auto w = Tensor<double>::randn({1, 1, 4, 4}, rng, 1.0, true);
  auto h = relu(conv2d<double>(a, w, std::nullopt, 1, kSamePad));
  auto loss = sum(add(h, h));
  auto g = Graph<double>::trace(loss);
  const auto& nodes = g.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (auto& in : nodes[i]->inputs) {
      if (!in->requires_grad) continue;
      auto pos = std::find(nodes.begin(), nodes.end(), in.get());
      ASSERT_NE(pos, nodes.end());
      EXPECT_LT(pos - nodes.begin(), static_cast<std::ptrdiff_t>(i));
    }
  EXPECT_EQ(nodes.back(), loss.node().get());
  EXPECT_EQ(g.num_ops(), 4u);
}

TEST(Graph, BackwardIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(11);
    auto x = Tensor<float>::randn({2, 3, 8, 8}, rng);
    auto w = Tensor<float>::randn({4, 3, 4, 4}, rng, 0.1f, true);
    auto gm = Tensor<float>::full({4}, 1.0f, true);
    auto bt = Tensor<float>::zeros({4}, true);
    BatchNormState<float> st(4);
    auto y = batch_norm(conv2d<float>(x, w, std::nullopt, 2, Pad4{}), gm, bt, st, Mode::kTrain);
    backward(mse(tanh(y), Tensor<float>::zeros(y.shape())));
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, Conv2dMse) {
  for (std::uint64_t seed : {21, 22, 23}) {
    std::mt19937_64 rng(seed);
    auto x = Tensor<double>::uniform({2, 2, 6, 6}, rng, -1.0, 1.0);
    auto w = Tensor<double>::uniform({3, 2, 4, 4}, rng, -1.0, 1.0);
    auto b = Tensor<double>::uniform({3}, rng, -1.0, 1.0);
    auto target = Tensor<double>::uniform({2, 3, 3, 3}, rng, -1.0, 1.0);
    auto r = grad_check([&] { return mse(conv2d<double>(x, w, b, 2, Pad4{}), target); }, {x, w, b},
                        {.coords_per_tensor = 200, .seed = seed});
    EXPECT_LT(r.max_rel_error, 1e-6) << "seed " << seed;
  }
}

TEST(GradCheck, BatchNormTrain) {
  std::mt19937_64 rng(31);
  auto x = Tensor<double>::uniform({3, 2, 3, 3}, rng, -1.0, 1.0);
  auto gm = Tensor<double>::uniform({2}, rng, 0.5, 1.5);
  auto bt = Tensor<double>::uniform({2}, rng, -0.5, 0.5);
  auto target = Tensor<double>::uniform({3, 2, 3, 3}, rng, -1.0, 1.0);
  BatchNormState<double> st(2);
  auto r = grad_check([&] { return mse(batch_norm(x, gm, bt, st, Mode::kTrain), target); }, {x, gm, bt},
                      {.coords_per_tensor = 100});
  EXPECT_LT(r.max_rel_error, 1e-5);
  auto re = grad_check([&] { return mse(batch_norm(x, gm, bt, st, Mode::kEval), target); }, {x, gm, bt},
                       {.coords_per_tensor = 100});
  EXPECT_LT(re.max_rel_error, 1e-5);
}

TEST(GradCheck, EveryRemainingOp) {
  std::mt19937_64 rng(41);
  auto x = Tensor<double>::uniform({1, 3, 2, 4, 4}, rng, -1.0, 1.0);
  auto a = Tensor<double>::uniform({1, 1, 2, 4, 4}, rng, -1.0, 1.0);
  auto w = Tensor<double>::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
  auto bias = Tensor<double>::uniform({3}, rng, -1.0, 1.0);
  auto target = Tensor<double>::uniform({1, 3, 8, 8}, rng, -1.0, 1.0);
  GradCheckOptions opts{.coords_per_tensor = 200};

  auto ct = grad_check([&] { return mse(conv_transpose2d<double>(reshape(a, {1, 2, 4, 4}), w, bias), target); },
                       {a, w, bias}, opts);
  EXPECT_LT(ct.max_rel_error, 1e-4);

  for (auto kind : {SetReduce::kSum, SetReduce::kMean, SetReduce::kMax}) {
    auto r = grad_check([&] { return sum(tanh(set_reduce(x, kind))); }, {x}, opts);
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
  auto act = grad_check(
      [&] { return add(mean(leaky_relu(x)), add(mean(relu(x)), mean(tanh(add_set_broadcast(x, a))))); }, {x, a},
      opts);
  EXPECT_LT(act.max_rel_error, 1e-4);
  auto cat = grad_check([&] { return sum(tanh(concat(x, a, 1))); }, {x, a}, opts);
  EXPECT_LT(cat.max_rel_error, 1e-4);
  auto arith = grad_check([&] { return mse(sub(x, scale(x, 0.3)), Tensor<double>::zeros(x.shape())); }, {x}, opts);
  EXPECT_LT(arith.max_rel_error, 1e-4);
}

TEST(GradCheck, ConfirmStepSidestepsKinks) {
  // One coordinate sits 4e-6 from the ReLU kink, inside the default step.
  Tensor<double> x({1, 1, 1, 3}, {0.5, 4e-6, -0.7});
  auto f = [&] { return sum(relu(x)); };
  EXPECT_GT(grad_check(f, {x}).max_rel_error, 0.1);
  EXPECT_LT(grad_check(f, {x}, {.confirm_eps = 1e-7}).max_rel_error, 1e-9);
  // A dependence the graph does not see is still caught.
  auto wrong = [&] { return add(sum(relu(x)), Tensor<double>(Shape{}, {x[0] * x[0]})); };
  EXPECT_GT(grad_check(wrong, {x}, {.confirm_eps = 1e-7}).max_rel_error, 0.1);
}

}  // namespace
}  // namespace dssdrv

// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "dssdrv/grad_check.hpp"
#include "dssdrv/nn.hpp"

namespace dssdrv {
namespace {

template <typename T>
Tensor<T> permute_set(const Tensor<T>& x, const std::vector<int>& perm) {
  const auto b = x.dim(0), m = x.dim(1);
  const auto inner = static_cast<std::int64_t>(x.numel()) / (b * m);
  auto out = Tensor<T>::zeros(x.shape());
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t j = 0; j < m; ++j)
      std::copy_n(x.data().data() + (n * m + perm[j]) * inner, inner, out.data().data() + (n * m + j) * inner);
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - b[i]));
  return d;
}

UNetConfig small_config(int depth, int width, int size, Aggregation agg = Aggregation::kMean) {
  UNetConfig c;
  c.depth = depth;
  c.base_width = width;
  c.t_slice = size;
  c.freq_bins = size;
  c.aggregation = agg;
  return c;
}

// Eq. 2 written out with explicit gradient images.
double grad_loss_oracle(const std::vector<double>& p, const std::vector<double>& z, int rows, int cols) {
  double plain = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) plain += (p[i] - z[i]) * (p[i] - z[i]);
  plain /= static_cast<double>(p.size());
  std::vector<double> gp, gz;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c + 1 < cols; ++c) {
      gp.push_back(p[r * cols + c + 1] - p[r * cols + c]);
      gz.push_back(z[r * cols + c + 1] - z[r * cols + c]);
    }
  for (int r = 0; r + 1 < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      gp.push_back(p[(r + 1) * cols + c] - p[r * cols + c]);
      gz.push_back(z[(r + 1) * cols + c] - z[r * cols + c]);
    }
  double grad = 0.0;
  for (std::size_t i = 0; i < gp.size(); ++i) grad += (gp[i] - gz[i]) * (gp[i] - gz[i]);
  return plain / 10.0 + grad / static_cast<double>(gp.size());
}

TEST(DssLayer, SingleElementIsSumOfBranches) {
  std::mt19937_64 rng(1);
  DssLayer<double> layer(Direction::kDown, 2, 3, Aggregation::kMean, rng);
  auto x = Tensor<double>::randn({2, 1, 2, 8, 8}, rng);
  auto out = layer.forward(x, Mode::kTrain);
  ASSERT_EQ(out.shape(), (Shape{2, 1, 3, 4, 4}));

  auto x4 = reshape(x, {2, 2, 8, 8});
  BatchNormState<double> s1(3), s2(3);
  auto one = Tensor<double>::full({3}, 1.0), zero = Tensor<double>::zeros({3});
  auto bs = batch_norm(conv2d<double>(x4, layer.siamese().weight(), std::nullopt, 2, Pad4{}), one, zero, s1,
                       Mode::kTrain);
  auto ba = batch_norm(conv2d<double>(x4, layer.aggregate().weight(), std::nullopt, 2, Pad4{}), one, zero, s2,
                       Mode::kTrain);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], bs[i] + ba[i], 1e-12);
}

TEST(DssLayer, BranchesAreDistinct) {
  std::mt19937_64 rng(2);
  DssLayer<float> layer(Direction::kUp, 4, 2, Aggregation::kSum, rng);
  EXPECT_FALSE(layer.siamese().weight().same_node(layer.aggregate().weight()));
  EXPECT_NE(layer.siamese().weight().values(), layer.aggregate().weight().values());
  EXPECT_EQ(layer.siamese().weight().shape(), layer.aggregate().weight().shape());
}

TEST(DssLayer, PermutationEquivariance) {
  std::mt19937_64 rng(3);
  for (auto dir : {Direction::kDown, Direction::kUp}) {
    DssLayer<float> layer(dir, 3, 4, Aggregation::kMean, rng);
    auto x = Tensor<float>::randn({2, 5, 3, 8, 8}, rng);
    std::vector<int> perm{4, 2, 0, 1, 3};
    auto out = layer.forward(x, Mode::kTrain);
    auto pout = layer.forward(permute_set(x, perm), Mode::kTrain);
    EXPECT_LE(max_abs_diff(pout, permute_set(out, perm)), 1e-5);
  }
}

TEST(DssLayer, IdenticalElementsGiveIdenticalOutputs) {
  std::mt19937_64 rng(4);
  DssLayer<float> layer(Direction::kDown, 1, 4, Aggregation::kSum, rng);
  auto one = Tensor<float>::randn({1, 1, 1, 8, 8}, rng);
  auto x = Tensor<float>::zeros({1, 3, 1, 8, 8});
  for (int j = 0; j < 3; ++j) std::copy_n(one.data().data(), 64, x.data().data() + j * 64);
  auto out = layer.forward(x, Mode::kTrain);
  const std::size_t per = out.numel() / 3;
  for (std::size_t i = 0; i < per; ++i) {
    EXPECT_EQ(out[i], out[per + i]);
    EXPECT_EQ(out[i], out[2 * per + i]);
  }
}

TEST(UNetConfig, Widths) {
  UNetConfig paper;
  EXPECT_EQ(paper.encoder_widths(), (std::vector<std::int64_t>{64, 128, 256, 512, 512, 512, 512, 512}));
  EXPECT_EQ(paper.decoder_widths(), (std::vector<std::int64_t>{512, 512, 512, 512, 256, 128, 64, 1}));
  auto tiny = UNetConfig::tiny();
  EXPECT_EQ(tiny.encoder_widths(), (std::vector<std::int64_t>{8, 16, 32, 64, 64}));
  EXPECT_EQ(tiny.decoder_widths(), (std::vector<std::int64_t>{64, 32, 16, 8, 1}));
  tiny.validate();
  auto bad = small_config(5, 8, 48);
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(DssUNet, ShapesRangeAndVariableSetSize) {
  DssUNet<float> net(small_config(4, 4, 16), 7);
  std::mt19937_64 rng(8);
  for (int m : {1, 2, 4, 8}) {
    auto x = Tensor<float>::uniform({2, m, 1, 16, 16}, rng, -1.0f, 1.0f);
    auto y = net.forward(x);
    ASSERT_EQ(y.shape(), (Shape{2, 1, 16, 16}));
    for (float v : y.data()) {
      EXPECT_GT(v, -1.0f);
      EXPECT_LT(v, 1.0f);
    }
  }
  EXPECT_THROW(net.forward(Tensor<float>::zeros({1, 2, 1, 24, 16})), ShapeError);
}

TEST(DssUNet, PermutationInvariance) {
  std::mt19937_64 rng(9);
  DssUNet<double> net_d(small_config(4, 4, 16), 10);
  DssUNet<float> net_f(small_config(4, 4, 16), 10);
  auto xd = Tensor<double>::uniform({2, 5, 1, 16, 16}, rng, -1.0, 1.0);
  Tensor<float> xf(xd.shape(), std::vector<float>(xd.data().begin(), xd.data().end()));
  auto ref_d = net_d.forward(xd);
  auto ref_f = net_f.forward(xf);
  std::vector<int> perm{0, 1, 2, 3, 4};
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    EXPECT_LE(max_abs_diff(net_d.forward(permute_set(xd, perm)), ref_d), 1e-10);
    EXPECT_LE(max_abs_diff(net_f.forward(permute_set(xf, perm)), ref_f), 1e-5);
  }
}

TEST(DssUNet, DuplicationInvarianceUnderMean) {
  std::mt19937_64 rng(11);
  DssUNet<float> net(small_config(4, 4, 16), 12);
  net.set_mode(Mode::kEval);
  auto x = Tensor<float>::uniform({1, 3, 1, 16, 16}, rng, -1.0f, 1.0f);
  auto dup = Tensor<float>::zeros({1, 6, 1, 16, 16});
  for (int j = 0; j < 6; ++j) std::copy_n(x.data().data() + (j % 3) * 256, 256, dup.data().data() + j * 256);
  EXPECT_LE(max_abs_diff(net.forward(dup), net.forward(x)), 1e-5);
}

TEST(GradLoss, IdentityAndConstantOffset) {
  std::mt19937_64 rng(13);
  auto z = Tensor<double>::uniform({2, 1, 6, 5}, rng, -1.0, 1.0);
  EXPECT_EQ(grad_loss(z, z).item(), 0.0);
  auto shifted = Tensor<double>::zeros(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) shifted[i] = z[i] + 0.3;
  EXPECT_NEAR(grad_loss(shifted, z).item(), 0.09 / 10.0, 1e-15);
  EXPECT_THROW(grad_loss(z, Tensor<double>::zeros({2, 1, 5, 6})), ShapeError);
}

TEST(GradLoss, MatchesScalarLoopOracle) {
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    std::mt19937_64 rng(seed);
    auto p = Tensor<double>::uniform({4, 4}, rng, -1.0, 1.0);
    auto z = Tensor<double>::uniform({4, 4}, rng, -1.0, 1.0);
    const double ref = grad_loss_oracle(p.values(), z.values(), 4, 4);
    EXPECT_NEAR(grad_loss(p, z).item(), ref, 1e-14);
    EXPECT_NEAR(grad_loss(z, p).item(), ref, 1e-14);
    EXPECT_GE(grad_loss(p, z).item(), 0.0);
  }
}

TEST(GradLoss, ValidRowsExcludePadding) {
  std::mt19937_64 rng(14);
  auto p = Tensor<double>::uniform({2, 1, 6, 4}, rng, -1.0, 1.0);
  auto z = Tensor<double>::uniform({2, 1, 6, 4}, rng, -1.0, 1.0);
  // Image 0 keeps 3 rows, image 1 all 6: same as the two crops stacked.
  std::vector<double> p0(p.data().begin(), p.data().begin() + 12), z0(z.data().begin(), z.data().begin() + 12);
  std::vector<double> p1(p.data().begin() + 24, p.data().end()), z1(z.data().begin() + 24, z.data().end());
  // Weighted combination of per-image means by their entry counts.
  const double plain0 = 12, plain1 = 24, grad0 = 3 * 3 + 2 * 4, grad1 = 6 * 3 + 5 * 4;
  auto parts = [](const std::vector<double>& a, const std::vector<double>& b, int rows, int cols) {
    double plain = 0, grad = 0;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const double d = a[r * cols + c] - b[r * cols + c];
        plain += d * d;
        if (c + 1 < cols) grad += std::pow((a[r * cols + c + 1] - b[r * cols + c + 1]) - d, 2);
        if (r + 1 < rows) grad += std::pow((a[(r + 1) * cols + c] - b[(r + 1) * cols + c]) - d, 2);
      }
    return std::pair{plain, grad};
  };
  auto [pl0, gr0] = parts(p0, z0, 3, 4);
  auto [pl1, gr1] = parts(p1, z1, 6, 4);
  const double expect = 0.1 * (pl0 + pl1) / (plain0 + plain1) + (gr0 + gr1) / (grad0 + grad1);
  EXPECT_NEAR(grad_loss(p, z, {3, 6}).item(), expect, 1e-14);
  // Values beyond the valid rows have no influence.
  auto p2 = p.detach();
  p2[5 * 4 + 1] += 10.0;
  EXPECT_EQ(grad_loss(p2, z, {3, 6}).item(), grad_loss(p, z, {3, 6}).item());
}

TEST(GradLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  auto p = Tensor<double>::uniform({2, 5, 6}, rng, -1.0, 1.0);
  auto z = Tensor<double>::uniform({2, 5, 6}, rng, -1.0, 1.0);
  auto r = grad_check([&] { return grad_loss(p, z, {5, 2}); }, {p, z}, {.coords_per_tensor = 60});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(DssUNet, FullModelGradientCheck) {
  std::mt19937_64 rng(16);
  DssUNet<double> net(small_config(3, 2, 8), 17);
  auto x = Tensor<double>::uniform({2, 2, 1, 8, 8}, rng, -1.0, 1.0);
  auto target = Tensor<double>::uniform({2, 1, 8, 8}, rng, -1.0, 1.0);
  std::vector<Tensor<double>> params;
  for (auto& p : net.parameters().params) params.push_back(*p.tensor);
  params.push_back(x);
  auto r = grad_check([&] { return grad_loss(net.forward(x), target); }, params, {.coords_per_tensor = 6});
  EXPECT_LT(r.max_rel_error, 1e-4) << "param " << r.worst_param << " idx " << r.worst_index << " analytic "
                                   << r.worst_analytic << " numeric " << r.worst_numeric;
}

TEST(DssUNet, PaperGeometryShape) {
  UNetConfig cfg;  // depth 8, widths 64..512
  DssUNet<float> net(cfg, 1);
  EXPECT_GT(net.parameters().num_params(), 100'000'000u);
  std::mt19937_64 rng(18);
  auto x = Tensor<float>::uniform({2, 4, 1, 256, 256}, rng, -1.0f, 1.0f);
  NoGradGuard no_grad;
  auto y = net.forward(x);
  EXPECT_EQ(y.shape(), (Shape{2, 1, 256, 256}));
  for (float v : y.data()) ASSERT_TRUE(v > -1.0f && v < 1.0f);
}

}  // namespace
}  // namespace dssdrv

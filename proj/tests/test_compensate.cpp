// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "cwac/compensate.hpp"
#include "cwac/rng.hpp"

using namespace cwac;

namespace {

TensorF randn(Rng &rng, Shape s, double mean = 0.0, double sd = 1.0) {
  TensorF t(std::move(s));
  for (float &v : t.data()) v = static_cast<float>(rng.normal(mean, sd));
  return t;
}

}  // namespace

TEST(Cwac, PerfectQuantizationIsIdentity) {
  Rng rng(1);
  const TensorF y = randn(rng, {64, 5});
  const CwacParams p = fit_cwac({y, y, std::nullopt});
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_NEAR(p.alpha[c], 1.0f, 1e-6);
    EXPECT_NEAR(p.beta[c], 0.0f, 1e-6);
  }
}

TEST(Cwac, ExactAffineRecovered) {
  Rng rng(2);
  const TensorF yq = randn(rng, {100, 4});
  TensorF yf = yq;
  for (float &v : yf.data()) v = 2 * v - 1;
  const CwacParams p = fit_cwac({yf, yq, std::nullopt});
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(p.alpha[c], 2.0f, 1e-5);
    EXPECT_NEAR(p.beta[c], -1.0f, 1e-5);
  }
}

TEST(Cwac, NoisyAffineMatchesQrSolver) {
  Rng rng(3);
  const std::size_t n = 1000;
  const TensorF yq = randn(rng, {n, 1});
  TensorF yf({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    yf[r] = static_cast<float>(0.5 * yq[r] + 3 + rng.normal(0.0, 0.01));
  }
  const CwacParams p = fit_cwac({yf, yq, std::nullopt});
  Eigen::MatrixXd a(n, 2);
  Eigen::VectorXd y(n);
  for (std::size_t r = 0; r < n; ++r) {
    a(long(r), 0) = yq[r];
    a(long(r), 1) = 1.0;
    y(long(r)) = yf[r];
  }
  const Eigen::VectorXd s = a.householderQr().solve(y);
  EXPECT_NEAR(p.alpha[0], s(0), 1e-5);
  EXPECT_NEAR(p.beta[0], s(1), 1e-5);
  EXPECT_GE(p.alpha[0], 0.49f);
  EXPECT_LE(p.alpha[0], 0.51f);
  EXPECT_GE(p.beta[0], 2.9f);
  EXPECT_LE(p.beta[0], 3.1f);
}

TEST(Cwac, ConstantChannelFallsBack) {
  TensorF yq({4, 1}, {2, 2, 2, 2});
  TensorF yf({4, 1}, {1, 2, 3, 4});
  const CwacParams p = fit_cwac({yf, yq, std::nullopt});
  EXPECT_EQ(p.alpha[0], 1.0f);
  EXPECT_FLOAT_EQ(p.beta[0], 0.5f);
  EXPECT_TRUE(p.fallback_mask[0]);
  EXPECT_EQ(p.fallback_count(), 1u);
}

TEST(Cwac, NegativeGainClamped) {
  TensorF yq({4, 1}, {0, 1, 2, 3});
  TensorF yf({4, 1}, {3, 2, 1, 0});
  const CwacParams p = fit_cwac({yf, yq, std::nullopt});
  EXPECT_EQ(p.alpha[0], 1.0f);
  EXPECT_FLOAT_EQ(p.beta[0], 0.0f);
  EXPECT_TRUE(p.clamped_mask[0]);
  const CwacParams raw = fit_cwac({yf, yq, std::nullopt}, {.clamp_non_positive_alpha = false});
  EXPECT_FLOAT_EQ(raw.alpha[0], -1.0f);
  EXPECT_FLOAT_EQ(raw.beta[0], 3.0f);
}

TEST(Cwac, BadPairsRejected) {
  EXPECT_THROW(fit_cwac({TensorF({1, 2}), TensorF({1, 2}), std::nullopt}), FitError);
  EXPECT_THROW(fit_cwac({TensorF({3, 2}), TensorF({3, 3}), std::nullopt}), ShapeError);
  TensorF bad({2, 1}, {0, std::nanf("")});
  EXPECT_THROW(fit_cwac({bad, TensorF({2, 1}, {0, 1}), std::nullopt}), FitError);
}

TEST(Cwac, ApplyExamples) {
  CwacParams p = CwacParams::identity(1);
  p.alpha = {2};
  p.beta = {-1};
  EXPECT_EQ(apply_cwac(TensorF({1, 1}, {3}), p).values(), (std::vector<float>{5}));
  const TensorF y({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(apply_cwac(y, CwacParams::identity(2)), y);
  // [N, C, H, W]: channel is dim 1
  CwacParams q = CwacParams::identity(2);
  q.beta = {10, 20};
  const TensorF m = apply_cwac(TensorF({1, 2, 1, 2}, {0, 0, 0, 0}), q);
  EXPECT_EQ(m.values(), (std::vector<float>{10, 10, 20, 20}));
}

TEST(Cwac, NeverIncreasesChannelMse) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const TensorF yf = randn(rng, {40, 6});
    TensorF yq = yf;
    for (float &v : yq.data()) v = std::round(v * 2) / 2;
    const CwacParams p = fit_cwac({yf, yq, std::nullopt});
    const auto before = per_channel_mse(yq, yf);
    const auto after = per_channel_mse(apply_cwac(yq, p), yf);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_LE(after[c], before[c]);
  }
}

TEST(Qwt, ZeroResidualGivesZeroFit) {
  Rng rng(7);
  const TensorF y = randn(rng, {30, 3});
  const TensorF x = randn(rng, {30, 4});
  const QwtParams p = fit_qwt({y, y, x});
  for (float v : p.weight.data()) EXPECT_EQ(v, 0.0f);
  for (float v : p.bias.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Qwt, RecoversLinearResidual) {
  Rng rng(8);
  const std::size_t n = 200, ci = 5, co = 3;
  const TensorF x = randn(rng, {n, ci});
  const TensorF w = randn(rng, {co, ci});
  const TensorF b = randn(rng, {co});
  const TensorF yq = randn(rng, {n, co});
  TensorF yf = yq;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < co; ++c) {
      double s = b[c];
      for (std::size_t j = 0; j < ci; ++j) s += double(w.at(c, j)) * x.at(r, j);
      yf.at(r, c) += static_cast<float>(s);
    }
  const QwtParams p = fit_qwt({yf, yq, x}, {.ridge = 0.0});
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(p.weight[i], w[i], 1e-4);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(p.bias[i], b[i], 1e-4);
  const TensorF z = apply_qwt(yq, x, p);
  EXPECT_LT(mse(z, yf), 1e-8);
  EXPECT_THROW(fit_qwt({yf, yq, std::nullopt}), FitError);
}

TEST(Diagonal, Energy) {
  EXPECT_DOUBLE_EQ(diagonal_energy(TensorF({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})), 1.0);
  EXPECT_DOUBLE_EQ(diagonal_energy(TensorF({4, 4}, std::vector<float>(16, 1.0f))), 0.25);
  EXPECT_DOUBLE_EQ(diagonal_energy(TensorF({2, 2})), 0.0);
  EXPECT_DOUBLE_EQ(diagonal_energy(TensorF({2, 2}, {-1, 1, 1, -1})), 0.5);
  EXPECT_THROW(diagonal_energy(TensorF({2, 3})), ShapeError);
}

TEST(Metrics, Mse) {
  const TensorF a({2, 2}, {0, 0, 0, 0});
  const TensorF b({2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(mse(a, b), 7.5);
  EXPECT_EQ(per_channel_mse(a, b), (std::vector<double>{5.0, 10.0}));
}

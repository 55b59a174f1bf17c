/* Copyright 2026 The frill Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <cmath>

#include <gtest/gtest.h>

#include "frill/kernels.hpp"
#include "frill/quant.hpp"
#include "oracles.hpp"

namespace frill {
namespace {

TEST(QuantScaleTest, MaxAbsOver127) {
  Tensor<float> w({3}, 0.0f);
  w[0] = 0.5f;
  w[1] = -1.27f;
  w[2] = 1.0f;
  EXPECT_NEAR(choose_scale(w).scale, 0.01f, 1e-8f);
  EXPECT_EQ(choose_scale(w).zero_point, 0);
  EXPECT_EQ(choose_scale(w).num_bits, 8);
}

TEST(QuantScaleTest, AllZeroTensor) {
  const Tensor<float> w({4, 4});
  const auto spec = choose_scale(w);
  EXPECT_EQ(spec.scale, 1.0f);
  const auto q = fake_quant(w, spec);
  for (float v : q.data()) EXPECT_EQ(v, 0.0f);
}

TEST(FakeQuantTest, RoundTripErrorWithinHalfStep) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto w = random_normal<float>({16, 16}, rng, 0.1 + trial * 0.05);
    const auto spec = choose_scale(w);
    const auto q = fake_quant(w, spec);
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_LE(std::abs(q[i] - w[i]), spec.scale / 2 * (1 + 1e-5f));
      const float level = q[i] / spec.scale;
      EXPECT_NEAR(level, std::round(level), 1e-4f);
      EXPECT_LE(std::abs(level), 127.0f + 1e-4f);
    }
  }
}

TEST(FakeQuantTest, SaturatesOutsideRange) {
  QuantSpec spec;
  spec.scale = 0.01f;
  Tensor<float> w({2});
  w[0] = 5.0f;
  w[1] = -5.0f;
  const auto q = fake_quant(w, spec);
  EXPECT_NEAR(q[0], 1.27f, 1e-6f);
  EXPECT_NEAR(q[1], -1.27f, 1e-6f);
  EXPECT_EQ(quantize_value(5.0f, spec), 127);
  EXPECT_EQ(quantize_value(-5.0f, spec), -127);
}

TEST(FakeQuantTest, Idempotent) {
  Rng rng(2);
  const auto w = random_normal<float>({32, 8}, rng);
  const auto spec = choose_scale(w);
  const auto once = fake_quant(w, spec);
  EXPECT_EQ(fake_quant(once, spec), once);
  // Re-deriving the scale from the quantized tensor gives the same grid.
  EXPECT_EQ(fake_quant(once, choose_scale(once)), once);
}

TEST(FakeQuantTest, MonotoneNonDecreasing) {
  Rng rng(3);
  auto w = random_uniform<float>({1000}, rng, -2.0, 2.0);
  std::sort(w.data().begin(), w.data().end());
  const auto q = fake_quant(w, choose_scale(w));
  for (std::size_t i = 1; i < q.size(); ++i) EXPECT_LE(q[i - 1], q[i]);
}

TEST(SteTest, MaskIsOneInsideRangeZeroOutside) {
  QuantSpec spec;
  spec.scale = 0.01f;
  Tensor<float> w({4});
  w[0] = 0.3f;
  w[1] = -1.2f;
  w[2] = 1.5f;
  w[3] = -2.0f;
  const auto mask = fake_quant_grad_mask(w, spec);
  EXPECT_EQ(mask[0], 1.0f);
  EXPECT_EQ(mask[1], 1.0f);
  EXPECT_EQ(mask[2], 0.0f);
  EXPECT_EQ(mask[3], 0.0f);
}

TEST(SteTest, MatchesFiniteDifferenceOfClippedIdentity) {
  // The estimator treats the rounding as identity, so the gradient is the
  // slope of clamp(w, -127s, 127s).
  QuantSpec spec;
  spec.scale = 0.02f;
  Rng rng(4);
  const auto w = random_uniform<double>({200}, rng, -4.0, 4.0);
  const auto mask = fake_quant_grad_mask(w, spec);
  const double limit = 127 * 0.02;
  auto clipped = [&](double v) { return std::clamp(v, -limit, limit); };
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (std::abs(std::abs(w[i]) - limit) < 1e-3) continue;
    const double fd = (clipped(w[i] + 1e-5) - clipped(w[i] - 1e-5)) / 2e-5;
    EXPECT_NEAR(mask[i], fd, 1e-9);
  }
}

TEST(QuantizedLayerTest, IntForwardMatchesFakeQuantFloat) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto w = random_normal<float>({48, 24}, rng);
    const auto b = random_normal<float>({24}, rng);
    const auto x = random_normal<float>({6, 48}, rng);
    const auto layer = quantize_layer(w, b);
    EXPECT_EQ(layer.param_count(), 48u * 24 + 24);
    const auto y = int_forward(layer, x);
    const auto ref = dense(x, fake_quant(w, choose_scale(w)), b);
    EXPECT_LT(oracle::rel_error(y, ref), 1e-5);
  }
}

TEST(QuantizedLayerTest, LowRankIntForward) {
  Rng rng(6);
  const auto u = random_normal<float>({20, 4}, rng);
  const auto v = random_normal<float>({12, 4}, rng);
  const auto b = random_normal<float>({12}, rng);
  const auto x = random_normal<float>({3, 20}, rng);
  const QuantizedLowRank<float> layer{quantize_matrix(u), quantize_matrix(v), b};
  EXPECT_EQ(layer.param_count(), 4u * (20 + 12) + 12);
  auto ref = matmul_transposed(matmul(x, fake_quant(u, choose_scale(u))),
                               fake_quant(v, choose_scale(v)));
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += b[i % 12];
  EXPECT_LT(oracle::rel_error(int_forward(layer, x), ref), 1e-5);
}

TEST(QuantizedLayerTest, OutputErrorBound) {
  // |x Wq - x W| <= ||x||_1 * s / 2 per output element.
  Rng rng(7);
  const auto w = random_normal<float>({64, 16}, rng);
  const auto b = Tensor<float>({16});
  const auto x = random_normal<float>({8, 64}, rng);
  const auto layer = quantize_layer(w, b);
  const float s = layer.kernel.spec.scale;
  const auto yq = int_forward(layer, x);
  const auto y = dense(x, w, b);
  for (std::size_t r = 0; r < 8; ++r) {
    double l1 = 0.0;
    for (std::size_t i = 0; i < 64; ++i) l1 += std::abs(x(r, i));
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_LE(std::abs(yq(r, j) - y(r, j)), l1 * s / 2 + 1e-4);
    }
  }
}

TEST(QuantizedLayerTest, DequantizeEqualsFakeQuant) {
  Rng rng(8);
  const auto w = random_normal<float>({10, 7}, rng);
  const auto q = quantize_matrix(w);
  EXPECT_EQ(q.rows(), 10u);
  EXPECT_EQ(q.cols(), 7u);
  EXPECT_EQ(q.dequantize<float>(), fake_quant(w, choose_scale(w)));
}

TEST(QuantizedLayerTest, ShapeErrors) {
  EXPECT_THROW(quantize_layer(Tensor<float>({4, 3}), Tensor<float>({4})), Error);
  EXPECT_THROW(quantize_matrix(Tensor<float>({4})), Error);
  const auto layer = quantize_layer(Tensor<float>({4, 3}), Tensor<float>({3}));
  EXPECT_THROW(int_forward(layer, Tensor<float>({2, 5})), Error);
}

}  // namespace
}  // namespace frill

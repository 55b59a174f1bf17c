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

#include <set>

#include <gtest/gtest.h>

#include "frill/model.hpp"
#include "oracles.hpp"

namespace frill {
namespace {

TEST(ConfigTest, GridHas144DistinctConfigs) {
  const auto grid = enumerate_grid();
  ASSERT_EQ(grid.size(), 144u);
  std::set<std::string> names;
  for (const auto& c : grid) {
    names.insert(c.name());
    EXPECT_EQ(ModelConfig::parse(c.name()), c);
  }
  EXPECT_EQ(names.size(), 144u);
}

TEST(ConfigTest, ParsesTableStyleNames) {
  const auto c = ModelConfig::parse("Small_2.0_GAP");
  EXPECT_EQ(c.size, Mv3Size::kSmall);
  EXPECT_DOUBLE_EQ(c.width, 2.0);
  EXPECT_TRUE(c.gap);
  EXPECT_FALSE(c.compressed);
  EXPECT_EQ(ModelConfig::parse("tiny_0.5_comp_gap").name(), "tiny_0.5_comp_gap");
  EXPECT_EQ(ModelConfig::parse("small_0.75_qat_d64").embedding_dim, 64);
  for (const char* bad : {"huge_1.0", "small_0.6", "small", "small_1.0_gap_gap", "small_x"}) {
    EXPECT_THROW(ModelConfig::parse(bad), Error) << bad;
  }
}

TEST(WidthTest, DivisorRounding) {
  EXPECT_EQ(width_scale(16, 1.0), 16);
  EXPECT_EQ(width_scale(16, 0.5), 8);
  // 18 rounds to 16, which is below 90% of 18 (16.2), so it steps up to 24.
  EXPECT_EQ(width_scale(24, 0.75), 24);
  EXPECT_EQ(width_scale(1024, 2.0), 2048);
  EXPECT_EQ(width_scale(4, 0.5), 8);
  EXPECT_EQ(width_scale(88, 0.75), 64);
  for (int c : {16, 24, 40, 48, 72, 88, 96, 120, 144, 240, 288, 576, 960, 1024, 1280}) {
    for (double a : kWidthGrid) {
      const int s = width_scale(c, a);
      EXPECT_EQ(s % 8, 0);
      EXPECT_GE(s, 8);
      EXPECT_GE(s, 0.9 * c * a);
    }
  }
}

TEST(TopologyTest, TinyDropsTwoDuplicateBlocks) {
  const auto small = small_reference_topology();
  const auto tiny = tiny_reference_topology();
  EXPECT_EQ(small.blocks.size(), 11u);
  EXPECT_EQ(tiny.blocks.size(), 9u);
  EXPECT_EQ(small.blocks[5], small.blocks[4]);
  EXPECT_EQ(small.blocks[10], small.blocks[9]);
  EXPECT_EQ(small.final_conv, 1024);
  EXPECT_EQ(tiny.final_conv, 512);
  EXPECT_EQ(large_reference_topology().blocks.size(), 15u);

  const auto m = build<float>(ModelConfig::parse("tiny_1.0_gap"), 1);
  EXPECT_EQ(m.num_blocks(), 9u);
  EXPECT_EQ(m.final_conv_channels(), 512u);
}

TEST(BuildTest, SameSeedSameWeights) {
  const auto c = ModelConfig::parse("tiny_0.5_gap");
  const auto a = build<float>(c, 5), b = build<float>(c, 5), d = build<float>(c, 6);
  std::vector<Tensor<float>> ta, tb, td;
  visit_trunk_tensors(a, [&](const std::string&, const Tensor<float>& t, bool) { ta.push_back(t); });
  visit_trunk_tensors(b, [&](const std::string&, const Tensor<float>& t, bool) { tb.push_back(t); });
  visit_trunk_tensors(d, [&](const std::string&, const Tensor<float>& t, bool) { td.push_back(t); });
  EXPECT_EQ(ta, tb);
  EXPECT_NE(ta, td);
  EXPECT_EQ(std::get<DenseLayer<float>>(a.bottleneck).w, std::get<DenseLayer<float>>(b.bottleneck).w);
}

TEST(BuildTest, BottleneckKindsFollowConfigAndForm) {
  BuildOptions inf{BuildForm::kInference};
  inf.compression_rank = 16;
  BuildOptions train = inf;
  train.form = BuildForm::kTraining;
  auto kind = [](const std::string& name, const BuildOptions& o) {
    return build<float>(ModelConfig::parse(name), 1, o).bottleneck.index();
  };
  EXPECT_EQ(kind("tiny_0.5_gap", inf), 0u);
  EXPECT_EQ(kind("tiny_0.5_comp_gap", train), 1u);
  EXPECT_EQ(kind("tiny_0.5_comp_gap", inf), 1u);
  EXPECT_EQ(kind("tiny_0.5_gap_qat", train), 0u);
  EXPECT_EQ(kind("tiny_0.5_gap_qat", inf), 2u);
  EXPECT_EQ(kind("tiny_0.5_comp_gap_qat", inf), 3u);
}

TEST(ForwardTest, GapAndFlattenInputLengths) {
  const auto gap = build<float>(ModelConfig::parse("tiny_0.5_gap"), 3);
  const auto flat = build<float>(ModelConfig::parse("tiny_0.5"), 3);
  const auto f = gap.feature_map_shape();
  EXPECT_EQ(f, (Shape{3, 2, 256}));
  EXPECT_EQ(bottleneck_input_dim(gap.bottleneck), f[2]);
  EXPECT_EQ(bottleneck_input_dim(flat.bottleneck), f[0] * f[1] * f[2]);

  LogMelSpectrogram zero;
  zero.frames = Tensor<float>({96, 64});
  const auto a = forward(gap, zero), b = forward(gap, zero);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 2048u);
  for (float v : a) EXPECT_TRUE(std::isfinite(v));
}

TEST(ForwardTest, WrongInputShapeIsShapeError) {
  const auto m = build<float>(ModelConfig::parse("tiny_0.5_gap"), 3);
  LogMelSpectrogram s;
  s.frames = Tensor<float>({95, 64});
  try {
    forward(m, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShape);
  }
}

// Hand-composes the toy network from individually tested kernels.
template <typename T>
Tensor<T> compose(const StudentModel<T>& m, const Tensor<T>& x) {
  auto unit = [](const ConvUnit<T>& u, const Tensor<T>& in) {
    Tensor<T> z = u.depthwise ? depthwise_conv2d(in, u.kernel, u.stride, Padding::kSame)
                              : conv2d(in, u.kernel, u.stride, Padding::kSame);
    z = batchnorm_fold(z, u.bn.mean, u.bn.var, u.bn.gamma, u.bn.beta, u.bn.eps);
    if (u.act == Activation::kRelu) return relu(z);
    if (u.act == Activation::kHardSwish) return hard_swish(z);
    return z;
  };
  Tensor<T> h = unit(m.stem, x);
  for (const auto& b : m.blocks) {
    Tensor<T> in = h;
    if (b.expand) h = unit(*b.expand, h);
    h = unit(b.depthwise, h);
    if (b.se) {
      const auto gate =
          hard_sigmoid(dense(relu(dense(global_avg_pool(h), b.se->w1, b.se->b1)), b.se->w2, b.se->b2));
      for (std::size_t i = 0; i < h.size(); ++i) {
        const std::size_t c = h.dim(3), n = i / (h.size() / h.dim(0));
        h[i] *= gate(n, i % c);
      }
    }
    h = unit(b.project, h);
    if (b.spec.stride == 1 && b.in_channels == b.spec.out) {
      for (std::size_t i = 0; i < h.size(); ++i) h[i] += in[i];
    }
  }
  h = unit(m.last_conv, h);
  Tensor<T> z = conv2d(h, m.final_kernel, 1, Padding::kSame);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += m.final_bias[i % m.final_bias.size()];
  z = hard_swish(z);
  const auto& d = std::get<DenseLayer<T>>(m.bottleneck);
  return dense(m.config.gap ? global_avg_pool(z) : flatten_concat(z), d.w, d.b);
}

TEST(ForwardTest, ToyForwardEqualsKernelComposition) {
  for (bool gap : {false, true}) {
    ModelConfig c = ModelConfig::parse("tiny_0.5");
    c.gap = gap;
    c.embedding_dim = 24;
    auto m = build_custom<float>(toy_topology(), c, 11);
    // Non-trivial batch-norm statistics so the fold is exercised.
    Rng rng(12);
    visit_trunk_tensors(m, [&](const std::string& name, Tensor<float>& t, bool) {
      if (name.ends_with("bn/var")) t = random_uniform<float>(t.shape(), rng, 0.5, 2.0);
      else if (name.find("/bn/") != std::string::npos) t = random_normal<float>(t.shape(), rng, 0.3);
    });
    visit_trunk_tensors(m, [&](const std::string& name, Tensor<float>& t, bool) {
      if (name.ends_with("/se/b1") || name.ends_with("/se/b2") || name == "final/bias") {
        t = random_normal<float>(t.shape(), rng, 0.3);
      }
    });
    const auto x = random_normal<float>({3, 96, 64, 1}, rng);
    const auto y = forward_batch(m, x);
    const auto ref = compose(m, x);
    ASSERT_EQ(y.shape(), (Shape{3, 24}));
    EXPECT_EQ(y, ref) << "gap=" << gap;
  }
}

TEST(ForwardTest, TinyHalfWidthSmoke) {
  for (const char* name : {"tiny_0.5_comp_gap", "small_0.5_qat", "large_0.5_gap"}) {
    const auto m = build<float>(ModelConfig::parse(name), 2, {BuildForm::kInference});
    Rng rng(3);
    LogMelSpectrogram s;
    s.frames = random_normal<float>({96, 64}, rng);
    const auto y = forward(m, s);
    EXPECT_EQ(y.size(), 2048u) << name;
    for (float v : y) ASSERT_TRUE(std::isfinite(v)) << name;
  }
}

TEST(ParamCountTest, BottleneckLaws) {
  BuildOptions opt{BuildForm::kInference};
  const auto dense_m = build<float>(ModelConfig::parse("tiny_0.5_gap"), 1, opt);
  const auto comp_m = build<float>(ModelConfig::parse("tiny_0.5_comp_gap"), 1, opt);
  const std::size_t m = dense_m.pooled_dim(), n = 2048, k = 100;
  EXPECT_EQ(bottleneck_param_count(dense_m.bottleneck), m * n + n);
  EXPECT_EQ(bottleneck_param_count(comp_m.bottleneck), k * (m + n) + n);
  EXPECT_EQ(param_count(dense_m) - bottleneck_param_count(dense_m.bottleneck),
            param_count(comp_m) - bottleneck_param_count(comp_m.bottleneck));
}

TEST(ParamCountTest, GapLaw) {
  for (Mv3Size size : kSizeGrid) {
    for (double w : {0.5, 1.0}) {
      const ModelConfig flat{size, w, false, false, false, 64};
      ModelConfig gap = flat;
      gap.gap = true;
      const auto a = build<float>(flat, 1), b = build<float>(gap, 1);
      const auto f = a.feature_map_shape();
      EXPECT_EQ(param_count(a) - param_count(b), (f[0] * f[1] - 1) * f[2] * 64);
    }
  }
}

TEST(ParamCountTest, OrderedBySizeAndWidth) {
  for (double w : kWidthGrid) {
    for (bool gap : {false, true}) {
      std::size_t prev = 0;
      for (Mv3Size size : kSizeGrid) {
        const auto c = ModelConfig{size, w, gap, false, false, 64};
        const std::size_t p = param_count(build<float>(c, 1));
        EXPECT_GT(p, prev) << c.name();
        prev = p;
      }
    }
  }
  for (Mv3Size size : kSizeGrid) {
    for (bool gap : {false, true}) {
      std::size_t prev = 0;
      for (double w : kWidthGrid) {
        const std::size_t p = param_count(build<float>(ModelConfig{size, w, gap, false, false, 64}, 1));
        EXPECT_GE(p, prev);
        prev = p;
      }
    }
  }
}

TEST(BackwardTest, TrunkGradientsMatchFiniteDifferences) {
  ModelConfig c = ModelConfig::parse("tiny_0.5_gap");
  c.embedding_dim = 6;
  BuildOptions opt;
  opt.input_frames = 16;
  opt.input_bins = 12;
  auto m = build_custom<double>(toy_topology(), c, 4, opt);
  Rng rng(5);
  const auto x = random_normal<double>({2, 16, 12, 1}, rng);
  const auto dy = random_normal<double>({2, 6}, rng);
  auto loss = [&](const StudentModel<double>& mm) {
    const auto y = forward_batch(mm, x);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * dy[i];
    return acc;
  };
  ForwardTrace<double> trace;
  forward_batch(m, x, &trace);
  auto grads = zeros_like_model(m);
  backward(m, trace, dy, grads);

  auto params = trainable_tensors(m);
  auto gparams = trainable_tensors(grads);
  ASSERT_EQ(params.size(), gparams.size());
  const double h = 1e-6;
  int checked = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t]->size(); i += 1 + params[t]->size() / 4) {
      const double orig = (*params[t])[i];
      (*params[t])[i] = orig + h;
      const double lp = loss(m);
      (*params[t])[i] = orig - h;
      const double lm = loss(m);
      (*params[t])[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_NEAR((*gparams[t])[i], fd, 1e-5 * std::max(1.0, std::abs(fd)))
          << "tensor " << t << " index " << i;
      ++checked;
    }
  }
  EXPECT_GT(checked, 40);
}

}  // namespace
}  // namespace frill

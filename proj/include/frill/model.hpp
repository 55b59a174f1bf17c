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

#pragma once

// Student networks: a MobileNetV3 trunk (tiny / small / large, width
// multiplier alpha) followed by optional global average pooling and the
// fully connected bottleneck that emits the embedding.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "frill/dsp.hpp"
#include "frill/error.hpp"
#include "frill/kernels.hpp"
#include "frill/lowrank.hpp"
#include "frill/quant.hpp"
#include "frill/tensor.hpp"

namespace frill {

enum class Mv3Size : std::uint8_t { kTiny = 0, kSmall = 1, kLarge = 2 };

inline constexpr std::array<Mv3Size, 3> kSizeGrid{Mv3Size::kTiny, Mv3Size::kSmall,
                                                  Mv3Size::kLarge};
inline constexpr std::array<double, 6> kWidthGrid{0.5, 0.75, 1.0, 1.25, 1.5, 2.0};
inline constexpr int kDefaultEmbeddingDim = 2048;

inline std::string_view size_name(Mv3Size size) {
  switch (size) {
    case Mv3Size::kTiny: return "tiny";
    case Mv3Size::kSmall: return "small";
    case Mv3Size::kLarge: return "large";
  }
  fail(ErrorCode::kConfig, "unknown MobileNetV3 size ", static_cast<int>(size));
}

inline std::string format_width(double width) {
  std::ostringstream oss;
  oss << width;
  std::string s = oss.str();
  if (s.find('.') == std::string::npos) s += ".0";
  return s;
}

struct ModelConfig {
  Mv3Size size = Mv3Size::kSmall;
  double width = 1.0;
  bool gap = false;
  bool compressed = false;
  bool qat = false;
  int embedding_dim = kDefaultEmbeddingDim;

  // e.g. "small_2.0_gap", "tiny_0.5_comp_gap_qat"; a non-default embedding
  // size is appended as "_d<N>".
  std::string name() const {
    std::string s = std::string(size_name(size)) + "_" + format_width(width);
    if (compressed) s += "_comp";
    if (gap) s += "_gap";
    if (qat) s += "_qat";
    if (embedding_dim != kDefaultEmbeddingDim) {
      s += "_d" + std::to_string(embedding_dim);
    }
    return s;
  }

  void validate() const {
    if (static_cast<int>(size) > 2) {
      fail(ErrorCode::kConfig, "unknown MobileNetV3 size ", static_cast<int>(size));
    }
    const bool on_grid = std::any_of(kWidthGrid.begin(), kWidthGrid.end(),
                                     [&](double w) { return std::abs(w - width) < 1e-9; });
    if (!on_grid) {
      fail(ErrorCode::kConfig, "width ", width,
           " is not one of 0.5, 0.75, 1.0, 1.25, 1.5, 2.0");
    }
    if (embedding_dim <= 0) {
      fail(ErrorCode::kConfig, "embedding_dim must be positive, got ", embedding_dim);
    }
  }

  static ModelConfig parse(std::string_view text) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : text) {
      if (ch == '_') {
        parts.push_back(cur);
        cur.clear();
      } else {
        cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      }
    }
    parts.push_back(cur);
    if (parts.size() < 2) {
      fail(ErrorCode::kConfig, "config name '", text,
           "' must look like <size>_<width>[_comp][_gap][_qat]");
    }
    ModelConfig c;
    if (parts[0] == "tiny") c.size = Mv3Size::kTiny;
    else if (parts[0] == "small") c.size = Mv3Size::kSmall;
    else if (parts[0] == "large") c.size = Mv3Size::kLarge;
    else fail(ErrorCode::kConfig, "unknown MobileNetV3 size '", parts[0], "'");
    try {
      std::size_t used = 0;
      c.width = std::stod(parts[1], &used);
      if (used != parts[1].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      fail(ErrorCode::kConfig, "bad width '", parts[1], "' in '", text, "'");
    }
    for (std::size_t i = 2; i < parts.size(); ++i) {
      const std::string& p = parts[i];
      bool* flag = nullptr;
      if (p == "comp") flag = &c.compressed;
      else if (p == "gap") flag = &c.gap;
      else if (p == "qat") flag = &c.qat;
      if (flag) {
        if (*flag) fail(ErrorCode::kConfig, "flag '", p, "' repeated in '", text, "'");
        *flag = true;
        continue;
      }
      if (p.size() > 1 && p[0] == 'd' &&
          std::all_of(p.begin() + 1, p.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
        c.embedding_dim = std::stoi(p.substr(1));
        continue;
      }
      fail(ErrorCode::kConfig, "unknown config token '", p, "' in '", text, "'");
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// All 3 x 6 x 2 x 2 x 2 = 144 hyperparameter combinations.
inline std::vector<ModelConfig> enumerate_grid(int embedding_dim = kDefaultEmbeddingDim) {
  std::vector<ModelConfig> out;
  for (Mv3Size size : kSizeGrid) {
    for (double width : kWidthGrid) {
      for (bool gap : {false, true}) {
        for (bool comp : {false, true}) {
          for (bool qat : {false, true}) {
            out.push_back({size, width, gap, comp, qat, embedding_dim});
          }
        }
      }
    }
  }
  return out;
}

// Scales a channel count by alpha and rounds to the nearest multiple of 8
// (minimum 8), bumping up one step if rounding lost more than 10%.
inline int width_scale(int channels, double alpha) {
  constexpr int kDivisor = 8;
  const double target = static_cast<double>(channels) * alpha;
  int rounded = std::max(kDivisor, static_cast<int>(target + kDivisor / 2.0) /
                                       kDivisor * kDivisor);
  if (rounded < 0.9 * target) rounded += kDivisor;
  return rounded;
}

enum class Activation : std::uint8_t { kNone = 0, kRelu = 1, kHardSwish = 2 };

struct BlockSpec {
  int kernel = 3;
  int expansion = 16;
  int out = 16;
  bool se = false;
  Activation act = Activation::kRelu;
  int stride = 1;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct Topology {
  int stem = 16;
  std::vector<BlockSpec> blocks;
  int last_conv = 576;
  int final_conv = 1024;

  friend bool operator==(const Topology&, const Topology&) = default;
};

inline Topology small_reference_topology() {
  constexpr auto RE = Activation::kRelu;
  constexpr auto HS = Activation::kHardSwish;
  return {16,
          {
              {3, 16, 16, true, RE, 2},
              {3, 72, 24, false, RE, 2},
              {3, 88, 24, false, RE, 1},
              {5, 96, 40, true, HS, 2},
              {5, 240, 40, true, HS, 1},
              {5, 240, 40, true, HS, 1},
              {5, 120, 48, true, HS, 1},
              {5, 144, 48, true, HS, 1},
              {5, 288, 96, true, HS, 2},
              {5, 576, 96, true, HS, 1},
              {5, 576, 96, true, HS, 1},
          },
          576,
          1024};
}

inline Topology large_reference_topology() {
  constexpr auto RE = Activation::kRelu;
  constexpr auto HS = Activation::kHardSwish;
  return {16,
          {
              {3, 16, 16, false, RE, 1},
              {3, 64, 24, false, RE, 2},
              {3, 72, 24, false, RE, 1},
              {5, 72, 40, true, RE, 2},
              {5, 120, 40, true, RE, 1},
              {5, 120, 40, true, RE, 1},
              {3, 240, 80, false, HS, 2},
              {3, 200, 80, false, HS, 1},
              {3, 184, 80, false, HS, 1},
              {3, 184, 80, false, HS, 1},
              {3, 480, 112, true, HS, 1},
              {3, 672, 112, true, HS, 1},
              {5, 672, 160, true, HS, 2},
              {5, 960, 160, true, HS, 1},
              {5, 960, 160, true, HS, 1},
          },
          960,
          1280};
}

// Small with blocks 6 and 11 (1-indexed) removed and the final conv halved.
// Both removed blocks must repeat their predecessor exactly.
inline Topology tiny_reference_topology() {
  Topology t = small_reference_topology();
  for (std::size_t one_indexed : {std::size_t{11}, std::size_t{6}}) {
    const std::size_t i = one_indexed - 1;
    if (!(t.blocks[i] == t.blocks[i - 1])) {
      fail(ErrorCode::kConfig, "block ", one_indexed,
           " of the small topology does not duplicate its predecessor");
    }
    t.blocks.erase(t.blocks.begin() + static_cast<std::ptrdiff_t>(i));
  }
  t.final_conv = 512;
  return t;
}

inline Topology reference_topology(Mv3Size size) {
  switch (size) {
    case Mv3Size::kTiny: return tiny_reference_topology();
    case Mv3Size::kSmall: return small_reference_topology();
    case Mv3Size::kLarge: return large_reference_topology();
  }
  fail(ErrorCode::kConfig, "unknown MobileNetV3 size ", static_cast<int>(size));
}

// Every channel count (stem, blocks, last and final convs) is scaled.
inline Topology scale_topology(const Topology& t, double alpha) {
  Topology s = t;
  s.stem = width_scale(t.stem, alpha);
  for (auto& b : s.blocks) {
    b.expansion = width_scale(b.expansion, alpha);
    b.out = width_scale(b.out, alpha);
  }
  s.last_conv = width_scale(t.last_conv, alpha);
  s.final_conv = width_scale(t.final_conv, alpha);
  return s;
}

// Two-block network used for desk-scale training runs.
inline Topology toy_topology() {
  return {8,
          {
              {3, 16, 8, false, Activation::kRelu, 2},
              {3, 24, 16, true, Activation::kHardSwish, 2},
          },
          32,
          32};
}

inline int squeeze_channels(int expanded) { return width_scale(expanded, 0.25); }

template <typename T>
T activate(Activation act, T v) {
  switch (act) {
    case Activation::kRelu: return relu(v);
    case Activation::kHardSwish: return hard_swish(v);
    case Activation::kNone: break;
  }
  return v;
}

template <typename T>
T activation_derivative(Activation act, T v) {
  switch (act) {
    case Activation::kRelu: return relu_derivative(v);
    case Activation::kHardSwish: return hard_swish_derivative(v);
    case Activation::kNone: break;
  }
  return T{1};
}

template <typename T>
struct BatchNorm {
  Tensor<T> mean, var, gamma, beta;
  T eps = static_cast<T>(1e-3);

  static BatchNorm identity(std::size_t channels) {
    return {Tensor<T>({channels}), Tensor<T>({channels}, T{1}),
            Tensor<T>({channels}, T{1}), Tensor<T>({channels}), static_cast<T>(1e-3)};
  }

  Tensor<T> multiplier() const {
    Tensor<T> m({gamma.size()});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = gamma[i] / std::sqrt(var[i] + eps);
    return m;
  }
};

// Convolution (full or depthwise), batch norm, activation.
template <typename T>
struct ConvUnit {
  Tensor<T> kernel;  // [KH,KW,Cin,Cout], or [KH,KW,C] when depthwise
  BatchNorm<T> bn;
  Activation act = Activation::kNone;
  std::size_t stride = 1;
  bool depthwise = false;

  std::size_t out_channels() const { return kernel.shape().back(); }
};

template <typename T>
struct SqueezeExcite {
  Tensor<T> w1, b1;  // [C, S], [S]
  Tensor<T> w2, b2;  // [S, C], [C]
};

template <typename T>
struct InvertedResidual {
  BlockSpec spec;
  int in_channels = 0;
  std::optional<ConvUnit<T>> expand;
  ConvUnit<T> depthwise;
  std::optional<SqueezeExcite<T>> se;
  ConvUnit<T> project;

  bool residual() const { return spec.stride == 1 && in_channels == spec.out; }
};

template <typename T>
struct DenseLayer {
  Tensor<T> w;  // [m, n]
  Tensor<T> b;  // [n]

  std::size_t param_count() const { return w.size() + b.size(); }
};

template <typename T>
using Bottleneck =
    std::variant<DenseLayer<T>, LowRankDense<T>, QuantizedDense<T>, QuantizedLowRank<T>>;

template <typename T>
std::size_t bottleneck_param_count(const Bottleneck<T>& b) {
  return std::visit([](const auto& layer) { return layer.param_count(); }, b);
}

template <typename T>
std::size_t bottleneck_input_dim(const Bottleneck<T>& b) {
  return std::visit(
      [](const auto& layer) -> std::size_t {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, DenseLayer<T>>) return layer.w.dim(0);
        else if constexpr (std::is_same_v<L, LowRankDense<T>>) return layer.rows();
        else if constexpr (std::is_same_v<L, QuantizedDense<T>>) return layer.kernel.rows();
        else return layer.u.rows();
      },
      b);
}

template <typename T>
struct StudentModel {
  ModelConfig config;
  Topology topology;  // already width-scaled
  std::size_t input_frames = FrontendConfig::kContextFrames;
  std::size_t input_bins = FrontendConfig::kNumMelBins;

  ConvUnit<T> stem;
  std::vector<InvertedResidual<T>> blocks;
  ConvUnit<T> last_conv;
  Tensor<T> final_kernel;  // [1,1,Clast,Cfinal], no batch norm
  Tensor<T> final_bias;
  Bottleneck<T> bottleneck;

  // When set, float bottleneck kernels pass through fake quantization.
  bool fake_quant_active = false;

  // [H, W, C] of the map entering pooling / flattening.
  Shape feature_map_shape() const {
    std::size_t h = input_frames, w = input_bins;
    auto stride_down = [&](std::size_t k, std::size_t s) {
      h = axis_geometry(h, k, s, Padding::kSame).out;
      w = axis_geometry(w, k, s, Padding::kSame).out;
    };
    stride_down(3, stem.stride);
    for (const auto& b : blocks) stride_down(b.spec.kernel, b.spec.stride);
    return {h, w, final_kernel.dim(3)};
  }

  // Length of the vector handed to the bottleneck.
  std::size_t pooled_dim() const {
    const Shape f = feature_map_shape();
    return config.gap ? f[2] : f[0] * f[1] * f[2];
  }

  std::size_t embedding_dim() const {
    return std::visit(
        [](const auto& layer) -> std::size_t { return layer.b.size(); }, bottleneck);
  }

  std::size_t num_blocks() const { return blocks.size(); }
  std::size_t final_conv_channels() const { return final_kernel.dim(3); }
};

enum class BuildForm {
  // Float bottleneck; a compressed bottleneck keeps W and starts at
  // lambda = 1 with U, V taken from the SVD of W.
  kTraining,
  // Export layout: compressed bottlenecks hold only seeded factors
  // (lambda = 0) and QAT bottlenecks hold int8 kernels.
  kInference,
};

struct BuildOptions {
  BuildForm form = BuildForm::kTraining;
  std::size_t compression_rank = kDefaultCompressionRank;
  std::size_t input_frames = FrontendConfig::kContextFrames;
  std::size_t input_bins = FrontendConfig::kNumMelBins;
};

namespace detail {

template <typename T>
Tensor<T> he_kernel(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> k(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : k.data()) v = static_cast<T>(stddev * rng.truncated_normal());
  return k;
}

template <typename T>
ConvUnit<T> make_conv(std::size_t kernel, std::size_t cin, std::size_t cout,
                      std::size_t stride, Activation act, Rng& rng) {
  ConvUnit<T> u;
  u.kernel = he_kernel<T>({kernel, kernel, cin, cout}, kernel * kernel * cin, rng);
  u.bn = BatchNorm<T>::identity(cout);
  u.act = act;
  u.stride = stride;
  return u;
}

template <typename T>
ConvUnit<T> make_depthwise(std::size_t kernel, std::size_t channels,
                           std::size_t stride, Activation act, Rng& rng) {
  ConvUnit<T> u;
  u.kernel = he_kernel<T>({kernel, kernel, channels}, kernel * kernel, rng);
  u.bn = BatchNorm<T>::identity(channels);
  u.act = act;
  u.stride = stride;
  u.depthwise = true;
  return u;
}

}  // namespace detail

namespace detail {

// Trunk only; the bottleneck is left empty for the caller to fill.
template <typename T>
StudentModel<T> build_trunk(const Topology& topology, const ModelConfig& config,
                            const BuildOptions& options, Rng& rng) {
  if (config.embedding_dim <= 0) {
    fail(ErrorCode::kConfig, "embedding_dim must be positive");
  }
  if (topology.blocks.empty()) fail(ErrorCode::kConfig, "topology has no blocks");
  StudentModel<T> m;
  m.config = config;
  m.topology = topology;
  m.input_frames = options.input_frames;
  m.input_bins = options.input_bins;

  m.stem = make_conv<T>(3, 1, static_cast<std::size_t>(topology.stem), 2,
                        Activation::kHardSwish, rng);
  int channels = topology.stem;
  for (const BlockSpec& spec : topology.blocks) {
    InvertedResidual<T> b;
    b.spec = spec;
    b.in_channels = channels;
    const auto k = static_cast<std::size_t>(spec.kernel);
    const auto exp = static_cast<std::size_t>(spec.expansion);
    if (spec.expansion != channels) {
      b.expand = make_conv<T>(1, static_cast<std::size_t>(channels), exp, 1, spec.act, rng);
    }
    b.depthwise = make_depthwise<T>(k, exp, static_cast<std::size_t>(spec.stride),
                                    spec.act, rng);
    if (spec.se) {
      const auto sq = static_cast<std::size_t>(squeeze_channels(spec.expansion));
      SqueezeExcite<T> se;
      se.w1 = he_kernel<T>({exp, sq}, exp, rng);
      se.b1 = Tensor<T>({sq});
      se.w2 = he_kernel<T>({sq, exp}, sq, rng);
      se.b2 = Tensor<T>({exp});
      b.se = std::move(se);
    }
    b.project = make_conv<T>(1, exp, static_cast<std::size_t>(spec.out), 1,
                             Activation::kNone, rng);
    channels = spec.out;
    m.blocks.push_back(std::move(b));
  }
  const auto last = static_cast<std::size_t>(topology.last_conv);
  const auto fin = static_cast<std::size_t>(topology.final_conv);
  m.last_conv = make_conv<T>(1, static_cast<std::size_t>(channels), last, 1,
                             Activation::kHardSwish, rng);
  m.final_kernel = he_kernel<T>({1, 1, last, fin}, last, rng);
  m.final_bias = Tensor<T>({fin});
  return m;
}

}  // namespace detail

template <typename T = float>
StudentModel<T> build_custom(const Topology& topology, const ModelConfig& config,
                             std::uint64_t seed, const BuildOptions& options = {}) {
  Rng rng(seed);
  StudentModel<T> m = detail::build_trunk<T>(topology, config, options, rng);

  const std::size_t in_dim = m.pooled_dim();
  const auto emb = static_cast<std::size_t>(config.embedding_dim);
  const double w_std = std::sqrt(1.0 / static_cast<double>(in_dim));
  Tensor<T> bias({emb});

  if (config.compressed) {
    const std::size_t k = options.compression_rank;
    if (k == 0 || k > std::min(in_dim, emb)) {
      fail(ErrorCode::kRank, "compression rank ", k, " must be in [1, min(",
           in_dim, ", ", emb, ")]");
    }
    if (options.form == BuildForm::kTraining) {
      Tensor<T> w = random_normal<T>({in_dim, emb}, rng, w_std);
      m.bottleneck = LowRankDense<T>::from_kernel(std::move(w), std::move(bias), k);
    } else {
      LowRankDense<T> layer;
      layer.u = random_normal<T>({in_dim, k}, rng, w_std);
      layer.v = random_normal<T>({emb, k}, rng, std::sqrt(1.0 / static_cast<double>(k)));
      layer.b = std::move(bias);
      layer.lambda = 0.0;
      if (config.qat) {
        m.bottleneck = QuantizedLowRank<T>{quantize_matrix(layer.u),
                                           quantize_matrix(layer.v), layer.b};
      } else {
        m.bottleneck = std::move(layer);
      }
    }
  } else {
    Tensor<T> w = random_normal<T>({in_dim, emb}, rng, w_std);
    if (config.qat && options.form == BuildForm::kInference) {
      m.bottleneck = quantize_layer(w, bias);
    } else {
      m.bottleneck = DenseLayer<T>{std::move(w), std::move(bias)};
    }
  }
  return m;
}

template <typename T = float>
StudentModel<T> build(const ModelConfig& config, std::uint64_t seed,
                      const BuildOptions& options = {}) {
  config.validate();
  const Topology t = scale_topology(reference_topology(config.size), config.width);
  return build_custom<T>(t, config, seed, options);
}

// ---------------------------------------------------------------------------
// Forward pass. The optional trace records what backward() needs.

template <typename T>
struct ConvCache {
  Tensor<T> input;
  Tensor<T> pre_activation;
};

template <typename T>
struct SqueezeCache {
  Tensor<T> input;   // [N,H,W,C]
  Tensor<T> pooled;  // [N,C]
  Tensor<T> z1, z2, gate;
};

template <typename T>
struct BlockCache {
  Tensor<T> input;
  std::optional<ConvCache<T>> expand;
  ConvCache<T> depthwise;
  std::optional<SqueezeCache<T>> se;
  ConvCache<T> project;
};

template <typename T>
struct ForwardTrace {
  ConvCache<T> stem;
  std::vector<BlockCache<T>> blocks;
  ConvCache<T> last;
  Tensor<T> final_input;
  Tensor<T> final_pre_activation;
  Tensor<T> pooled;  // bottleneck input [N, D]
};

namespace detail {

template <typename T>
Tensor<T> apply_conv_unit(const ConvUnit<T>& u, const Tensor<T>& x,
                          ConvCache<T>* cache) {
  Tensor<T> z = u.depthwise ? depthwise_conv2d(x, u.kernel, u.stride, Padding::kSame)
                            : conv2d(x, u.kernel, u.stride, Padding::kSame);
  z = batchnorm_fold(z, u.bn.mean, u.bn.var, u.bn.gamma, u.bn.beta, u.bn.eps);
  Tensor<T> a = z;
  if (u.act != Activation::kNone) {
    for (auto& v : a.data()) v = activate(u.act, v);
  }
  if (cache) {
    cache->input = x;
    cache->pre_activation = std::move(z);
  }
  return a;
}

template <typename T>
Tensor<T> apply_squeeze_excite(const SqueezeExcite<T>& se, const Tensor<T>& x,
                               SqueezeCache<T>* cache) {
  Tensor<T> pooled = global_avg_pool(x);
  Tensor<T> z1 = dense(pooled, se.w1, se.b1);
  Tensor<T> z2 = dense(relu(z1), se.w2, se.b2);
  Tensor<T> gate = hard_sigmoid(z2);
  Tensor<T> y = x;
  const std::size_t c = x.dim(3), pixels = x.dim(1) * x.dim(2);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t p = 0; p < pixels; ++p) {
      T* row = &y[(n * pixels + p) * c];
      for (std::size_t k = 0; k < c; ++k) row[k] *= gate[n * c + k];
    }
  }
  if (cache) *cache = {x, std::move(pooled), std::move(z1), std::move(z2), std::move(gate)};
  return y;
}

template <typename T>
Tensor<T> apply_block(const InvertedResidual<T>& b, const Tensor<T>& x,
                      BlockCache<T>* cache) {
  Tensor<T> h;
  if (b.expand) {
    if (cache) cache->expand.emplace();
    h = apply_conv_unit(*b.expand, x, cache ? &*cache->expand : nullptr);
  } else {
    h = x;
  }
  h = apply_conv_unit(b.depthwise, h, cache ? &cache->depthwise : nullptr);
  if (b.se) {
    if (cache) cache->se.emplace();
    h = apply_squeeze_excite(*b.se, h, cache ? &*cache->se : nullptr);
  }
  h = apply_conv_unit(b.project, h, cache ? &cache->project : nullptr);
  if (b.residual()) {
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += x[i];
  }
  if (cache) cache->input = x;
  return h;
}

template <typename T>
Tensor<T> quantized_if(const Tensor<T>& w, bool active) {
  return active ? fake_quant(w, choose_scale(w)) : w;
}

// Layer used for the float forward pass: fake-quantized copies of the
// kernels when QAT is live, otherwise the stored kernels.
template <typename T>
LowRankDense<T> effective_low_rank(const LowRankDense<T>& l, bool fq) {
  if (!fq) return l;
  LowRankDense<T> e;
  if (l.w) e.w = quantized_if(*l.w, true);
  e.u = quantized_if(l.u, true);
  e.v = quantized_if(l.v, true);
  e.b = l.b;
  e.lambda = l.lambda;
  return e;
}

}  // namespace detail

template <typename T>
Tensor<T> bottleneck_forward(const Bottleneck<T>& bottleneck, const Tensor<T>& x,
                             bool fake_quant_active) {
  return std::visit(
      [&](const auto& layer) -> Tensor<T> {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, DenseLayer<T>>) {
          if (!fake_quant_active) return dense(x, layer.w, layer.b);
          return dense(x, detail::quantized_if(layer.w, true), layer.b);
        } else if constexpr (std::is_same_v<L, LowRankDense<T>>) {
          if (!fake_quant_active) return mixed_forward(layer, x);
          return mixed_forward(detail::effective_low_rank(layer, true), x);
        } else {
          return int_forward(layer, x);
        }
      },
      bottleneck);
}

// x: [N, frames, bins, 1] -> embeddings [N, embedding_dim].
template <typename T>
Tensor<T> forward_batch(const StudentModel<T>& m, const Tensor<T>& x,
                        ForwardTrace<T>* trace = nullptr) {
  if (x.rank() != 4 || x.dim(1) != m.input_frames || x.dim(2) != m.input_bins ||
      x.dim(3) != 1) {
    fail(ErrorCode::kShape, "model expects input [N,", m.input_frames, ",",
         m.input_bins, ",1], got ", shape_string(x.shape()));
  }
  if (trace) trace->blocks.assign(m.blocks.size(), {});
  Tensor<T> h = detail::apply_conv_unit(m.stem, x, trace ? &trace->stem : nullptr);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    h = detail::apply_block(m.blocks[i], h, trace ? &trace->blocks[i] : nullptr);
  }
  h = detail::apply_conv_unit(m.last_conv, h, trace ? &trace->last : nullptr);
  if (trace) trace->final_input = h;
  Tensor<T> z = conv2d(h, m.final_kernel, 1, Padding::kSame);
  const std::size_t fc = m.final_kernel.dim(3);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += m.final_bias[i % fc];
  Tensor<T> a = hard_swish(z);
  Tensor<T> pooled = m.config.gap ? global_avg_pool(a) : flatten_concat(a);
  Tensor<T> y = bottleneck_forward(m.bottleneck, pooled, m.fake_quant_active);
  if (trace) {
    trace->final_pre_activation = std::move(z);
    trace->pooled = std::move(pooled);
  }
  return y;
}

template <typename T>
Tensor<T> spectrogram_batch(const std::vector<const LogMelSpectrogram*>& specs) {
  if (specs.empty()) fail(ErrorCode::kShape, "empty spectrogram batch");
  const std::size_t f = specs[0]->num_frames(), b = specs[0]->num_mel_bins();
  Tensor<T> x({specs.size(), f, b, 1});
  for (std::size_t n = 0; n < specs.size(); ++n) {
    const auto& s = specs[n]->frames;
    if (s.shape() != Shape{f, b}) {
      fail(ErrorCode::kShape, "spectrogram ", shape_string(s.shape()),
           " differs from batch shape ", shape_string({f, b}));
    }
    for (std::size_t i = 0; i < s.size(); ++i) x[n * s.size() + i] = static_cast<T>(s[i]);
  }
  return x;
}

template <typename T>
std::vector<T> forward(const StudentModel<T>& m, const LogMelSpectrogram& spec) {
  if (spec.frames.rank() != 2 || spec.num_frames() != m.input_frames ||
      spec.num_mel_bins() != m.input_bins) {
    fail(ErrorCode::kShape, "model expects a ", m.input_frames, "x", m.input_bins,
         " spectrogram, got ", shape_string(spec.frames.shape()));
  }
  const Tensor<T> y = forward_batch(m, spectrogram_batch<T>({&spec}));
  return y.storage();
}

// ---------------------------------------------------------------------------
// Parameter traversal.

// Visits every stored floating-point trunk tensor with a stable name.
// Bottleneck tensors are not included.
template <typename M, typename F>
void visit_trunk_tensors(M& m, F&& f) {
  auto conv = [&](const std::string& prefix, auto& unit) {
    f(prefix + "/kernel", unit.kernel, true);
    f(prefix + "/bn/mean", unit.bn.mean, false);
    f(prefix + "/bn/var", unit.bn.var, false);
    f(prefix + "/bn/gamma", unit.bn.gamma, false);
    f(prefix + "/bn/beta", unit.bn.beta, false);
  };
  conv("stem", m.stem);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "block" + std::to_string(i + 1);
    if (b.expand) conv(p + "/expand", *b.expand);
    conv(p + "/depthwise", b.depthwise);
    if (b.se) {
      f(p + "/se/w1", b.se->w1, true);
      f(p + "/se/b1", b.se->b1, true);
      f(p + "/se/w2", b.se->w2, true);
      f(p + "/se/b2", b.se->b2, true);
    }
    conv(p + "/project", b.project);
  }
  conv("last", m.last_conv);
  f(std::string("final/kernel"), m.final_kernel, true);
  f(std::string("final/bias"), m.final_bias, true);
}

template <typename T>
std::size_t param_count(const StudentModel<T>& m) {
  std::size_t total = 0;
  visit_trunk_tensors(m, [&](const std::string&, const Tensor<T>& t, bool) {
    total += t.size();
  });
  return total + bottleneck_param_count(m.bottleneck);
}

// Trainable tensors in a fixed order; the same order on a gradient mirror
// lines parameters up with their gradients.
template <typename T>
std::vector<Tensor<T>*> trainable_tensors(StudentModel<T>& m,
                                          bool include_full_kernel = true) {
  std::vector<Tensor<T>*> out;
  visit_trunk_tensors(m, [&](const std::string&, Tensor<T>& t, bool trainable) {
    if (trainable) out.push_back(&t);
  });
  std::visit(
      [&](auto& layer) {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, DenseLayer<T>>) {
          out.push_back(&layer.w);
          out.push_back(&layer.b);
        } else if constexpr (std::is_same_v<L, LowRankDense<T>>) {
          if (layer.w && include_full_kernel) out.push_back(&*layer.w);
          out.push_back(&layer.u);
          out.push_back(&layer.v);
          out.push_back(&layer.b);
        } else {
          fail(ErrorCode::kConfig, "quantized bottlenecks are inference-only");
        }
      },
      m.bottleneck);
  return out;
}

template <typename T>
StudentModel<T> zeros_like_model(const StudentModel<T>& m) {
  StudentModel<T> g = m;
  visit_trunk_tensors(g, [](const std::string&, Tensor<T>& t, bool) { t.fill(T{0}); });
  std::visit(
      [](auto& layer) {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, DenseLayer<T>>) {
          layer.w.fill(T{0});
          layer.b.fill(T{0});
        } else if constexpr (std::is_same_v<L, LowRankDense<T>>) {
          if (layer.w) layer.w->fill(T{0});
          layer.u.fill(T{0});
          layer.v.fill(T{0});
          layer.b.fill(T{0});
        } else {
          fail(ErrorCode::kConfig, "quantized bottlenecks are inference-only");
        }
      },
      g.bottleneck);
  return g;
}

// ---------------------------------------------------------------------------
// Backward pass. Gradients accumulate into `grads`, a zeros_like_model()
// mirror. Batch-norm parameters are frozen and receive no gradient.

namespace detail {

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

template <typename T>
Tensor<T> backward_conv_unit(const ConvUnit<T>& u, const ConvCache<T>& c,
                             const Tensor<T>& da, ConvUnit<T>& g) {
  Tensor<T> dz = da;
  const Tensor<T> mult = u.bn.multiplier();
  const std::size_t ch = mult.size();
  for (std::size_t i = 0; i < dz.size(); ++i) {
    dz[i] *= activation_derivative(u.act, c.pre_activation[i]) * mult[i % ch];
  }
  auto cg = u.depthwise
                ? depthwise_conv2d_backward(c.input, u.kernel, u.stride, Padding::kSame, dz)
                : conv2d_backward(c.input, u.kernel, u.stride, Padding::kSame, dz);
  add_into(g.kernel, cg.dkernel);
  return std::move(cg.dx);
}

template <typename T>
Tensor<T> backward_squeeze_excite(const SqueezeExcite<T>& se, const SqueezeCache<T>& c,
                                  const Tensor<T>& dy, SqueezeExcite<T>& g) {
  const Tensor<T>& x = c.input;
  const std::size_t n_batch = x.dim(0), ch = x.dim(3), pixels = x.dim(1) * x.dim(2);
  Tensor<T> dx = dy;
  Tensor<T> dgate({n_batch, ch});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t p = 0; p < pixels; ++p) {
      const std::size_t base = (n * pixels + p) * ch;
      for (std::size_t k = 0; k < ch; ++k) {
        dgate[n * ch + k] += dy[base + k] * x[base + k];
        dx[base + k] = dy[base + k] * c.gate[n * ch + k];
      }
    }
  }
  Tensor<T> dz2 = dgate;
  for (std::size_t i = 0; i < dz2.size(); ++i) dz2[i] *= hard_sigmoid_derivative(c.z2[i]);
  const Tensor<T> r = relu(c.z1);
  auto g2 = dense_backward(r, se.w2, dz2);
  add_into(g.w2, g2.dw);
  add_into(g.b2, g2.db);
  Tensor<T> dz1 = g2.dx;
  for (std::size_t i = 0; i < dz1.size(); ++i) dz1[i] *= relu_derivative(c.z1[i]);
  auto g1 = dense_backward(c.pooled, se.w1, dz1);
  add_into(g.w1, g1.dw);
  add_into(g.b1, g1.db);
  add_into(dx, global_avg_pool_backward(x.shape(), g1.dx));
  return dx;
}

template <typename T>
Tensor<T> backward_block(const InvertedResidual<T>& b, const BlockCache<T>& c,
                         const Tensor<T>& dy, InvertedResidual<T>& g) {
  Tensor<T> d = backward_conv_unit(b.project, c.project, dy, g.project);
  if (b.se) d = backward_squeeze_excite(*b.se, *c.se, d, *g.se);
  d = backward_conv_unit(b.depthwise, c.depthwise, d, g.depthwise);
  if (b.expand) d = backward_conv_unit(*b.expand, *c.expand, d, *g.expand);
  if (b.residual()) add_into(d, dy);
  return d;
}

template <typename T>
void mask_into(Tensor<T>& acc, const Tensor<T>& grad, const Tensor<T>* mask) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i] += mask ? grad[i] * (*mask)[i] : grad[i];
  }
}

}  // namespace detail

// Backprop through the bottleneck only; returns d(loss)/d(input).
template <typename T>
Tensor<T> bottleneck_backward(const Bottleneck<T>& bottleneck, bool fake_quant_active,
                              const Tensor<T>& x, const Tensor<T>& dy,
                              Bottleneck<T>& grads) {
  return std::visit(
      [&](const auto& layer) -> Tensor<T> {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, DenseLayer<T>>) {
          auto& g = std::get<DenseLayer<T>>(grads);
          const Tensor<T> w = detail::quantized_if(layer.w, fake_quant_active);
          auto dg = dense_backward(x, w, dy);
          std::optional<Tensor<T>> mask;
          if (fake_quant_active) mask = fake_quant_grad_mask(layer.w, choose_scale(layer.w));
          detail::mask_into(g.w, dg.dw, mask ? &*mask : nullptr);
          detail::add_into(g.b, dg.db);
          return std::move(dg.dx);
        } else if constexpr (std::is_same_v<L, LowRankDense<T>>) {
          auto& g = std::get<LowRankDense<T>>(grads);
          const LowRankDense<T> eff = detail::effective_low_rank(layer, fake_quant_active);
          auto fg = factor_gradients(eff, x, dy);
          auto masked = [&](Tensor<T>& acc, const Tensor<T>& grad, const Tensor<T>& param) {
            if (!fake_quant_active) return detail::mask_into<T>(acc, grad, nullptr);
            const Tensor<T> m = fake_quant_grad_mask(param, choose_scale(param));
            detail::mask_into(acc, grad, &m);
          };
          if (fg.dw && layer.w && g.w) masked(*g.w, *fg.dw, *layer.w);
          masked(g.u, fg.du, layer.u);
          masked(g.v, fg.dv, layer.v);
          detail::add_into(g.b, fg.db);
          return std::move(fg.dx);
        } else {
          fail(ErrorCode::kConfig, "quantized bottlenecks are inference-only");
        }
      },
      bottleneck);
}

// Full backward pass given d(loss)/d(embedding).
template <typename T>
void backward(const StudentModel<T>& m, const ForwardTrace<T>& trace,
              const Tensor<T>& d_embedding, StudentModel<T>& grads) {
  Tensor<T> d = bottleneck_backward(m.bottleneck, m.fake_quant_active, trace.pooled,
                                    d_embedding, grads.bottleneck);
  const Shape& pre = trace.final_pre_activation.shape();
  if (m.config.gap) {
    d = global_avg_pool_backward(pre, d);
  } else {
    d = d.reshaped(pre);
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    d[i] *= hard_swish_derivative(trace.final_pre_activation[i]);
  }
  const std::size_t fc = m.final_kernel.dim(3);
  for (std::size_t i = 0; i < d.size(); ++i) grads.final_bias[i % fc] += d[i];
  auto cg = conv2d_backward(trace.final_input, m.final_kernel, 1, Padding::kSame, d);
  detail::add_into(grads.final_kernel, cg.dkernel);
  d = detail::backward_conv_unit(m.last_conv, trace.last, cg.dx, grads.last_conv);
  for (std::size_t i = m.blocks.size(); i-- > 0;) {
    d = detail::backward_block(m.blocks[i], trace.blocks[i], d, grads.blocks[i]);
  }
  detail::backward_conv_unit(m.stem, trace.stem, d, grads.stem);
}

}  // namespace frill

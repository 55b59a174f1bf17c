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

// Symmetric per-tensor int8 weight quantization: q = round(clamp(w / s,
// -127, 127)), zero point 0. Activations stay in floating point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "frill/error.hpp"
#include "frill/tensor.hpp"

namespace frill {

struct QuantSpec {
  int num_bits = 8;
  float scale = 1.0f;
  int zero_point = 0;

  static constexpr int kMaxLevel = 127;
};

// scale = max|W| / 127; an all-zero tensor gets scale 1.
template <typename T>
QuantSpec choose_scale(const Tensor<T>& w) {
  double max_abs = 0.0;
  for (T v : w.data()) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
  QuantSpec spec;
  spec.scale = max_abs > 0.0
                   ? static_cast<float>(max_abs / QuantSpec::kMaxLevel)
                   : 1.0f;
  return spec;
}

template <typename T>
std::int8_t quantize_value(T w, const QuantSpec& spec) {
  const T level = std::clamp(w / static_cast<T>(spec.scale),
                             static_cast<T>(-QuantSpec::kMaxLevel),
                             static_cast<T>(QuantSpec::kMaxLevel));
  return static_cast<std::int8_t>(std::round(level));
}

template <typename T>
Tensor<T> fake_quant(const Tensor<T>& w, const QuantSpec& spec) {
  Tensor<T> out = w;
  const T s = static_cast<T>(spec.scale);
  for (auto& v : out.data()) v = static_cast<T>(quantize_value(v, spec)) * s;
  return out;
}

// Straight-through estimator: gradient 1 inside the representable range,
// 0 where the forward pass saturated.
template <typename T>
Tensor<T> fake_quant_grad_mask(const Tensor<T>& w, const QuantSpec& spec) {
  Tensor<T> mask(w.shape());
  const T limit = static_cast<T>(QuantSpec::kMaxLevel);
  const T s = static_cast<T>(spec.scale);
  for (std::size_t i = 0; i < w.size(); ++i) {
    mask[i] = std::abs(w[i] / s) <= limit ? T{1} : T{0};
  }
  return mask;
}

struct QuantizedMatrix {
  Shape shape;
  std::vector<std::int8_t> values;
  QuantSpec spec;

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  template <typename T = float>
  Tensor<T> dequantize() const {
    Tensor<T> out(shape);
    for (std::size_t i = 0; i < values.size(); ++i) {
      out[i] = static_cast<T>(values[i]) * static_cast<T>(spec.scale);
    }
    return out;
  }
};

template <typename T>
QuantizedMatrix quantize_matrix(const Tensor<T>& w) {
  if (w.rank() != 2) {
    fail(ErrorCode::kShape, "quantize_matrix expects a matrix, got ",
         shape_string(w.shape()));
  }
  QuantizedMatrix q{w.shape(), std::vector<std::int8_t>(w.size()), choose_scale(w)};
  for (std::size_t i = 0; i < w.size(); ++i) q.values[i] = quantize_value(w[i], q.spec);
  return q;
}

template <typename T>
struct QuantizedDense {
  QuantizedMatrix kernel;  // [m, n]
  Tensor<T> b;             // [n]

  std::size_t param_count() const { return kernel.values.size() + b.size(); }
};

template <typename T>
QuantizedDense<T> quantize_layer(const Tensor<T>& w, const Tensor<T>& b) {
  if (b.rank() != 1 || w.rank() != 2 || b.dim(0) != w.dim(1)) {
    fail(ErrorCode::kShape, "quantize_layer: kernel ", shape_string(w.shape()),
         " and bias ", shape_string(b.shape()), " disagree");
  }
  return {quantize_matrix(w), b};
}

// x [..., m] times the dequantized int8 matrix [m, n]. Entries are
// dequantized in-register, so the result is bit-identical to a float matmul
// against dequantize().
template <typename T>
Tensor<T> int_matmul(const Tensor<T>& x, const QuantizedMatrix& q) {
  const std::size_t m = q.rows(), n = q.cols();
  if (x.rank() == 0 || x.shape().back() != m) {
    fail(ErrorCode::kShape, "int_matmul dimension mismatch: ",
         shape_string(x.shape()), " x ", shape_string(q.shape));
  }
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> y(std::move(out_shape));
  const std::int8_t* qd = q.values.data();
  const T s = static_cast<T>(q.spec.scale);
  for (std::size_t r = 0; r < x.size() / m; ++r) {
    T* out = &y[r * n];
    const T* in = &x[r * m];
    for (std::size_t i = 0; i < m; ++i) {
      const T v = in[i];
      const std::int8_t* row = qd + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        out[j] += v * (static_cast<T>(row[j]) * s);
      }
    }
  }
  return y;
}

// x [..., n] times the transpose of the int8 matrix [m, n] -> [..., m].
template <typename T>
Tensor<T> int_matmul_transposed(const Tensor<T>& x, const QuantizedMatrix& q) {
  const std::size_t m = q.rows(), n = q.cols();
  if (x.rank() == 0 || x.shape().back() != n) {
    fail(ErrorCode::kShape, "int_matmul_transposed dimension mismatch: ",
         shape_string(x.shape()), " x ", shape_string(q.shape), "^T");
  }
  Shape out_shape = x.shape();
  out_shape.back() = m;
  Tensor<T> y(std::move(out_shape));
  const T s = static_cast<T>(q.spec.scale);
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    const T* in = &x[r * n];
    for (std::size_t i = 0; i < m; ++i) {
      const std::int8_t* row = q.values.data() + i * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) {
        acc += in[j] * (static_cast<T>(row[j]) * s);
      }
      y[r * m + i] = acc;
    }
  }
  return y;
}

template <typename T>
Tensor<T> int_forward(const QuantizedDense<T>& layer, const Tensor<T>& x) {
  Tensor<T> y = int_matmul(x, layer.kernel);
  const std::size_t n = layer.kernel.cols();
  for (std::size_t r = 0; r < y.size() / n; ++r) {
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] += layer.b[j];
  }
  return y;
}

// Compressed and quantized: both factors stored as int8.
template <typename T>
struct QuantizedLowRank {
  QuantizedMatrix u;  // [m, k]
  QuantizedMatrix v;  // [n, k]
  Tensor<T> b;

  std::size_t param_count() const {
    return u.values.size() + v.values.size() + b.size();
  }
};

template <typename T>
Tensor<T> int_forward(const QuantizedLowRank<T>& layer, const Tensor<T>& x) {
  Tensor<T> y = int_matmul_transposed(int_matmul(x, layer.u), layer.v);
  const std::size_t n = layer.v.rows();
  for (std::size_t r = 0; r < y.size() / n; ++r) {
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] += layer.b[j];
  }
  return y;
}

}  // namespace frill

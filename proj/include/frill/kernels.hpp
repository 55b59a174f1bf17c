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

// Dense NHWC kernels for the float (and, in tests, double) paths. Every
// kernel is single-threaded and allocation-per-call; callers parallelize
// across independent inputs if they want to.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "frill/error.hpp"
#include "frill/tensor.hpp"

namespace frill {

enum class Padding { kSame, kValid };

// Output extent and leading pad for one spatial axis. "Same" pads
// symmetrically, the trailing side taking the extra pixel when the total
// is odd.
struct AxisGeometry {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

inline AxisGeometry axis_geometry(std::size_t in, std::size_t kernel,
                                  std::size_t stride, Padding padding) {
  if (stride == 0) fail(ErrorCode::kShape, "stride must be positive");
  AxisGeometry g;
  if (padding == Padding::kValid) {
    if (in < kernel) {
      fail(ErrorCode::kShape, "valid padding needs input extent ", in,
           " >= kernel extent ", kernel);
    }
    g.out = (in - kernel) / stride + 1;
    return g;
  }
  g.out = (in + stride - 1) / stride;
  const std::size_t needed = (g.out - 1) * stride + kernel;
  const std::size_t total = needed > in ? needed - in : 0;
  g.pad_before = total / 2;
  return g;
}

namespace detail {

inline void require_rank(const Shape& shape, std::size_t rank,
                         const char* what) {
  if (shape.size() != rank) {
    fail(ErrorCode::kShape, what, " expects rank ", rank, ", got shape ",
         shape_string(shape));
  }
}

}  // namespace detail

// Cross-correlation of x [N,H,W,Cin] with kernel [KH,KW,Cin,Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 std::size_t stride, Padding padding) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(kernel.shape(), 4, "conv2d kernel");
  if (x.dim(3) != kernel.dim(2)) {
    fail(ErrorCode::kShape, "conv2d channel mismatch: input ",
         shape_string(x.shape()), " vs kernel ", shape_string(kernel.shape()));
  }
  const std::size_t n_batch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2),
                    cin = x.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1),
                    cout = kernel.dim(3);
  const auto gh = axis_geometry(in_h, kh, stride, padding);
  const auto gw = axis_geometry(in_w, kw, stride, padding);
  Tensor<T> y({n_batch, gh.out, gw.out, cout});
  const T* xd = x.data().data();
  const T* kd = kernel.data().data();
  T* yd = y.data().data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t oh = 0; oh < gh.out; ++oh) {
      for (std::size_t ow = 0; ow < gw.out; ++ow) {
        T* out = yd + ((n * gh.out + oh) * gw.out + ow) * cout;
        for (std::size_t i = 0; i < kh; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                    static_cast<std::ptrdiff_t>(gh.pad_before);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + j) -
                static_cast<std::ptrdiff_t>(gw.pad_before);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const T* in = xd + ((n * in_h + ih) * in_w + iw) * cin;
            const T* w = kd + (i * kw + j) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T v = in[ci];
              const T* wrow = w + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) out[co] += v * wrow[co];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dkernel;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                             std::size_t stride, Padding padding,
                             const Tensor<T>& dy) {
  const std::size_t n_batch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2),
                    cin = x.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1),
                    cout = kernel.dim(3);
  const auto gh = axis_geometry(in_h, kh, stride, padding);
  const auto gw = axis_geometry(in_w, kw, stride, padding);
  if (dy.shape() != Shape{n_batch, gh.out, gw.out, cout}) {
    fail(ErrorCode::kShape, "conv2d_backward upstream ",
         shape_string(dy.shape()), " does not match output geometry");
  }
  ConvGrads<T> g{zeros_like(x), zeros_like(kernel)};
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t oh = 0; oh < gh.out; ++oh) {
      for (std::size_t ow = 0; ow < gw.out; ++ow) {
        const T* up = &dy.at(n, oh, ow, 0);
        for (std::size_t i = 0; i < kh; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                    static_cast<std::ptrdiff_t>(gh.pad_before);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + j) -
                static_cast<std::ptrdiff_t>(gw.pad_before);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const T* in = &x.at(n, ih, iw, 0);
            T* din = &g.dx.at(n, ih, iw, 0);
            const std::size_t base = (i * kw + j) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T* wrow = &kernel[base + ci * cout];
              T* dwrow = &g.dkernel[base + ci * cout];
              const T v = in[ci];
              T acc{0};
              for (std::size_t co = 0; co < cout; ++co) {
                dwrow[co] += v * up[co];
                acc += wrow[co] * up[co];
              }
              din[ci] += acc;
            }
          }
        }
      }
    }
  }
  return g;
}

// Per-channel filtering of x [N,H,W,C] with kernel [KH,KW,C].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                           std::size_t stride, Padding padding) {
  detail::require_rank(x.shape(), 4, "depthwise_conv2d input");
  detail::require_rank(kernel.shape(), 3, "depthwise_conv2d kernel");
  if (x.dim(3) != kernel.dim(2)) {
    fail(ErrorCode::kShape, "depthwise_conv2d channel mismatch: input ",
         shape_string(x.shape()), " vs kernel ", shape_string(kernel.shape()));
  }
  const std::size_t n_batch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2),
                    ch = x.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const auto gh = axis_geometry(in_h, kh, stride, padding);
  const auto gw = axis_geometry(in_w, kw, stride, padding);
  Tensor<T> y({n_batch, gh.out, gw.out, ch});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t oh = 0; oh < gh.out; ++oh) {
      for (std::size_t ow = 0; ow < gw.out; ++ow) {
        T* out = &y.at(n, oh, ow, 0);
        for (std::size_t i = 0; i < kh; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                    static_cast<std::ptrdiff_t>(gh.pad_before);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + j) -
                static_cast<std::ptrdiff_t>(gw.pad_before);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const T* in = &x.at(n, ih, iw, 0);
            const T* w = &kernel[(i * kw + j) * ch];
            for (std::size_t c = 0; c < ch; ++c) out[c] += in[c] * w[c];
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>& x,
                                       const Tensor<T>& kernel,
                                       std::size_t stride, Padding padding,
                                       const Tensor<T>& dy) {
  const std::size_t n_batch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2),
                    ch = x.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const auto gh = axis_geometry(in_h, kh, stride, padding);
  const auto gw = axis_geometry(in_w, kw, stride, padding);
  if (dy.shape() != Shape{n_batch, gh.out, gw.out, ch}) {
    fail(ErrorCode::kShape, "depthwise_conv2d_backward upstream ",
         shape_string(dy.shape()), " does not match output geometry");
  }
  ConvGrads<T> g{zeros_like(x), zeros_like(kernel)};
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t oh = 0; oh < gh.out; ++oh) {
      for (std::size_t ow = 0; ow < gw.out; ++ow) {
        const T* up = &dy.at(n, oh, ow, 0);
        for (std::size_t i = 0; i < kh; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                    static_cast<std::ptrdiff_t>(gh.pad_before);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + j) -
                static_cast<std::ptrdiff_t>(gw.pad_before);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const T* in = &x.at(n, ih, iw, 0);
            T* din = &g.dx.at(n, ih, iw, 0);
            const T* w = &kernel[(i * kw + j) * ch];
            T* dw = &g.dkernel[(i * kw + j) * ch];
            for (std::size_t c = 0; c < ch; ++c) {
              dw[c] += in[c] * up[c];
              din[c] += w[c] * up[c];
            }
          }
        }
      }
    }
  }
  return g;
}

// Treats every leading dimension of `x` as batch: [..., m] x [m, n] -> [..., n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_rank(w.shape(), 2, "matmul right operand");
  const std::size_t m = w.dim(0), n = w.dim(1);
  if (x.rank() == 0 || x.shape().back() != m) {
    fail(ErrorCode::kShape, "matmul dimension mismatch: ",
         shape_string(x.shape()), " x ", shape_string(w.shape()));
  }
  const std::size_t rows = x.size() / m;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> y(std::move(out_shape));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* yd = y.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* out = yd + r * n;
    const T* in = xd + r * m;
    for (std::size_t i = 0; i < m; ++i) {
      const T v = in[i];
      const T* wrow = wd + i * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += v * wrow[j];
    }
  }
  return y;
}

// [..., n] x [m, n]^T -> [..., m].
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_rank(w.shape(), 2, "matmul_transposed right operand");
  const std::size_t m = w.dim(0), n = w.dim(1);
  if (x.rank() == 0 || x.shape().back() != n) {
    fail(ErrorCode::kShape, "matmul_transposed dimension mismatch: ",
         shape_string(x.shape()), " x ", shape_string(w.shape()), "^T");
  }
  const std::size_t rows = x.size() / n;
  Shape out_shape = x.shape();
  out_shape.back() = m;
  Tensor<T> y(std::move(out_shape));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = &x[r * n];
    for (std::size_t i = 0; i < m; ++i) {
      const T* wrow = &w[i * n];
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += in[j] * wrow[j];
      y[r * m + i] = acc;
    }
  }
  return y;
}

// x^T y over the flattened batch: [B, m]^T x [B, n] -> [m, n].
template <typename T>
Tensor<T> outer_accumulate(const Tensor<T>& x, const Tensor<T>& y) {
  const std::size_t m = x.shape().back(), n = y.shape().back();
  const std::size_t rows = x.size() / m;
  if (y.size() / n != rows) {
    fail(ErrorCode::kShape, "outer_accumulate batch mismatch: ",
         shape_string(x.shape()), " vs ", shape_string(y.shape()));
  }
  Tensor<T> out({m, n});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* a = &x[r * m];
    const T* b = &y[r * n];
    for (std::size_t i = 0; i < m; ++i) {
      const T v = a[i];
      if (v == T{0}) continue;
      T* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += v * b[j];
    }
  }
  return out;
}

template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  Tensor<T> out({n});
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[j] += x[r * n + j];
  }
  return out;
}

// y = xW + b.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(w.shape(), 2, "dense kernel");
  if (b.rank() != 1 || b.dim(0) != w.dim(1)) {
    fail(ErrorCode::kShape, "dense bias ", shape_string(b.shape()),
         " does not match kernel ", shape_string(w.shape()));
  }
  Tensor<T> y = matmul(x, w);
  const std::size_t n = w.dim(1);
  for (std::size_t r = 0; r < y.size() / n; ++r) {
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] += b[j];
  }
  return y;
}

template <typename T>
struct DenseGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w,
                             const Tensor<T>& dy) {
  return {matmul_transposed(dy, w), outer_accumulate(x, dy), sum_rows(dy)};
}

template <typename T>
T relu(T v) {
  return v > T{0} ? v : T{0};
}

template <typename T>
T hard_sigmoid(T v) {
  return std::clamp(v + T{3}, T{0}, T{6}) / T{6};
}

template <typename T>
T hard_swish(T v) {
  return v * hard_sigmoid(v);
}

template <typename T>
T relu_derivative(T v) {
  return v > T{0} ? T{1} : T{0};
}

template <typename T>
T hard_sigmoid_derivative(T v) {
  return (v > T{-3} && v < T{3}) ? T{1} / T{6} : T{0};
}

template <typename T>
T hard_swish_derivative(T v) {
  if (v <= T{-3}) return T{0};
  if (v >= T{3}) return T{1};
  return (T{2} * v + T{3}) / T{6};
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F&& f) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = f(v);
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return map(x, [](T v) { return relu(v); });
}

template <typename T>
Tensor<T> hard_swish(const Tensor<T>& x) {
  return map(x, [](T v) { return hard_swish(v); });
}

template <typename T>
Tensor<T> hard_sigmoid(const Tensor<T>& x) {
  return map(x, [](T v) { return hard_sigmoid(v); });
}

// Inference-mode batch normalization over the last axis.
template <typename T>
Tensor<T> batchnorm_fold(const Tensor<T>& x, const Tensor<T>& mean,
                         const Tensor<T>& var, const Tensor<T>& gamma,
                         const Tensor<T>& beta, T eps) {
  const std::size_t c = x.shape().back();
  for (const Tensor<T>* p : {&mean, &var, &gamma, &beta}) {
    if (p->size() != c) {
      fail(ErrorCode::kShape, "batchnorm parameter ", shape_string(p->shape()),
           " does not match input ", shape_string(x.shape()));
    }
  }
  std::vector<T> mult(c), shift(c);
  for (std::size_t k = 0; k < c; ++k) {
    mult[k] = gamma[k] / std::sqrt(var[k] + eps);
    shift[k] = beta[k] - mean[k] * mult[k];
  }
  Tensor<T> y = x;
  for (std::size_t r = 0; r < y.size() / c; ++r) {
    T* row = &y[r * c];
    for (std::size_t k = 0; k < c; ++k) row[k] = row[k] * mult[k] + shift[k];
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool input");
  const std::size_t n_batch = x.dim(0), c = x.dim(3);
  const std::size_t pixels = x.dim(1) * x.dim(2);
  Tensor<T> y({n_batch, c});
  for (std::size_t n = 0; n < n_batch; ++n) {
    T* out = &y[n * c];
    for (std::size_t p = 0; p < pixels; ++p) {
      const T* in = &x[(n * pixels + p) * c];
      for (std::size_t k = 0; k < c; ++k) out[k] += in[k];
    }
    for (std::size_t k = 0; k < c; ++k) out[k] /= static_cast<T>(pixels);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape,
                                   const Tensor<T>& dy) {
  const std::size_t n_batch = input_shape[0], c = input_shape[3];
  const std::size_t pixels = input_shape[1] * input_shape[2];
  Tensor<T> dx(input_shape);
  const T inv = T{1} / static_cast<T>(pixels);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t p = 0; p < pixels; ++p) {
      for (std::size_t k = 0; k < c; ++k) {
        dx[(n * pixels + p) * c + k] = dy[n * c + k] * inv;
      }
    }
  }
  return dx;
}

// [N,H,W,C] -> [N, H*W*C]; element (n,h,w,c) lands at h*W*C + w*C + c.
template <typename T>
Tensor<T> flatten_concat(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "flatten_concat input");
  return x.reshaped({x.dim(0), x.dim(1) * x.dim(2) * x.dim(3)});
}

}  // namespace frill

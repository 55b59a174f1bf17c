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

// Low-rank bottleneck compression.
//
// During training the layer computes
//
//   y = x (lambda * W + (1 - lambda) * U V^T) + b
//
// with lambda annealed linearly from 1 to 0. U [m,k] and V [n,k] are seeded
// once from the truncated SVD of the initial W and then trained freely; at
// inference lambda is pinned to 0 and W is dropped, leaving k(m+n) kernel
// weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "frill/error.hpp"
#include "frill/kernels.hpp"
#include "frill/tensor.hpp"

namespace frill {

inline constexpr std::size_t kDefaultCompressionRank = 100;

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Tensor<double> vectors;      // column i pairs with values[i]
};

// Cyclic Jacobi rotations on a symmetric matrix. Stops once the
// off-diagonal Frobenius norm falls below tolerance * ||A||_F.
inline SymmetricEigen jacobi_eigen(Tensor<double> a, double tolerance = 1e-10,
                                   int max_sweeps = 100) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    fail(ErrorCode::kShape, "jacobi_eigen expects a square matrix, got ",
         shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  Tensor<double> v = identity_matrix<double>(n);
  const double scale = std::max(frobenius_norm(a), 1e-300);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
    }
    return std::sqrt(s);
  };

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    if (off_norm() <= tolerance * scale) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p), aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          const double arp = a(r, p), arq = a(r, q);
          a(r, p) = c * arp - s * arq;
          a(r, q) = s * arp + c * arq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double apr = a(p, r), aqr = a(q, r);
          a(p, r) = c * apr - s * aqr;
          a(q, r) = s * apr + c * aqr;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p), vrq = v(r, q);
          v(r, p) = c * vrp - s * vrq;
          v(r, q) = s * vrp + c * vrq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a(i, i) > a(j, j);
  });
  SymmetricEigen out{std::vector<double>(n), Tensor<double>({n, n})};
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
  }
  return out;
}

template <typename T>
struct LowRankFactors {
  Tensor<T> u;  // [m, k], singular values folded in
  Tensor<T> v;  // [n, k], orthonormal columns
};

// Best rank-k approximation W ~= U V^T in Frobenius norm, via the
// eigendecomposition of the smaller Gram matrix.
template <typename T>
LowRankFactors<T> truncated_svd(const Tensor<T>& w, std::size_t k) {
  if (w.rank() != 2) {
    fail(ErrorCode::kShape, "truncated_svd expects a matrix, got ",
         shape_string(w.shape()));
  }
  const std::size_t m = w.dim(0), n = w.dim(1);
  if (k == 0 || k > std::min(m, n)) {
    fail(ErrorCode::kRank, "rank ", k, " must be in [1, min(", m, ", ", n,
         ")] = [1, ", std::min(m, n), "]");
  }
  const Tensor<double> wd = w.template cast<double>();
  LowRankFactors<T> out{Tensor<T>({m, k}), Tensor<T>({n, k})};

  if (n <= m) {
    // W^T W = V S^2 V^T, U = W V.
    Tensor<double> gram({n, n});
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t i = 0; i < n; ++i) {
        const double wi = wd(r, i);
        for (std::size_t j = i; j < n; ++j) gram(i, j) += wi * wd(r, j);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) gram(i, j) = gram(j, i);
    }
    const auto eig = jacobi_eigen(std::move(gram));
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        out.v(i, c) = static_cast<T>(eig.vectors(i, c));
      }
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += wd(r, i) * eig.vectors(i, c);
        out.u(r, c) = static_cast<T>(acc);
      }
    }
  } else {
    // W W^T = U' S^2 U'^T, V = W^T U' / s, U = U' s.
    Tensor<double> gram({m, m});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c) acc += wd(i, c) * wd(j, c);
        gram(i, j) = acc;
        gram(j, i) = acc;
      }
    }
    const auto eig = jacobi_eigen(std::move(gram));
    for (std::size_t c = 0; c < k; ++c) {
      const double sigma = std::sqrt(std::max(eig.values[c], 0.0));
      for (std::size_t r = 0; r < m; ++r) {
        out.u(r, c) = static_cast<T>(eig.vectors(r, c) * sigma);
      }
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < m; ++r) acc += wd(r, i) * eig.vectors(r, c);
        out.v(i, c) = static_cast<T>(sigma > 0.0 ? acc / sigma : 0.0);
      }
    }
  }
  return out;
}

struct CompressionSchedule {
  int anneal_epochs = 10;
  long long steps_per_epoch = 1;
};

// lambda = max(0, 1 - step / (anneal_epochs * steps_per_epoch)).
inline double lambda_at(const CompressionSchedule& s, long long step) {
  if (s.anneal_epochs < 1 || s.steps_per_epoch < 1) {
    fail(ErrorCode::kSchedule, "compression schedule needs anneal_epochs >= 1 "
         "and steps_per_epoch >= 1");
  }
  const double span = static_cast<double>(s.anneal_epochs) *
                      static_cast<double>(s.steps_per_epoch);
  return std::max(0.0, 1.0 - static_cast<double>(step) / span);
}

template <typename T>
struct LowRankDense {
  std::optional<Tensor<T>> w;  // [m, n]; absent once finalized
  Tensor<T> u;                 // [m, k]
  Tensor<T> v;                 // [n, k]
  Tensor<T> b;                 // [n]
  double lambda = 1.0;

  std::size_t rows() const { return u.dim(0); }
  std::size_t cols() const { return v.dim(0); }
  std::size_t rank() const { return u.dim(1); }
  bool finalized() const { return !w.has_value() && lambda == 0.0; }

  // Seeds U and V from the truncated SVD of `kernel`; lambda starts at 1.
  static LowRankDense from_kernel(Tensor<T> kernel, Tensor<T> bias,
                                  std::size_t k) {
    auto f = truncated_svd(kernel, k);
    LowRankDense layer{std::move(kernel), std::move(f.u), std::move(f.v),
                       std::move(bias), 1.0};
    layer.validate();
    return layer;
  }

  void validate() const {
    if (u.rank() != 2 || v.rank() != 2 || u.dim(1) != v.dim(1)) {
      fail(ErrorCode::kShape, "low-rank factors disagree: U ",
           shape_string(u.shape()), " V ", shape_string(v.shape()));
    }
    if (b.rank() != 1 || b.dim(0) != cols()) {
      fail(ErrorCode::kShape, "low-rank bias ", shape_string(b.shape()),
           " does not match V ", shape_string(v.shape()));
    }
    if (w && w->shape() != Shape{rows(), cols()}) {
      fail(ErrorCode::kShape, "full kernel ", shape_string(w->shape()),
           " does not match factors U ", shape_string(u.shape()), " V ",
           shape_string(v.shape()));
    }
    if (rank() > std::min(rows(), cols())) {
      fail(ErrorCode::kRank, "rank ", rank(), " exceeds min(", rows(), ", ",
           cols(), ")");
    }
  }

  std::size_t param_count() const {
    const std::size_t m = rows(), n = cols();
    return (w ? m * n : 0) + rank() * (m + n) + n;
  }
};

namespace detail {

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    fail(ErrorCode::kSchedule, "lambda must lie in [0, 1], got ", lambda);
  }
}

}  // namespace detail

template <typename T>
Tensor<T> mixed_forward(const LowRankDense<T>& layer, const Tensor<T>& x) {
  detail::check_lambda(layer.lambda);
  if (layer.lambda == 1.0) {
    if (!layer.w) fail(ErrorCode::kSchedule, "lambda = 1 needs the full kernel");
    return dense(x, *layer.w, layer.b);
  }
  // (x U) V^T keeps the cost at k(m + n) per row.
  Tensor<T> y = matmul_transposed(matmul(x, layer.u), layer.v);
  if (layer.lambda > 0.0) {
    if (!layer.w) {
      fail(ErrorCode::kSchedule, "lambda = ", layer.lambda,
           " needs the full kernel, which was discarded");
    }
    const Tensor<T> full = matmul(x, *layer.w);
    const T lam = static_cast<T>(layer.lambda);
    const T rest = static_cast<T>(1.0 - layer.lambda);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = lam * full[i] + rest * y[i];
  }
  const std::size_t n = layer.cols();
  for (std::size_t r = 0; r < y.size() / n; ++r) {
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] += layer.b[j];
  }
  return y;
}

// Drops W and pins lambda to 0. Idempotent.
template <typename T>
LowRankDense<T> finalize(LowRankDense<T> layer) {
  layer.lambda = 0.0;
  layer.w.reset();
  return layer;
}

template <typename T>
struct LowRankGrads {
  Tensor<T> dx;
  std::optional<Tensor<T>> dw;  // present while lambda > 0 and W is stored
  Tensor<T> du;
  Tensor<T> dv;
  Tensor<T> db;
};

// Exact gradients of mixed_forward for a batch x [B, m] and upstream dy [B, n].
template <typename T>
LowRankGrads<T> factor_gradients(const LowRankDense<T>& layer,
                                 const Tensor<T>& x, const Tensor<T>& dy) {
  detail::check_lambda(layer.lambda);
  const std::size_t m = layer.rows(), n = layer.cols();
  if (x.shape().back() != m || dy.shape().back() != n ||
      x.size() / m != dy.size() / n) {
    fail(ErrorCode::kShape, "factor_gradients: input ", shape_string(x.shape()),
         " and upstream ", shape_string(dy.shape()),
         " do not match layer [", m, ", ", n, "]");
  }
  const T lam = static_cast<T>(layer.lambda);
  const T rest = static_cast<T>(1.0 - layer.lambda);
  const Tensor<T> xu = matmul(x, layer.u);        // [B, k]
  const Tensor<T> dyv = matmul(dy, layer.v);      // [B, k]

  LowRankGrads<T> g;
  g.du = outer_accumulate(x, dyv);                // [m, k]
  g.dv = outer_accumulate(dy, xu);                // [n, k]
  for (auto& e : g.du.data()) e *= rest;
  for (auto& e : g.dv.data()) e *= rest;
  g.db = sum_rows(dy);
  g.dx = matmul_transposed(dyv, layer.u);         // [B, m]
  for (auto& e : g.dx.data()) e *= rest;
  if (layer.w) {
    if (layer.lambda > 0.0) {
      const Tensor<T> dx_full = matmul_transposed(dy, *layer.w);
      for (std::size_t i = 0; i < g.dx.size(); ++i) g.dx[i] += lam * dx_full[i];
    }
    Tensor<T> dw = outer_accumulate(x, dy);
    for (auto& e : dw.data()) e *= lam;
    g.dw = std::move(dw);
  }
  return g;
}

}  // namespace frill

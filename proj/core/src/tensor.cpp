/* Copyright 2026 The STILL Attention Authors. All Rights Reserved.

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

#include "still/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace still {

std::string_view dtype_name(DType dtype) {
  return dtype == DType::kF32 ? "f32" : "f64";
}

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::kF32;
  if (name == "f64") return DType::kF64;
  throw Error("unknown dtype '" + std::string(name) + "'");
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void masked_softmax_row(std::span<const T> logits, std::span<const std::uint8_t> keep,
                        std::span<T> out) {
  const std::size_t n = logits.size();
  T max_logit = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (keep[j]) {
      max_logit = std::max(max_logit, logits[j]);
      any = true;
    }
  }
  if (!any) throw Error("empty softmax support");
  T total{0};
  for (std::size_t j = 0; j < n; ++j) {
    if (keep[j]) {
      out[j] = std::exp(logits[j] - max_logit);
      total += out[j];
    } else {
      out[j] = T{0};
    }
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= total;
}

template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) throw Error("empty softmax support");
  const T max_logit = *std::max_element(row.begin(), row.end());
  T total{0};
  for (T& v : row) {
    v = std::exp(v - max_logit);
    total += v;
  }
  for (T& v : row) v /= total;
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits,
                         const std::vector<std::vector<std::size_t>>& excluded) {
  if (logits.rank() != 2) throw Error("masked_softmax expects a rows x cols matrix");
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  if (!excluded.empty() && excluded.size() != rows) {
    throw Error("masked_softmax: exclusion list must have one entry per row");
  }
  Tensor<T> out(logits.shape());
  std::vector<std::uint8_t> keep(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(keep.begin(), keep.end(), std::uint8_t{1});
    if (!excluded.empty()) {
      for (std::size_t c : excluded[r]) {
        if (c >= cols) throw Error("masked_softmax: excluded column out of range");
        keep[c] = 0;
      }
    }
    masked_softmax_row<T>(logits.row(r), keep, out.row(r));
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw Error("matmul expects 2-D operands");
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  if (b.dim(0) != k) {
    throw Error("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                shape_string(b.shape()));
  }
  Tensor<T> out({m, n});
  // i-k-j order: each out(i, j) still accumulates over k = 0..K-1 in order,
  // while the inner loop runs over contiguous columns.
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = pa[i * k + kk];
      const T* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw Error("transpose expects a 2-D tensor");
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

template <typename T>
T l2_norm(std::span<const T> x) {
  T sum{0};
  for (T v : x) sum += v * v;
  if (std::isfinite(sum)) return std::sqrt(sum);
  // Overflowed: rescale by the largest magnitude.
  T scale{0};
  for (T v : x) scale = std::max(scale, std::abs(v));
  T scaled{0};
  for (T v : x) {
    const T r = v / scale;
    scaled += r * r;
  }
  return scale * std::sqrt(scaled);
}

template <typename T>
Tensor<T> chunked_cumsum(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw Error("chunked_cumsum: axis out of range");
  const Shape& shape = x.shape();
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Tensor<T> out(shape);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * len * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      T acc{0};
      for (std::size_t t = 0; t < len; ++t) {
        acc += src[base + t * inner + i];
        dst[base + t * inner + i] = acc;
      }
    }
  }
  return out;
}

template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> scores, std::size_t k) {
  if (k > scores.size()) {
    throw Error("top_k_indices: k = " + std::to_string(k) + " exceeds length " +
                std::to_string(scores.size()));
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    better);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

#define STILL_INSTANTIATE(T)                                                          \
  template class Tensor<T>;                                                           \
  template T dot<T>(std::span<const T>, std::span<const T>);                          \
  template void masked_softmax_row<T>(std::span<const T>, std::span<const std::uint8_t>, \
                                      std::span<T>);                                  \
  template void softmax_inplace<T>(std::span<T>);                                     \
  template Tensor<T> masked_softmax<T>(const Tensor<T>&,                              \
                                       const std::vector<std::vector<std::size_t>>&); \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                  \
  template T l2_norm<T>(std::span<const T>);                                          \
  template Tensor<T> chunked_cumsum<T>(const Tensor<T>&, std::size_t);                \
  template std::vector<std::size_t> top_k_indices<T>(std::span<const T>, std::size_t);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

#undef STILL_INSTANTIATE

}  // namespace still

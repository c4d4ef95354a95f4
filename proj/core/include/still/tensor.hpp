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

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace still {

/// Raised for contract violations anywhere in the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { kF32, kF64 };

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "still::Tensor supports float and double only");
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array. The last axis is the "row" axis: `rows()` is the
/// product of all leading extents and `row(r)` is a contiguous view.
template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "still::Tensor supports float and double only");

 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw Error("tensor data length " + std::to_string(data_.size()) +
                  " does not match shape " + shape_string(shape_));
    }
  }

  static constexpr DType dtype() noexcept { return dtype_of<T>(); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw Error("axis out of range");
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vector() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... I>
  T& at(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... I>
  const T& at(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  /// Contiguous view of sub-tensor `i` along axis 0.
  std::span<const T> slab(std::size_t i) const {
    const std::size_t stride = slab_size();
    return {data_.data() + i * stride, stride};
  }
  std::span<T> slab(std::size_t i) {
    const std::size_t stride = slab_size();
    return {data_.data() + i * stride, stride};
  }

  /// Copy of sub-tensor `i` along axis 0 (rank drops by one).
  Tensor slice(std::size_t i) const {
    if (rank() == 0 || i >= shape_[0]) throw Error("slice index out of range");
    Shape sub(shape_.begin() + 1, shape_.end());
    auto view = slab(i);
    return Tensor(std::move(sub), std::vector<T>(view.begin(), view.end()));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const noexcept;

 private:
  std::size_t slab_size() const {
    if (shape_.empty() || shape_[0] == 0) return 0;
    return data_.size() / shape_[0];
  }
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw Error("index rank mismatch");
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw Error("index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Dot product accumulated strictly left to right.
template <typename T>
T dot(std::span<const T> a, std::span<const T> b);

/// Softmax over the entries whose `keep` flag is non-zero; excluded entries
/// are written as exactly 0. Throws "empty softmax support" when nothing is
/// kept. Max-subtracted and summed left to right.
template <typename T>
void masked_softmax_row(std::span<const T> logits, std::span<const std::uint8_t> keep,
                        std::span<T> out);

/// Plain softmax of a row, in place.
template <typename T>
void softmax_inplace(std::span<T> row);

/// Row-wise softmax of a rows x cols matrix. `excluded[r]` lists the columns
/// of row r that are removed from the support (equivalent to additive -inf).
/// An empty `excluded` means no exclusions anywhere.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits,
                         const std::vector<std::vector<std::size_t>>& excluded = {});

/// 2-D matrix product. Every output element is a left-to-right dot product
/// over the inner extent.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
T l2_norm(std::span<const T> x);

/// Inclusive prefix sums along `axis`.
template <typename T>
Tensor<T> chunked_cumsum(const Tensor<T>& x, std::size_t axis);

/// Indices (0-based) of the k largest scores. Ties go to the smaller index;
/// the result is sorted ascending.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> scores, std::size_t k);

}  // namespace still

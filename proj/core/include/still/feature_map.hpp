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
#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "still/rng.hpp"
#include "still/tensor.hpp"

namespace still {

/// y = W x (+ b). W is out_dim x in_dim, row-major. An empty bias means none.
template <typename T>
struct LinearMap {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  static LinearMap identity(std::size_t dim);
  static LinearMap zeros(std::size_t out_dim, std::size_t in_dim, bool with_bias = false);
  static LinearMap random(std::size_t out_dim, std::size_t in_dim, Rng& rng, double stddev,
                          bool with_bias = false);

  bool has_bias() const noexcept { return !bias.empty(); }
  std::span<const T> weight_row(std::size_t r) const { return {weight.data() + r * in_dim, in_dim}; }
  void apply(std::span<const T> x, std::span<T> out) const;
  std::size_t parameter_count() const noexcept { return weight.size() + bias.size(); }
};

/// Per-head projection f used inside the feature map (d -> d).
template <typename T>
struct FeatureMapParams {
  std::vector<LinearMap<T>> heads;
  bool shared = false;

  static FeatureMapParams identity(std::size_t heads, std::size_t dim, bool shared = false);
  static FeatureMapParams random(std::size_t heads, std::size_t dim, Rng& rng, double stddev,
                                 bool with_bias = false);

  const LinearMap<T>& head(std::size_t h) const { return shared ? heads.at(0) : heads.at(h); }
  LinearMap<T>& head(std::size_t h) { return shared ? heads.at(0) : heads.at(h); }
};

enum class FeatureKind { kNormPreserved, kHedgehog };

std::string_view feature_kind_name(FeatureKind kind);
FeatureKind parse_feature_kind(std::string_view name);

/// Below this norm of f(x) the direction is undefined and u is set to zero.
template <typename T>
inline constexpr T kNormFloor = T(1e-12);

/// phi(x) = [softmax(f(x)) ++ softmax(-f(x))]; phi has 2 * d entries.
template <typename T>
void hedgehog_map_row(const LinearMap<T>& f, std::span<const T> x, std::span<T> phi);

/// u = f(x) * |x| / |f(x)|, phi(x) = [softmax(u) ++ softmax(-u)]. Returns
/// true when |f(x)| fell under the norm floor (u = 0, phi uniform).
/// `scratch` needs d values.
template <typename T>
bool np_map_row(const LinearMap<T>& f, std::span<const T> x, std::span<T> phi,
                std::span<T> scratch);

template <typename T>
bool feature_map_row(FeatureKind kind, const LinearMap<T>& f, std::span<const T> x,
                     std::span<T> phi, std::span<T> scratch);

/// Contracts d phi / d(x, f) with `upstream` (2d). Writes grad_x and adds
/// into grad_f. At the norm floor every gradient is zero.
template <typename T>
void np_map_backward_row(const LinearMap<T>& f, std::span<const T> x, std::span<const T> upstream,
                         std::span<T> grad_x, LinearMap<T>& grad_f);

/// Backward pass for either feature map kind (Hedgehog has no norm term).
template <typename T>
void feature_map_backward_row(FeatureKind kind, const LinearMap<T>& f, std::span<const T> x,
                              std::span<const T> upstream, std::span<T> grad_x,
                              LinearMap<T>& grad_f);

template <typename T>
Tensor<T> hedgehog_map(const Tensor<T>& x, const LinearMap<T>& f);

template <typename T>
struct NpMapResult {
  Tensor<T> phi;
  std::vector<std::uint8_t> direction_undefined;
};

/// x is [... x d]; the result is [... x 2d].
template <typename T>
NpMapResult<T> np_map(const Tensor<T>& x, const LinearMap<T>& f);

template <typename T>
struct NpMapGrad {
  Tensor<T> grad_x;
  LinearMap<T> grad_f;
};

template <typename T>
NpMapGrad<T> np_map_backward(const Tensor<T>& x, const LinearMap<T>& f, const Tensor<T>& upstream);

/// Output gate W_g per head: model_dim -> head_dim, logistic activation.
template <typename T>
struct GateParams {
  std::size_t model_dim = 0;
  std::size_t head_dim = 0;
  std::vector<LinearMap<T>> heads;

  static GateParams zeros(std::size_t heads, std::size_t model_dim, std::size_t head_dim);
  static GateParams random(std::size_t heads, std::size_t model_dim, std::size_t head_dim, Rng& rng,
                           double stddev);
};

template <typename T>
T logistic(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

/// g = logistic(W_g x) for one token and one head.
template <typename T>
Tensor<T> gate_forward(std::span<const T> x_token, const GateParams<T>& params, std::size_t head);

/// Gates for a whole sequence: hidden [N x model_dim] -> [H x N x d].
template <typename T>
Tensor<T> gate_forward(const Tensor<T>& hidden, const GateParams<T>& params);

/// A gate tensor of constant value, [H x N x d].
template <typename T>
Tensor<T> constant_gate(std::size_t heads, std::size_t tokens, std::size_t head_dim, T value);

}  // namespace still

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
#include <utility>
#include <vector>

#include "still/attention_config.hpp"
#include "still/feature_map.hpp"
#include "still/tensor.hpp"

namespace still {

/// Per-head inputs, each [H x N x d]. g is the output gate in (0, 1).
template <typename T>
struct AttentionInputs {
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> v;
  Tensor<T> g;

  std::size_t heads() const { return q.dim(0); }
  std::size_t tokens() const { return q.dim(1); }
  std::size_t head_dim() const { return q.dim(2); }
  void validate() const;

  template <typename U>
  AttentionInputs<U> cast() const {
    return {q.template cast<U>(), k.template cast<U>(), v.template cast<U>(), g.template cast<U>()};
  }
};

/// Random isotropic q/k/v (unit normal) and a gate drawn uniformly in (0, 1).
template <typename T>
AttentionInputs<T> random_inputs(std::size_t heads, std::size_t tokens, std::size_t head_dim,
                                 std::uint64_t seed);

/// Learnable projections inside the query and key feature maps.
template <typename T>
struct HybridParams {
  FeatureMapParams<T> f_q;
  FeatureMapParams<T> f_k;

  static HybridParams identity(std::size_t heads, std::size_t head_dim);
  static HybridParams random(std::size_t heads, std::size_t head_dim, Rng& rng, double stddev);

  template <typename U>
  HybridParams<U> cast() const;
};

/// Branch totals for one (head, token). Sums are reported in units of
/// exp(-log_scale); the output is unaffected by that common factor.
struct BranchDiagnostics {
  double d_sa = 0.0;
  double d_la = 0.0;
  double log_scale = 0.0;
  std::size_t window_keys = 0;
  std::size_t cache_keys = 0;
  std::size_t la_tokens = 0;
  bool floor_hit = false;
};

template <typename T>
struct HybridOutput {
  Tensor<T> y;  ///< [H x N x d]
  /// Empty unless requested; otherwise H * N entries, head-major.
  std::vector<BranchDiagnostics> diagnostics;
  Tensor<T> n_sa;  ///< [H x N x d] when diagnostics are requested
  Tensor<T> n_la;  ///< [H x N x d] when diagnostics are requested
};

/// Guard added to a vanishing joint denominator (and flagged).
inline constexpr double kDenominatorFloor = 1e-12;

// -- Exact oracles. q/k/v are [N x d] or [H x N x d]. --

/// Causal softmax attention with row-max stabilization.
template <typename T>
Tensor<T> oracle_full_softmax(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              bool scale = true);

/// Softmax attention restricted to the last w positions (w >= 1).
template <typename T>
Tensor<T> oracle_swa(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t w,
                     bool scale = true);

enum class LinearForm { kRecurrent, kCumulative };

template <typename T>
struct LinearAttentionResult {
  Tensor<T> y;
  std::vector<std::uint8_t> floored;
};

/// y_t = phi_q(t) S_t / (phi_q(t) . z_t) over features [N x d'] and values
/// [N x d]. Both forms must agree.
template <typename T>
LinearAttentionResult<T> oracle_linear_attention(const Tensor<T>& phi_q, const Tensor<T>& phi_k,
                                                 const Tensor<T>& v,
                                                 LinearForm form = LinearForm::kRecurrent);

/// Token-by-token hybrid attention that rebuilds the routed sets and the
/// linear-state sums from scratch for every query chunk.
template <typename T>
HybridOutput<T> reference_hybrid(const AttentionInputs<T>& inputs, const AttentionConfig& config,
                                 const HybridParams<T>& params, bool diagnostics = false);

/// (lambda, mean_{h,t} |y_hybrid - y_full|_2) for every lambda in the grid,
/// using the chunk-parallel form.
template <typename T>
std::vector<std::pair<std::size_t, double>> output_error_curve(
    const AttentionInputs<T>& inputs, const AttentionConfig& config, const HybridParams<T>& params,
    std::span<const std::size_t> lambdas);

namespace detail {

/// Combines the softmax terms (logits over the SA keys and their value rows)
/// with the linear-attention numerator/denominator under one normalizer.
/// The stabilizing offset is max(max logit, log d_la).
template <typename T>
BranchDiagnostics combine_branches(std::span<const T> logits, std::span<const T* const> value_rows,
                                   std::span<const T> n_la, T d_la, std::span<T> y,
                                   std::span<T> n_sa_out = {}, std::span<T> n_la_out = {});

/// n_la = (phi_q^T s) * g and returns d_la = phi_q . z.
template <typename T>
T linear_branch(std::span<const T> phi_q, std::span<const T> s, std::span<const T> z,
                std::span<const T> g, std::size_t value_dim, std::span<T> n_la);

}  // namespace detail
}  // namespace still

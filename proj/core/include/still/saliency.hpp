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
#include <optional>
#include <span>
#include <vector>

#include "still/tensor.hpp"

namespace still {

struct WindowSpec {
  std::size_t radius = 64;
  /// Multiply every logit by 1/sqrt(d) before exponentiating.
  bool scale = true;
};

/// Per-(head, token) self-saliency scores. Scores are stored head-major.
struct ScoreReport {
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<double> scores;
  /// Window radius used; nullopt means the full causal prefix.
  std::optional<std::size_t> window;
  double epsilon = 1e-6;
  /// Either empty or heads * tokens flags.
  std::vector<std::uint8_t> selected;

  double score(std::size_t head, std::size_t t) const { return scores[head * tokens + t]; }
  std::span<const double> head_scores(std::size_t head) const {
    return {scores.data() + head * tokens, tokens};
  }
};

/// Window W_t = {j : max(0, t-w+1) <= j <= min(n-1, t)} with 0-based
/// positions, ascending.
std::vector<std::size_t> local_window(std::size_t t, std::size_t w, std::size_t n);

template <typename T>
T logit_scale(std::size_t head_dim, bool enabled) {
  return enabled ? T{1} / std::sqrt(static_cast<T>(head_dim)) : T{1};
}

/// Sliding-window distributions with and without the diagonal term for one
/// head. Row t has w slots, right-aligned so slot w-1 is always the token
/// itself and slot s holds key position t-(w-1)+s; slots before position 0
/// are zero. A token whose window is only itself has an all-zero a_nodiag
/// row and `degenerate[t] == 1`.
template <typename T>
struct SwaDistributions {
  Tensor<T> a_diag;
  Tensor<T> a_nodiag;
  std::vector<std::uint8_t> degenerate;
};

template <typename T>
SwaDistributions<T> swa_distributions(const Tensor<T>& q, const Tensor<T>& k,
                                      const WindowSpec& window);

/// Self-saliency of one token from the (already scaled) logits of its window.
/// `workspace` must hold at least 2 * logits.size() values. The sum runs
/// over window slots in order; the singleton window gives ln((1+eps)/eps).
template <typename T>
T token_saliency(std::span<const T> window_logits, std::size_t self_slot, T epsilon,
                 std::span<T> workspace);

template <typename T>
T token_saliency(std::span<const T> window_logits, std::size_t self_slot, T epsilon);

/// Scores for every token of every head. q and k are [N x d] or [H x N x d].
template <typename T>
ScoreReport self_saliency_scores(const Tensor<T>& q, const Tensor<T>& k,
                                 const WindowSpec& window, double epsilon = 1e-6);

/// Same score with the whole causal prefix as each token's window.
template <typename T>
ScoreReport global_scores(const Tensor<T>& q, const Tensor<T>& k, double epsilon = 1e-6,
                          bool scale = true);

/// |topK(local) & topK(global)| / k.
double overlap_at_k(std::span<const double> local, std::span<const double> global, std::size_t k);
double overlap_at_k(const ScoreReport& local, const ScoreReport& global, std::size_t k,
                    std::size_t head = 0);

}  // namespace still

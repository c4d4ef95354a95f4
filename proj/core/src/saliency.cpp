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

#include "still/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>

namespace still {
namespace {

template <typename T>
struct HeadShape {
  std::size_t heads;
  std::size_t tokens;
  std::size_t dim;
};

template <typename T>
HeadShape<T> head_shape(const Tensor<T>& q, const Tensor<T>& k) {
  if (q.shape() != k.shape()) throw Error("q and k shapes differ");
  if (q.rank() == 2) return {1, q.dim(0), q.dim(1)};
  if (q.rank() == 3) return {q.dim(0), q.dim(1), q.dim(2)};
  throw Error("expected q/k of shape [N x d] or [H x N x d]");
}

// Scores for one head with window radius w (w >= n means full prefix).
template <typename T>
void head_scores(std::span<const T> q, std::span<const T> k, std::size_t n, std::size_t d,
                 std::size_t w, T scale, T epsilon, std::span<double> out) {
  std::vector<T> logits(std::min(w, n));
  std::vector<T> workspace(2 * logits.size());
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t first = t + 1 >= w ? t + 1 - w : 0;
    const std::size_t len = t - first + 1;
    std::span<const T> qt = q.subspan(t * d, d);
    for (std::size_t j = first; j <= t; ++j) {
      logits[j - first] = dot<T>(qt, k.subspan(j * d, d)) * scale;
    }
    out[t] = static_cast<double>(token_saliency<T>(std::span<const T>(logits.data(), len),
                                                   len - 1, epsilon, workspace));
  }
}

template <typename T>
ScoreReport scores_impl(const Tensor<T>& q, const Tensor<T>& k, std::size_t w, bool full,
                        bool scale, double epsilon) {
  if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  const auto hs = head_shape(q, k);
  if (!full && w == 0) throw Error("window radius must be at least 1");
  ScoreReport report;
  report.heads = hs.heads;
  report.tokens = hs.tokens;
  report.scores.assign(hs.heads * hs.tokens, 0.0);
  report.window = full ? std::nullopt : std::optional<std::size_t>(w);
  report.epsilon = epsilon;
  const T s = logit_scale<T>(hs.dim, scale);
  const std::size_t radius = full ? std::max<std::size_t>(hs.tokens, 1) : w;
  const std::size_t stride = hs.tokens * hs.dim;
  for (std::size_t h = 0; h < hs.heads; ++h) {
    head_scores<T>(q.data().subspan(h * stride, stride), k.data().subspan(h * stride, stride),
                   hs.tokens, hs.dim, radius, s, static_cast<T>(epsilon),
                   std::span<double>(report.scores).subspan(h * hs.tokens, hs.tokens));
  }
  return report;
}

}  // namespace

std::vector<std::size_t> local_window(std::size_t t, std::size_t w, std::size_t n) {
  if (t >= n) throw Error("local_window: position outside sequence");
  if (w == 0) throw Error("local_window: radius must be at least 1");
  std::vector<std::size_t> out;
  const std::size_t first = t + 1 >= w ? t + 1 - w : 0;
  for (std::size_t j = first; j <= t; ++j) out.push_back(j);
  return out;
}

template <typename T>
T token_saliency(std::span<const T> window_logits, std::size_t self_slot, T epsilon,
                 std::span<T> workspace) {
  const std::size_t n = window_logits.size();
  if (n == 0 || self_slot >= n) throw Error("token_saliency: bad window");
  if (workspace.size() < 2 * n) throw Error("token_saliency: workspace too small");
  if (n == 1) return std::log((T{1} + epsilon) / epsilon);

  std::span<T> diag = workspace.subspan(0, n);
  std::span<T> nodiag = workspace.subspan(n, n);

  T max_all = -std::numeric_limits<T>::infinity();
  T max_rest = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    max_all = std::max(max_all, window_logits[j]);
    if (j != self_slot) max_rest = std::max(max_rest, window_logits[j]);
  }
  T total_all{0};
  T total_rest{0};
  for (std::size_t j = 0; j < n; ++j) {
    diag[j] = std::exp(window_logits[j] - max_all);
    total_all += diag[j];
    if (j != self_slot) {
      nodiag[j] = std::exp(window_logits[j] - max_rest);
      total_rest += nodiag[j];
    } else {
      nodiag[j] = T{0};
    }
  }
  T score{0};
  for (std::size_t j = 0; j < n; ++j) {
    const T a = diag[j] / total_all;
    const T b = nodiag[j] / total_rest;
    score += a * std::log((a + epsilon) / (b + epsilon));
  }
  return score;
}

template <typename T>
T token_saliency(std::span<const T> window_logits, std::size_t self_slot, T epsilon) {
  std::vector<T> workspace(2 * window_logits.size());
  return token_saliency<T>(window_logits, self_slot, epsilon, workspace);
}

template <typename T>
SwaDistributions<T> swa_distributions(const Tensor<T>& q, const Tensor<T>& k,
                                      const WindowSpec& window) {
  if (q.rank() != 2) throw Error("swa_distributions expects [N x d] inputs");
  const auto hs = head_shape(q, k);
  const std::size_t w = window.radius;
  if (w == 0) throw Error("window radius must be at least 1");
  const std::size_t n = hs.tokens;
  const T s = logit_scale<T>(hs.dim, window.scale);

  SwaDistributions<T> out{Tensor<T>({n, w}), Tensor<T>({n, w}), std::vector<std::uint8_t>(n, 0)};
  std::vector<T> logits(w);
  std::vector<std::uint8_t> keep(w);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t slot = 0; slot < w; ++slot) {
      const bool inside = t + slot + 1 >= w;
      keep[slot] = inside ? 1 : 0;
      logits[slot] = inside ? dot<T>(q.row(t), k.row(t + slot + 1 - w)) * s : T{0};
    }
    masked_softmax_row<T>(logits, keep, out.a_diag.row(t));
    keep[w - 1] = 0;
    if (std::find(keep.begin(), keep.end(), std::uint8_t{1}) == keep.end()) {
      out.degenerate[t] = 1;
      std::fill(out.a_nodiag.row(t).begin(), out.a_nodiag.row(t).end(), T{0});
    } else {
      masked_softmax_row<T>(logits, keep, out.a_nodiag.row(t));
    }
  }
  return out;
}

template <typename T>
ScoreReport self_saliency_scores(const Tensor<T>& q, const Tensor<T>& k,
                                 const WindowSpec& window, double epsilon) {
  return scores_impl(q, k, window.radius, false, window.scale, epsilon);
}

template <typename T>
ScoreReport global_scores(const Tensor<T>& q, const Tensor<T>& k, double epsilon, bool scale) {
  return scores_impl(q, k, 0, true, scale, epsilon);
}

double overlap_at_k(std::span<const double> local, std::span<const double> global,
                    std::size_t k) {
  if (k == 0) throw Error("overlap_at_k: k must be positive");
  if (local.size() != global.size()) throw Error("overlap_at_k: length mismatch");
  const auto a = top_k_indices<double>(local, k);
  const auto b = top_k_indices<double>(global, k);
  std::vector<std::size_t> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(k);
}

double overlap_at_k(const ScoreReport& local, const ScoreReport& global, std::size_t k,
                    std::size_t head) {
  if (local.tokens != global.tokens || head >= local.heads || head >= global.heads) {
    throw Error("overlap_at_k: reports are not comparable");
  }
  return overlap_at_k(local.head_scores(head), global.head_scores(head), k);
}

#define STILL_INSTANTIATE(T)                                                              \
  template T token_saliency<T>(std::span<const T>, std::size_t, T, std::span<T>);         \
  template T token_saliency<T>(std::span<const T>, std::size_t, T);                       \
  template SwaDistributions<T> swa_distributions<T>(const Tensor<T>&, const Tensor<T>&,   \
                                                    const WindowSpec&);                   \
  template ScoreReport self_saliency_scores<T>(const Tensor<T>&, const Tensor<T>&,        \
                                               const WindowSpec&, double);                \
  template ScoreReport global_scores<T>(const Tensor<T>&, const Tensor<T>&, double, bool);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

#undef STILL_INSTANTIATE

}  // namespace still

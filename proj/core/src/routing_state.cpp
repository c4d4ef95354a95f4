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

#include "still/routing_state.hpp"

#include <algorithm>

namespace still {

template <typename T>
void SalientCache<T>::append(std::span<const T> key, std::span<const T> value, double score,
                             std::size_t origin) {
  if (key.size() != dim_ || value.size() != dim_) throw Error("SalientCache: entry width mismatch");
  keys_.insert(keys_.end(), key.begin(), key.end());
  values_.insert(values_.end(), value.begin(), value.end());
  scores_.push_back(score);
  origins_.push_back(origin);
}

template <typename T>
std::size_t SalientCache<T>::enforce_cap() {
  if (!cap_) return 0;
  std::size_t removed = 0;
  while (origins_.size() > *cap_) {
    std::size_t victim = 0;
    for (std::size_t i = 1; i < origins_.size(); ++i) {
      if (scores_[i] < scores_[victim] ||
          (scores_[i] == scores_[victim] && origins_[i] < origins_[victim])) {
        victim = i;
      }
    }
    const auto v = static_cast<std::ptrdiff_t>(victim);
    const auto w = static_cast<std::ptrdiff_t>(dim_);
    keys_.erase(keys_.begin() + v * w, keys_.begin() + (v + 1) * w);
    values_.erase(values_.begin() + v * w, values_.begin() + (v + 1) * w);
    scores_.erase(scores_.begin() + v);
    origins_.erase(origins_.begin() + v);
    ++removed;
  }
  evicted_ += removed;
  return removed;
}

template <typename T>
void SalientCache<T>::clear() {
  keys_.clear();
  values_.clear();
  scores_.clear();
  origins_.clear();
  evicted_ = 0;
}

template <typename T>
SalientCache<T> SalientCache<T>::from_arrays(std::size_t dim, std::optional<std::size_t> cap,
                                             std::vector<T> keys, std::vector<T> values,
                                             std::vector<double> scores,
                                             std::vector<std::size_t> origins, std::size_t evicted) {
  const std::size_t n = origins.size();
  if (scores.size() != n || keys.size() != n * dim || values.size() != n * dim) {
    throw Error("SalientCache: inconsistent snapshot arrays");
  }
  SalientCache c(dim, cap);
  c.keys_ = std::move(keys);
  c.values_ = std::move(values);
  c.scores_ = std::move(scores);
  c.origins_ = std::move(origins);
  c.evicted_ = evicted;
  return c;
}

template <typename T>
LinearState<T> LinearState<T>::zeros(std::size_t feature_dim, std::size_t value_dim) {
  LinearState st;
  st.feature_dim = feature_dim;
  st.value_dim = value_dim;
  st.s.assign(feature_dim * value_dim, T{0});
  st.z.assign(feature_dim, T{0});
  return st;
}

template <typename T>
void LinearState<T>::fold(std::span<const T> phi_k, std::span<const T> v) {
  for (std::size_t i = 0; i < feature_dim; ++i) {
    T* srow = s.data() + i * value_dim;
    const T p = phi_k[i];
    for (std::size_t j = 0; j < value_dim; ++j) srow[j] += p * v[j];
    z[i] += p;
  }
  ++folded_tokens;
}

RoutingMasks select_chunk(std::span<const double> scores, std::size_t lambda) {
  RoutingMasks masks;
  masks.sa = top_k_indices<double>(scores, lambda);
  masks.la.reserve(scores.size() - lambda);
  std::size_t next = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (next < masks.sa.size() && masks.sa[next] == i) {
      ++next;
    } else {
      masks.la.push_back(i);
    }
  }
  return masks;
}

template <typename T>
void commit_chunk(SalientCache<T>& cache, LinearState<T>& state, const ChunkRecord<T>& chunk,
                  const RoutingMasks& masks, const KeyFeatureMap<T>& phi_k) {
  if (masks.sa.size() + masks.la.size() != chunk.size()) {
    throw Error("commit_chunk: masks do not partition the chunk");
  }
  for (std::size_t i : masks.sa) {
    cache.append(chunk.key(i), chunk.value(i), chunk.scores[i], chunk.origin + i);
  }
  if (!masks.la.empty()) {
    std::vector<T> phi(state.feature_dim);
    std::vector<T> scratch(chunk.dim);
    for (std::size_t i : masks.la) {
      phi_k(chunk.key(i), phi, scratch);
      state.fold(phi, chunk.value(i));
    }
  }
  cache.enforce_cap();
}

template <typename T>
std::vector<HeadRoutingState<T>> reset(const AttentionConfig& config) {
  config.validate();
  std::vector<HeadRoutingState<T>> heads;
  heads.reserve(config.heads);
  for (std::size_t h = 0; h < config.heads; ++h) {
    heads.push_back({SalientCache<T>(config.head_dim, config.salient_capacity()),
                     LinearState<T>::zeros(2 * config.head_dim, config.head_dim)});
  }
  return heads;
}

#define STILL_INSTANTIATE(T)                                                               \
  template class SalientCache<T>;                                                          \
  template struct LinearState<T>;                                                          \
  template void commit_chunk<T>(SalientCache<T>&, LinearState<T>&, const ChunkRecord<T>&,  \
                                const RoutingMasks&, const KeyFeatureMap<T>&);             \
  template std::vector<HeadRoutingState<T>> reset<T>(const AttentionConfig&);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

#undef STILL_INSTANTIATE

}  // namespace still

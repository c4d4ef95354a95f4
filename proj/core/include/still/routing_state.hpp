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
#include <optional>
#include <span>
#include <vector>

#include "still/attention_config.hpp"
#include "still/feature_map.hpp"
#include "still/tensor.hpp"

namespace still {

/// Promoted key/value pairs for one head, stored in promotion order (which
/// is ascending origin). With a finite cap, overflow evicts the lowest score
/// first and, among equal scores, the oldest origin.
template <typename T>
class SalientCache {
 public:
  SalientCache() = default;
  SalientCache(std::size_t dim, std::optional<std::size_t> cap) : dim_(dim), cap_(cap) {}

  std::size_t dim() const noexcept { return dim_; }
  std::optional<std::size_t> cap() const noexcept { return cap_; }
  std::size_t size() const noexcept { return origins_.size(); }
  bool empty() const noexcept { return origins_.empty(); }
  std::size_t evicted() const noexcept { return evicted_; }

  std::span<const T> key(std::size_t i) const { return {keys_.data() + i * dim_, dim_}; }
  std::span<const T> value(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }
  double score(std::size_t i) const { return scores_[i]; }
  std::size_t origin(std::size_t i) const { return origins_[i]; }
  const std::vector<std::size_t>& origins() const noexcept { return origins_; }
  const std::vector<double>& scores() const noexcept { return scores_; }
  const std::vector<T>& keys() const noexcept { return keys_; }
  const std::vector<T>& values() const noexcept { return values_; }

  /// Appends without enforcing the cap.
  void append(std::span<const T> key, std::span<const T> value, double score, std::size_t origin);
  /// Evicts until size() <= cap. Returns the number of evicted entries.
  std::size_t enforce_cap();
  void clear();

  /// Rebuilds a cache from raw arrays (snapshot restore).
  static SalientCache from_arrays(std::size_t dim, std::optional<std::size_t> cap,
                                  std::vector<T> keys, std::vector<T> values,
                                  std::vector<double> scores, std::vector<std::size_t> origins,
                                  std::size_t evicted);

 private:
  std::size_t dim_ = 0;
  std::optional<std::size_t> cap_;
  std::vector<T> keys_;
  std::vector<T> values_;
  std::vector<double> scores_;
  std::vector<std::size_t> origins_;
  std::size_t evicted_ = 0;
};

/// Linear-attention running sums for one head: s = sum phi(k)^T v
/// ([feature_dim x value_dim], row-major) and z = sum phi(k).
template <typename T>
struct LinearState {
  std::size_t feature_dim = 0;
  std::size_t value_dim = 0;
  std::vector<T> s;
  std::vector<T> z;
  std::size_t folded_tokens = 0;

  static LinearState zeros(std::size_t feature_dim, std::size_t value_dim);
  /// s += phi_k v^T, z += phi_k.
  void fold(std::span<const T> phi_k, std::span<const T> v);
};

struct RoutingMasks {
  std::vector<std::size_t> sa;
  std::vector<std::size_t> la;
};

/// Top-lambda chunk positions go to the salient cache, the rest to the
/// linear state. Both lists are ascending, 0-based within the chunk.
RoutingMasks select_chunk(std::span<const double> scores, std::size_t lambda);

/// One completed chunk awaiting routing.
template <typename T>
struct ChunkRecord {
  std::size_t origin = 0;  ///< sequence position of the chunk's first token
  std::size_t dim = 0;
  std::vector<T> keys;     ///< [len x dim]
  std::vector<T> values;   ///< [len x dim]
  std::vector<double> scores;

  std::size_t size() const noexcept { return scores.size(); }
  std::span<const T> key(std::size_t i) const { return {keys.data() + i * dim, dim}; }
  std::span<const T> value(std::size_t i) const { return {values.data() + i * dim, dim}; }
};

/// Feature map applied to keys when they are folded into the linear state.
template <typename T>
struct KeyFeatureMap {
  FeatureKind kind = FeatureKind::kNormPreserved;
  const LinearMap<T>* f = nullptr;

  std::size_t feature_dim() const { return 2 * f->out_dim; }
  void operator()(std::span<const T> x, std::span<T> phi, std::span<T> scratch) const {
    feature_map_row<T>(kind, *f, x, phi, scratch);
  }
};

/// Appends the SA tokens to the cache (then enforces its cap) and folds the
/// LA tokens into the state, both in ascending chunk order.
template <typename T>
void commit_chunk(SalientCache<T>& cache, LinearState<T>& state, const ChunkRecord<T>& chunk,
                  const RoutingMasks& masks, const KeyFeatureMap<T>& phi_k);

/// Routing state owned by one head.
template <typename T>
struct HeadRoutingState {
  SalientCache<T> cache;
  LinearState<T> state;
};

/// Empty caches and zero states for every head of `config`.
template <typename T>
std::vector<HeadRoutingState<T>> reset(const AttentionConfig& config);

}  // namespace still

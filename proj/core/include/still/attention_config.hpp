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
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "still/feature_map.hpp"
#include "still/tensor.hpp"

namespace still {

/// How the cache cap B is charged.
///   kJoint:     salient entries + the live window (2C keys) <= B
///   kCacheOnly: salient entries <= B
enum class BudgetMode { kJoint, kCacheOnly };

std::string_view budget_mode_name(BudgetMode mode);
BudgetMode parse_budget_mode(std::string_view name);

struct AttentionConfig {
  std::size_t heads = 1;
  std::size_t head_dim = 32;
  /// Chunk size C; also the length of the saliency scoring window.
  std::size_t chunk_size = 64;
  /// Tokens promoted to the salient cache per routed chunk.
  std::size_t lambda = 8;
  double epsilon = 1e-6;
  /// nullopt = unbounded cache.
  std::optional<std::size_t> cache_cap;
  BudgetMode budget_mode = BudgetMode::kJoint;
  bool scale = true;
  std::uint64_t seed = 0;
  DType precision = DType::kF64;
  FeatureKind feature_map = FeatureKind::kNormPreserved;

  void validate() const;

  /// Largest number of keys in a query's local window: the previous chunk
  /// plus the current chunk prefix.
  std::size_t window_capacity() const noexcept { return 2 * chunk_size; }

  /// Cap on salient-cache entries after applying the budget mode.
  std::optional<std::size_t> salient_capacity() const;

  std::string to_json() const;
  static AttentionConfig from_json(std::string_view text);
  static AttentionConfig load(const std::filesystem::path& path);
};

}  // namespace still

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
#include <deque>
#include <filesystem>
#include <span>
#include <vector>

#include "still/attention.hpp"
#include "still/routing_state.hpp"

namespace still {

/// Recurrent (decode-time) form of the hybrid operator. Tokens arrive one at
/// a time for all heads. Each query attends softmax-wise to the salient cache
/// plus the previous and current chunk, and linearly to the folded state.
/// At the first position of chunk c the buffered chunk c-2 is routed: its
/// top-lambda tokens by saliency join the cache, the rest are folded.
template <typename T>
class HybridDecoder {
 public:
  HybridDecoder(const AttentionConfig& config, HybridParams<T> params);

  const AttentionConfig& config() const noexcept { return config_; }
  /// Position the next call to step() must carry.
  std::size_t position() const noexcept { return position_; }

  /// q, k, v, g are [H x d] for the token at `position`; y receives [H x d].
  /// `diagnostics`, when non-empty, receives H entries.
  void step(std::size_t position, std::span<const T> q, std::span<const T> k,
            std::span<const T> v, std::span<const T> g, std::span<T> y,
            std::span<BranchDiagnostics> diagnostics = {});

  void reset();

  const SalientCache<T>& cache(std::size_t head) const { return heads_.at(head).routing.cache; }
  const LinearState<T>& state(std::size_t head) const { return heads_.at(head).routing.state; }
  /// Tokens buffered in the live window or waiting to be routed.
  std::size_t buffered_tokens(std::size_t head) const;

  /// Resident scalars: cache keys/values/scores, the fixed-capacity window
  /// buffer, and the linear state.
  std::size_t retained_state_size() const;

  void save_snapshot(const std::filesystem::path& dir) const;
  void restore_snapshot(const std::filesystem::path& dir);

 private:
  struct HeadState {
    HeadRoutingState<T> routing;
    std::deque<ChunkRecord<T>> chunks;  // oldest first, at most three
  };

  void route_pending(HeadState& head);

  AttentionConfig config_;
  HybridParams<T> params_;
  T scale_;
  std::size_t position_ = 0;
  std::vector<HeadState> heads_;

  // Scratch reused across steps.
  std::vector<T> logits_;
  std::vector<const T*> rows_;
  std::vector<T> phi_;
  std::vector<T> scratch_;
  std::vector<T> n_la_;
  std::vector<T> score_workspace_;
};

/// Runs the decoder over a whole sequence from a fresh state.
template <typename T>
HybridOutput<T> decode_sequence(const AttentionInputs<T>& inputs, const AttentionConfig& config,
                                const HybridParams<T>& params, bool diagnostics = false);

}  // namespace still

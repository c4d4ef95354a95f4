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
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "still/attention.hpp"
#include "still/attention_config.hpp"

namespace still {

/// Knobs of the planted retrieval task. Needle keys carry a shared direction
/// u (scaled by key_boost) that late queries (probe_boost * u) look for, and
/// a private direction r_p (scaled by self_boost) that the needle's own
/// query repeats, which makes the needle salient inside any local window.
struct PlantedSpec {
  std::size_t tokens = 2048;
  std::size_t head_dim = 32;
  std::size_t heads = 1;
  std::size_t needles = 16;
  /// Needles are drawn from [0, tokens - tail_exclusion).
  std::size_t tail_exclusion = 128;
  /// The last late_queries positions probe for u.
  std::size_t late_queries = 64;
  double key_boost = 5.0;
  double self_boost = 6.0;
  double probe_boost = 5.0;
  double payload = 4.0;
};

struct PlantedTask {
  PlantedSpec spec;
  std::uint64_t seed = 0;
  AttentionInputs<double> inputs;
  /// 0-based, ascending, shared by every head.
  std::vector<std::size_t> needles;
  /// Value coordinate that carries the needle payload.
  std::size_t payload_index = 0;
};

PlantedTask generate_planted(std::uint64_t seed, const PlantedSpec& spec);

/// Mean causal-softmax mass that the late queries put on one planted key,
/// divided by the mean mass on one non-planted key (same queries, same
/// prefix). Infinity when there are no non-planted keys with mass.
double planted_mass_ratio(const PlantedTask& task, bool scale = true);

enum class Router { kSaliency, kPosition, kRandom };

std::string_view router_name(Router router);
Router parse_router(std::string_view name);

struct RecallResult {
  double recall = 0.0;  ///< mean over heads
  std::size_t planted = 0;
  std::size_t found = 0;  ///< summed over heads
  /// Audited retention per head at the last query.
  std::size_t window_tokens = 0;
  std::size_t cache_tokens = 0;
  std::size_t retained_tokens = 0;
  std::size_t budget = 0;
};

/// Fraction of planted positions held in softmax form (salient cache or live
/// window) when the last query runs, at a total of at most `budget` tokens.
/// Saliency and random routers keep a 2C window plus a cache of
/// budget - 2C tokens; chunk routing and eviction follow the decoder. The
/// random router replaces saliency with uniform scores. The position router
/// keeps the most recent `budget` tokens.
RecallResult routing_recall(const PlantedTask& task, Router router, std::size_t budget,
                            const AttentionConfig& config, std::uint64_t router_seed = 0);

/// Cache origins left after routing every chunk that a query at the end of
/// an n-token sequence can see (chunks up to T-3), given per-token scores.
std::vector<std::size_t> simulate_salient_origins(std::span<const double> scores,
                                                  std::size_t chunk_size, std::size_t lambda,
                                                  std::optional<std::size_t> cap);

struct SignTest {
  std::size_t wins = 0;    ///< a > b
  std::size_t losses = 0;  ///< a < b
  std::size_t ties = 0;
  double p_value = 1.0;  ///< exact two-sided binomial over wins + losses
};

SignTest paired_sign_test(std::span<const double> a, std::span<const double> b);

enum class BenchMode { kPrefill, kDecode };

std::string_view bench_mode_name(BenchMode mode);
BenchMode parse_bench_mode(std::string_view name);

struct BenchRecord {
  BenchMode mode = BenchMode::kPrefill;
  std::size_t tokens = 0;
  /// Prefill: median seconds per call. Decode: median seconds per step over
  /// the last chunk before `tokens`.
  double median_seconds = 0.0;
  std::vector<double> samples;
  /// Resident scalars after `tokens` positions (cache, window, state).
  std::size_t state_size = 0;
  std::size_t cache_entries = 0;  ///< summed over heads
  AttentionConfig config;
};

/// Median timings over `repetitions` (>= 3) runs for an increasing grid.
/// Inputs are random with config.seed.
std::vector<BenchRecord> bench(BenchMode mode, std::span<const std::size_t> lengths,
                               const AttentionConfig& config, std::size_t repetitions);

/// Least-squares slope of log(time) against log(N).
double loglog_slope(std::span<const BenchRecord> records);

std::string bench_csv(std::span<const BenchRecord> records);

struct ConsistencyRow {
  std::size_t head = 0;
  std::size_t window = 0;
  std::size_t k = 0;
  double overlap = 0.0;
  double random_expectation = 0.0;  ///< k / N
};

/// overlap@k between window-w and full-context self-saliency, per head.
/// q and k are [N x d] or [H x N x d].
std::vector<ConsistencyRow> consistency_report(const Tensor<double>& q, const Tensor<double>& k,
                                               std::size_t window, double epsilon, std::size_t top_k,
                                               bool scale = true);

}  // namespace still

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

#include <benchmark/benchmark.h>

#include <vector>

#include "still/attention.hpp"
#include "still/decoder.hpp"
#include "still/prefill.hpp"
#include "still/saliency.hpp"

namespace {

using namespace still;

AttentionConfig bench_config() {
  AttentionConfig c;
  c.heads = 4;
  c.head_dim = 32;
  c.chunk_size = 64;
  c.lambda = 8;
  c.cache_cap = 1024;
  return c;
}

void BM_Prefill(benchmark::State& state) {
  const auto config = bench_config();
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto in = random_inputs<double>(config.heads, n, config.head_dim, 1);
  const auto params = HybridParams<double>::identity(config.heads, config.head_dim);
  for (auto _ : state) benchmark::DoNotOptimize(prefill_chunk_parallel(in, config, params).y);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Prefill)->RangeMultiplier(2)->Range(1 << 10, 1 << 15)->Unit(benchmark::kMillisecond)->Complexity();

// Per-step cost after the decoder has consumed range(0) tokens.
void BM_DecodeStep(benchmark::State& state) {
  const auto config = bench_config();
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t hd = config.heads * config.head_dim;
  const std::size_t extra = 4096;
  const auto in = random_inputs<double>(config.heads, n + extra, config.head_dim, 2);
  auto token = [&](const TensorD& t, std::size_t pos) {
    std::vector<double> out(hd);
    for (std::size_t h = 0; h < config.heads; ++h)
      for (std::size_t a = 0; a < config.head_dim; ++a) out[h * config.head_dim + a] = t.at(h, pos, a);
    return out;
  };
  HybridDecoder<double> dec(config, HybridParams<double>::identity(config.heads, config.head_dim));
  std::vector<double> y(hd);
  for (std::size_t t = 0; t < n; ++t)
    dec.step(t, token(in.q, t), token(in.k, t), token(in.v, t), token(in.g, t), y);
  std::vector<std::vector<double>> q, k, v, g;
  for (std::size_t t = n; t < n + extra; ++t) {
    q.push_back(token(in.q, t));
    k.push_back(token(in.k, t));
    v.push_back(token(in.v, t));
    g.push_back(token(in.g, t));
  }
  std::size_t i = 0;
  for (auto _ : state) {
    if (i == extra) {
      state.PauseTiming();
      dec.reset();
      for (std::size_t t = 0; t < n; ++t)
        dec.step(t, token(in.q, t), token(in.k, t), token(in.v, t), token(in.g, t), y);
      i = 0;
      state.ResumeTiming();
    }
    dec.step(n + i, q[i], k[i], v[i], g[i], y);
    benchmark::DoNotOptimize(y.data());
    ++i;
  }
  state.counters["state"] = static_cast<double>(dec.retained_state_size());
}
BENCHMARK(BM_DecodeStep)->RangeMultiplier(4)->Range(1 << 10, 1 << 15)->Unit(benchmark::kMicrosecond);

void BM_SaliencyScores(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto in = random_inputs<double>(4, n, 32, 3);
  for (auto _ : state)
    benchmark::DoNotOptimize(self_saliency_scores(in.q, in.k, WindowSpec{64, true}).scores);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_SaliencyScores)->RangeMultiplier(4)->Range(1 << 10, 1 << 14)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

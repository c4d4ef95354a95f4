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

#include "still/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "still/decoder.hpp"
#include "still/prefill.hpp"
#include "still/rng.hpp"
#include "still/routing_state.hpp"
#include "still/saliency.hpp"

namespace still {

namespace {

std::vector<double> unit_direction(Rng& rng, std::size_t d) {
  std::vector<double> u(d);
  for (double& x : u) x = rng.normal();
  const double n = l2_norm<double>(u);
  for (double& x : u) x /= n;
  return u;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

PlantedTask generate_planted(std::uint64_t seed, const PlantedSpec& spec) {
  const std::size_t n = spec.tokens;
  const std::size_t d = spec.head_dim;
  const std::size_t h_count = spec.heads;
  if (spec.needles >= n) throw Error("generate_planted: needles must be fewer than tokens");
  if (spec.tail_exclusion >= n || spec.needles > n - spec.tail_exclusion) {
    throw Error("generate_planted: not enough room outside the tail for the needles");
  }
  if (spec.late_queries > spec.tail_exclusion) {
    throw Error("generate_planted: late queries must lie inside the excluded tail");
  }
  Rng rng(seed);
  PlantedTask task;
  task.spec = spec;
  task.seed = seed;
  task.inputs.q = rng.normal_tensor<double>({h_count, n, d});
  task.inputs.k = rng.normal_tensor<double>({h_count, n, d});
  task.inputs.v = rng.normal_tensor<double>({h_count, n, d});
  task.inputs.g = Tensor<double>({h_count, n, d});
  for (double& x : task.inputs.g.data()) x = logistic(rng.normal());

  // Partial Fisher-Yates over the admissible positions.
  std::vector<std::size_t> pool(n - spec.tail_exclusion);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < spec.needles; ++i) {
    const std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  task.needles.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.needles));
  std::sort(task.needles.begin(), task.needles.end());
  task.payload_index = d ? rng.uniform_index(d) : 0;

  for (std::size_t h = 0; h < h_count; ++h) {
    const std::vector<double> u = unit_direction(rng, d);
    for (std::size_t p : task.needles) {
      const std::vector<double> r = unit_direction(rng, d);
      for (std::size_t i = 0; i < d; ++i) {
        task.inputs.k.at(h, p, i) += spec.key_boost * u[i] + spec.self_boost * r[i];
        task.inputs.q.at(h, p, i) += spec.self_boost * r[i];
      }
      task.inputs.v.at(h, p, task.payload_index) += spec.payload;
    }
    for (std::size_t t = n - spec.late_queries; t < n; ++t) {
      for (std::size_t i = 0; i < d; ++i) task.inputs.q.at(h, t, i) += spec.probe_boost * u[i];
    }
  }
  return task;
}

double planted_mass_ratio(const PlantedTask& task, bool scale) {
  const auto& in = task.inputs;
  const std::size_t n = in.tokens();
  const std::size_t d = in.head_dim();
  const double s = logit_scale<double>(d, scale);
  std::vector<std::uint8_t> planted(n, 0);
  for (std::size_t p : task.needles) planted[p] = 1;
  double planted_mass = 0.0;
  double other_mass = 0.0;
  std::size_t planted_count = 0;
  std::size_t other_count = 0;
  std::vector<double> row;
  for (std::size_t h = 0; h < in.heads(); ++h) {
    for (std::size_t t = n - task.spec.late_queries; t < n; ++t) {
      row.resize(t + 1);
      auto q = in.q.slab(h).subspan(t * d, d);
      for (std::size_t j = 0; j <= t; ++j) row[j] = dot<double>(q, in.k.slab(h).subspan(j * d, d)) * s;
      softmax_inplace<double>(row);
      for (std::size_t j = 0; j <= t; ++j) {
        if (planted[j]) {
          planted_mass += row[j];
          ++planted_count;
        } else {
          other_mass += row[j];
          ++other_count;
        }
      }
    }
  }
  if (planted_count == 0) return 0.0;
  if (other_count == 0 || other_mass == 0.0) return std::numeric_limits<double>::infinity();
  return (planted_mass / static_cast<double>(planted_count)) /
         (other_mass / static_cast<double>(other_count));
}

std::string_view router_name(Router router) {
  switch (router) {
    case Router::kSaliency: return "saliency";
    case Router::kPosition: return "position";
    case Router::kRandom: return "random";
  }
  return "saliency";
}

Router parse_router(std::string_view name) {
  if (name == "saliency") return Router::kSaliency;
  if (name == "position") return Router::kPosition;
  if (name == "random") return Router::kRandom;
  throw Error("unknown router '" + std::string(name) + "'");
}

std::vector<std::size_t> simulate_salient_origins(std::span<const double> scores,
                                                  std::size_t chunk_size, std::size_t lambda,
                                                  std::optional<std::size_t> cap) {
  if (chunk_size == 0) throw Error("chunk size must be positive");
  const std::size_t n = scores.size();
  const std::size_t chunks = (n + chunk_size - 1) / chunk_size;
  SalientCache<double> cache(0, cap);
  for (std::size_t c = 0; c + 2 < chunks; ++c) {
    const RoutingMasks masks =
        select_chunk(scores.subspan(c * chunk_size, chunk_size), std::min(lambda, chunk_size));
    for (std::size_t i : masks.sa) cache.append({}, {}, scores[c * chunk_size + i], c * chunk_size + i);
    cache.enforce_cap();
  }
  return cache.origins();
}

RecallResult routing_recall(const PlantedTask& task, Router router, std::size_t budget,
                            const AttentionConfig& config, std::uint64_t router_seed) {
  const std::size_t n = task.inputs.tokens();
  const std::size_t c = config.chunk_size;
  if (budget > n) throw Error("routing_recall: budget exceeds the sequence length");
  RecallResult result;
  result.budget = budget;
  result.planted = task.needles.size();
  const std::size_t heads = task.inputs.heads();
  std::vector<std::uint8_t> held(n);
  for (std::size_t h = 0; h < heads; ++h) {
    std::fill(held.begin(), held.end(), std::uint8_t{0});
    std::size_t window = 0;
    std::size_t cached = 0;
    if (router == Router::kPosition) {
      for (std::size_t t = n - budget; t < n; ++t) held[t] = 1;
      window = budget;
    } else {
      const std::size_t live = std::min(n, 2 * c);
      if (budget < live) {
        throw Error("routing_recall: budget " + std::to_string(budget) +
                    " is smaller than the live window of " + std::to_string(live) + " tokens");
      }
      std::vector<double> scores;
      if (router == Router::kSaliency) {
        const ScoreReport report =
            self_saliency_scores(task.inputs.q.slice(h), task.inputs.k.slice(h),
                                 WindowSpec{c, config.scale}, config.epsilon);
        scores.assign(report.scores.begin(), report.scores.end());
      } else {
        Rng rng(router_seed * 1000003ULL + h);
        scores.resize(n);
        for (double& s : scores) s = rng.uniform();
      }
      const std::size_t chunks = (n + c - 1) / c;
      const std::size_t window_first = chunks >= 2 ? (chunks - 2) * c : 0;
      for (std::size_t t = window_first; t < n; ++t) held[t] = 1;
      window = n - window_first;
      const auto origins = simulate_salient_origins(scores, c, config.lambda, budget - live);
      for (std::size_t o : origins) held[o] = 1;
      cached = origins.size();
    }
    result.window_tokens = std::max(result.window_tokens, window);
    result.cache_tokens = std::max(result.cache_tokens, cached);
    result.retained_tokens = std::max(result.retained_tokens, window + cached);
    for (std::size_t p : task.needles) result.found += held[p];
  }
  if (result.retained_tokens > budget) throw Error("routing_recall: budget accounting violated");
  result.recall = result.planted == 0
                      ? 1.0
                      : static_cast<double>(result.found) /
                            static_cast<double>(result.planted * heads);
  return result;
}

SignTest paired_sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("paired_sign_test: samples differ in length");
  SignTest st;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) {
      ++st.wins;
    } else if (a[i] < b[i]) {
      ++st.losses;
    } else {
      ++st.ties;
    }
  }
  const std::size_t m = st.wins + st.losses;
  if (m == 0) return st;
  // P(X <= min) under Binomial(m, 1/2), doubled; computed in log space.
  const std::size_t lo = std::min(st.wins, st.losses);
  double tail = 0.0;
  for (std::size_t i = 0; i <= lo; ++i) {
    const double log_term = std::lgamma(static_cast<double>(m) + 1) -
                            std::lgamma(static_cast<double>(i) + 1) -
                            std::lgamma(static_cast<double>(m - i) + 1) -
                            static_cast<double>(m) * std::log(2.0);
    tail += std::exp(log_term);
  }
  st.p_value = std::min(1.0, 2.0 * tail);
  return st;
}

std::string_view bench_mode_name(BenchMode mode) {
  return mode == BenchMode::kPrefill ? "prefill" : "decode";
}

BenchMode parse_bench_mode(std::string_view name) {
  if (name == "prefill") return BenchMode::kPrefill;
  if (name == "decode") return BenchMode::kDecode;
  throw Error("unknown bench mode '" + std::string(name) + "'");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Scalars a decoder holds after n tokens; mirrors
// HybridDecoder::retained_state_size without running it.
std::size_t analytic_state_size(const AttentionConfig& config, std::size_t n,
                                std::size_t* cache_entries) {
  const std::size_t c = config.chunk_size;
  const std::size_t d = config.head_dim;
  const std::size_t chunks = (n + c - 1) / c;
  std::size_t routed = chunks >= 3 ? (chunks - 2) * std::min(config.lambda, c) : 0;
  if (const auto cap = config.salient_capacity()) routed = std::min(routed, *cap);
  *cache_entries = routed * config.heads;
  const std::size_t per_head = routed * (2 * d + 1) + 2 * d * d + 2 * d + 3 * c * (2 * d + 1);
  return per_head * config.heads;
}

}  // namespace

std::vector<BenchRecord> bench(BenchMode mode, std::span<const std::size_t> lengths,
                               const AttentionConfig& config, std::size_t repetitions) {
  config.validate();
  if (repetitions < 3) throw Error("bench: repetitions must be at least 3");
  if (lengths.empty()) throw Error("bench: empty length grid");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0 || (i && lengths[i] <= lengths[i - 1])) {
      throw Error("bench: lengths must be positive and strictly increasing");
    }
  }
  const std::size_t h = config.heads;
  const std::size_t d = config.head_dim;
  const HybridParams<double> params = HybridParams<double>::identity(h, d);
  std::vector<BenchRecord> records(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    records[i].mode = mode;
    records[i].tokens = lengths[i];
    records[i].config = config;
  }

  if (mode == BenchMode::kPrefill) {
    for (BenchRecord& rec : records) {
      const auto inputs = random_inputs<double>(h, rec.tokens, d, config.seed);
      for (std::size_t r = 0; r < repetitions; ++r) {
        const auto start = Clock::now();
        const auto out = prefill_chunk_parallel(inputs, config, params);
        rec.samples.push_back(seconds_since(start));
        if (!out.y.all_finite()) throw Error("bench: non-finite prefill output");
      }
      rec.median_seconds = median(rec.samples);
      rec.state_size = analytic_state_size(config, rec.tokens, &rec.cache_entries);
    }
    return records;
  }

  // Decode: one pass per repetition over the longest length; per-step times
  // of the chunk that ends at each grid point are summarized there.
  const std::size_t n_max = lengths.back();
  const std::size_t window = std::min(config.chunk_size, lengths.front());
  const auto inputs = random_inputs<double>(h, n_max, d, config.seed);
  std::vector<std::vector<double>> per_rep_median(records.size());
  std::vector<double> q(h * d), k(h * d), v(h * d), g(h * d), y(h * d);
  std::vector<double> step_times;
  for (std::size_t r = 0; r < repetitions; ++r) {
    HybridDecoder<double> decoder(config, params);
    std::size_t next = 0;
    step_times.clear();
    for (std::size_t t = 0; t < n_max; ++t) {
      for (std::size_t hh = 0; hh < h; ++hh) {
        const std::size_t off = (hh * n_max + t) * d;
        std::copy_n(inputs.q.data().begin() + off, d, q.begin() + hh * d);
        std::copy_n(inputs.k.data().begin() + off, d, k.begin() + hh * d);
        std::copy_n(inputs.v.data().begin() + off, d, v.begin() + hh * d);
        std::copy_n(inputs.g.data().begin() + off, d, g.begin() + hh * d);
      }
      const bool timed = t + window >= lengths[next];
      const auto start = Clock::now();
      decoder.step(t, q, k, v, g, y);
      if (timed) step_times.push_back(seconds_since(start));
      if (t + 1 == lengths[next]) {
        per_rep_median[next].push_back(median(step_times));
        step_times.clear();
        if (r == 0) {
          records[next].state_size = decoder.retained_state_size();
          std::size_t entries = 0;
          for (std::size_t hh = 0; hh < h; ++hh) entries += decoder.cache(hh).size();
          records[next].cache_entries = entries;
        }
        ++next;
        if (next == lengths.size()) break;
      }
    }
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].samples = per_rep_median[i];
    records[i].median_seconds = median(per_rep_median[i]);
  }
  return records;
}

double loglog_slope(std::span<const BenchRecord> records) {
  if (records.size() < 2) throw Error("loglog_slope: need at least two points");
  double mx = 0.0, my = 0.0;
  for (const auto& r : records) {
    if (r.median_seconds <= 0.0) throw Error("loglog_slope: non-positive time");
    mx += std::log(static_cast<double>(r.tokens));
    my += std::log(r.median_seconds);
  }
  const double n = static_cast<double>(records.size());
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (const auto& r : records) {
    const double dx = std::log(static_cast<double>(r.tokens)) - mx;
    sxy += dx * (std::log(r.median_seconds) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

std::string bench_csv(std::span<const BenchRecord> records) {
  std::ostringstream os;
  os.precision(9);
  os << "mode,tokens,median_seconds,reps,state_size,cache_entries,heads,head_dim,chunk_size,"
        "lambda,cache_cap\n";
  for (const auto& r : records) {
    os << bench_mode_name(r.mode) << ',' << r.tokens << ',' << r.median_seconds << ','
       << r.samples.size() << ',' << r.state_size << ',' << r.cache_entries << ','
       << r.config.heads << ',' << r.config.head_dim << ',' << r.config.chunk_size << ','
       << r.config.lambda << ',';
    if (r.config.cache_cap) os << *r.config.cache_cap;
    os << '\n';
  }
  return os.str();
}

std::vector<ConsistencyRow> consistency_report(const Tensor<double>& q, const Tensor<double>& k,
                                               std::size_t window, double epsilon,
                                               std::size_t top_k, bool scale) {
  const ScoreReport local = self_saliency_scores(q, k, WindowSpec{window, scale}, epsilon);
  const ScoreReport global = global_scores(q, k, epsilon, scale);
  std::vector<ConsistencyRow> rows;
  for (std::size_t h = 0; h < local.heads; ++h) {
    ConsistencyRow row;
    row.head = h;
    row.window = window;
    row.k = top_k;
    row.overlap = overlap_at_k(local, global, top_k, h);
    row.random_expectation = static_cast<double>(top_k) / static_cast<double>(local.tokens);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace still

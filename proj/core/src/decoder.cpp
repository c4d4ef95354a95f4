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

#include "still/decoder.hpp"

#include <algorithm>

#include <json.hpp>

#include "still/saliency.hpp"
#include "still/tensor_io.hpp"

namespace still {

template <typename T>
HybridDecoder<T>::HybridDecoder(const AttentionConfig& config, HybridParams<T> params)
    : config_(config),
      params_(std::move(params)),
      scale_(logit_scale<T>(config.head_dim, config.scale)) {
  config_.validate();
  reset();
}

template <typename T>
void HybridDecoder<T>::reset() {
  position_ = 0;
  heads_.clear();
  for (auto& routing : still::reset<T>(config_)) heads_.push_back({std::move(routing), {}});
  const std::size_t d = config_.head_dim;
  phi_.assign(2 * d, T{0});
  scratch_.assign(d, T{0});
  n_la_.assign(d, T{0});
  score_workspace_.assign(2 * config_.chunk_size, T{0});
}

template <typename T>
void HybridDecoder<T>::route_pending(HeadState& head) {
  const ChunkRecord<T>& chunk = head.chunks.front();
  const RoutingMasks masks = select_chunk(chunk.scores, config_.lambda);
  commit_chunk(head.routing.cache, head.routing.state, chunk, masks,
               KeyFeatureMap<T>{config_.feature_map, &params_.f_k.head(&head - heads_.data())});
  head.chunks.pop_front();
}

template <typename T>
void HybridDecoder<T>::step(std::size_t position, std::span<const T> q, std::span<const T> k,
                            std::span<const T> v, std::span<const T> g, std::span<T> y,
                            std::span<BranchDiagnostics> diagnostics) {
  if (position != position_) {
    throw Error("decode_step: out-of-order token (expected position " + std::to_string(position_) +
                ", got " + std::to_string(position) + ")");
  }
  const std::size_t H = config_.heads;
  const std::size_t d = config_.head_dim;
  const std::size_t C = config_.chunk_size;
  if (q.size() != H * d || k.size() != H * d || v.size() != H * d || g.size() != H * d ||
      y.size() != H * d) {
    throw Error("decode_step: per-token inputs must be [H x d]");
  }
  const std::size_t b = position % C;

  for (std::size_t h = 0; h < H; ++h) {
    HeadState& head = heads_[h];
    if (b == 0) {
      if (head.chunks.size() == 2) route_pending(head);
      ChunkRecord<T> fresh;
      fresh.origin = position;
      fresh.dim = d;
      fresh.keys.reserve(C * d);
      fresh.values.reserve(C * d);
      fresh.scores.reserve(C);
      head.chunks.push_back(std::move(fresh));
    }
    ChunkRecord<T>& current = head.chunks.back();
    std::span<const T> qt = q.subspan(h * d, d);
    current.keys.insert(current.keys.end(), k.begin() + h * d, k.begin() + (h + 1) * d);
    current.values.insert(current.values.end(), v.begin() + h * d, v.begin() + (h + 1) * d);

    // Softmax keys: salient cache, then the previous chunk, then this chunk.
    logits_.clear();
    rows_.clear();
    const SalientCache<T>& cache = head.routing.cache;
    for (std::size_t i = 0; i < cache.size(); ++i) {
      logits_.push_back(dot<T>(qt, cache.key(i)) * scale_);
      rows_.push_back(cache.value(i).data());
    }
    const std::size_t cache_keys = logits_.size();
    for (const ChunkRecord<T>& chunk : head.chunks) {
      for (std::size_t i = 0; i < chunk.keys.size() / d; ++i) {
        logits_.push_back(dot<T>(qt, chunk.key(i)) * scale_);
        rows_.push_back(chunk.value(i).data());
      }
    }
    const std::size_t window_keys = logits_.size() - cache_keys;

    // The saliency window is the trailing min(C, position + 1) keys.
    const std::size_t score_len = std::min(C, position + 1);
    std::span<const T> score_logits(logits_.data() + logits_.size() - score_len, score_len);
    const T score = token_saliency<T>(score_logits, score_len - 1,
                                      static_cast<T>(config_.epsilon), score_workspace_);
    current.scores.push_back(static_cast<double>(score));

    feature_map_row<T>(config_.feature_map, params_.f_q.head(h), qt, phi_, scratch_);
    const LinearState<T>& st = head.routing.state;
    const T d_la = detail::linear_branch<T>(phi_, st.s, st.z, g.subspan(h * d, d), d, n_la_);
    BranchDiagnostics diag =
        detail::combine_branches<T>(logits_, rows_, n_la_, d_la, y.subspan(h * d, d));
    if (!diagnostics.empty()) {
      diag.window_keys = window_keys;
      diag.cache_keys = cache_keys;
      diag.la_tokens = st.folded_tokens;
      diagnostics[h] = diag;
    }
  }
  ++position_;
}

template <typename T>
std::size_t HybridDecoder<T>::buffered_tokens(std::size_t head) const {
  std::size_t n = 0;
  for (const auto& chunk : heads_.at(head).chunks) n += chunk.size();
  return n;
}

template <typename T>
std::size_t HybridDecoder<T>::retained_state_size() const {
  const std::size_t d = config_.head_dim;
  std::size_t total = 0;
  for (const auto& head : heads_) {
    total += head.routing.cache.size() * (2 * d + 1);
    total += head.routing.state.s.size() + head.routing.state.z.size();
    // Window buffer: up to three chunks of keys, values and scores.
    total += 3 * config_.chunk_size * (2 * d + 1);
  }
  return total;
}

template <typename T>
void HybridDecoder<T>::save_snapshot(const std::filesystem::path& dir) const {
  const std::size_t d = config_.head_dim;
  std::vector<NamedTensor<T>> tensors;
  nlohmann::json meta;
  meta["position"] = position_;
  meta["config"] = nlohmann::json::parse(config_.to_json());
  meta["heads"] = nlohmann::json::array();
  auto as_tensor = [](const auto& values, Shape shape) {
    std::vector<T> data(values.begin(), values.end());
    return Tensor<T>(std::move(shape), std::move(data));
  };
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    const HeadState& head = heads_[h];
    const SalientCache<T>& cache = head.routing.cache;
    const LinearState<T>& st = head.routing.state;
    const std::string p = "h" + std::to_string(h) + "_";
    const std::size_t n = cache.size();
    tensors.push_back({p + "cache_keys", as_tensor(cache.keys(), {n, d}), h, "cache_key"});
    tensors.push_back({p + "cache_values", as_tensor(cache.values(), {n, d}), h, "cache_value"});
    tensors.push_back({p + "state_s", as_tensor(st.s, {st.feature_dim, st.value_dim}), h, "state_s"});
    tensors.push_back({p + "state_z", as_tensor(st.z, {st.feature_dim}), h, "state_z"});
    nlohmann::json hm;
    hm["cache_scores"] = cache.scores();
    hm["cache_origins"] = cache.origins();
    hm["evicted"] = cache.evicted();
    hm["folded_tokens"] = st.folded_tokens;
    hm["chunks"] = nlohmann::json::array();
    for (std::size_t c = 0; c < head.chunks.size(); ++c) {
      const ChunkRecord<T>& chunk = head.chunks[c];
      const std::string cp = p + "chunk" + std::to_string(c) + "_";
      tensors.push_back({cp + "keys", as_tensor(chunk.keys, {chunk.size(), d}), h, "window_key"});
      tensors.push_back(
          {cp + "values", as_tensor(chunk.values, {chunk.size(), d}), h, "window_value"});
      hm["chunks"].push_back({{"origin", chunk.origin}, {"scores", chunk.scores}});
    }
    meta["heads"].push_back(std::move(hm));
  }
  write_bundle(dir, tensors, meta.dump());
}

template <typename T>
void HybridDecoder<T>::restore_snapshot(const std::filesystem::path& dir) {
  std::string meta_text;
  const auto tensors = read_bundle<T>(dir, &meta_text);
  const auto meta = nlohmann::json::parse(meta_text);
  const AttentionConfig saved = AttentionConfig::from_json(meta.at("config").dump());
  if (saved.to_json() != config_.to_json()) throw Error("snapshot was taken with another config");
  const std::size_t d = config_.head_dim;
  auto values_of = [&](const std::string& name) { return find_tensor(tensors, name).vector(); };

  reset();
  position_ = meta.at("position").get<std::size_t>();
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    const auto& hm = meta.at("heads").at(h);
    const std::string p = "h" + std::to_string(h) + "_";
    HeadState& head = heads_[h];
    head.routing.cache = SalientCache<T>::from_arrays(
        d, config_.salient_capacity(), values_of(p + "cache_keys"), values_of(p + "cache_values"),
        hm.at("cache_scores").get<std::vector<double>>(),
        hm.at("cache_origins").get<std::vector<std::size_t>>(), hm.at("evicted").get<std::size_t>());
    head.routing.state.s = values_of(p + "state_s");
    head.routing.state.z = values_of(p + "state_z");
    head.routing.state.folded_tokens = hm.at("folded_tokens").get<std::size_t>();
    const auto& chunks = hm.at("chunks");
    for (std::size_t c = 0; c < chunks.size(); ++c) {
      const std::string cp = p + "chunk" + std::to_string(c) + "_";
      ChunkRecord<T> chunk;
      chunk.origin = chunks.at(c).at("origin").get<std::size_t>();
      chunk.dim = d;
      chunk.keys = values_of(cp + "keys");
      chunk.values = values_of(cp + "values");
      chunk.scores = chunks.at(c).at("scores").get<std::vector<double>>();
      head.chunks.push_back(std::move(chunk));
    }
  }
}

template <typename T>
HybridOutput<T> decode_sequence(const AttentionInputs<T>& inputs, const AttentionConfig& config,
                                const HybridParams<T>& params, bool diagnostics) {
  inputs.validate();
  const std::size_t H = inputs.heads();
  const std::size_t N = inputs.tokens();
  const std::size_t d = inputs.head_dim();
  if (H != config.heads || d != config.head_dim) throw Error("inputs disagree with config");
  HybridDecoder<T> decoder(config, params);
  HybridOutput<T> out;
  out.y = Tensor<T>({H, N, d});
  if (diagnostics) out.diagnostics.resize(H * N);
  std::vector<T> q(H * d), k(H * d), v(H * d), g(H * d), y(H * d);
  std::vector<BranchDiagnostics> diag(diagnostics ? H : 0);
  for (std::size_t t = 0; t < N; ++t) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t src = (h * N + t) * d;
      std::copy_n(inputs.q.data().begin() + src, d, q.begin() + h * d);
      std::copy_n(inputs.k.data().begin() + src, d, k.begin() + h * d);
      std::copy_n(inputs.v.data().begin() + src, d, v.begin() + h * d);
      std::copy_n(inputs.g.data().begin() + src, d, g.begin() + h * d);
    }
    decoder.step(t, q, k, v, g, y, diag);
    for (std::size_t h = 0; h < H; ++h) {
      std::copy_n(y.begin() + h * d, d, out.y.data().begin() + (h * N + t) * d);
      if (diagnostics) out.diagnostics[h * N + t] = diag[h];
    }
  }
  return out;
}

#define STILL_INSTANTIATE(T)                                                                 \
  template class HybridDecoder<T>;                                                           \
  template HybridOutput<T> decode_sequence<T>(const AttentionInputs<T>&,                     \
                                              const AttentionConfig&, const HybridParams<T>&, \
                                              bool);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

#undef STILL_INSTANTIATE

}  // namespace still

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

#include "still/prefill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "still/routing_state.hpp"
#include "still/saliency.hpp"

namespace still {
namespace {

// Rows [first, first + count) of an [N x d] slab, zero-padded to `rows`.
template <typename T>
Tensor<T> gather_rows(std::span<const T> slab, std::size_t d, std::size_t first,
                      std::size_t count, std::size_t rows) {
  Tensor<T> out({rows, d});
  std::copy_n(slab.begin() + first * d, count * d, out.data().begin());
  return out;
}

}  // namespace

template <typename T>
HybridOutput<T> prefill_chunk_parallel(const AttentionInputs<T>& inputs,
                                       const AttentionConfig& config,
                                       const HybridParams<T>& params, bool diagnostics) {
  inputs.validate();
  config.validate();
  const std::size_t H = inputs.heads();
  const std::size_t N = inputs.tokens();
  const std::size_t d = inputs.head_dim();
  const std::size_t fd = 2 * d;
  const std::size_t C = config.chunk_size;
  const std::size_t lambda = config.lambda;
  if (H != config.heads || d != config.head_dim) throw Error("inputs disagree with config");
  const T scale = logit_scale<T>(d, config.scale);
  const T eps = static_cast<T>(config.epsilon);
  const std::size_t chunks = (N + C - 1) / C;
  const auto cap = config.salient_capacity();

  HybridOutput<T> out;
  out.y = Tensor<T>({H, N, d});
  if (diagnostics) {
    out.diagnostics.resize(H * N);
    out.n_sa = Tensor<T>({H, N, d});
    out.n_la = Tensor<T>({H, N, d});
  }

  for (std::size_t h = 0; h < H; ++h) {
    const std::span<const T> q = inputs.q.slab(h);
    const std::span<const T> k = inputs.k.slab(h);
    const std::span<const T> v = inputs.v.slab(h);
    const std::span<const T> g = inputs.g.slab(h);
    const LinearMap<T>& f_q = params.f_q.head(h);
    const LinearMap<T>& f_k = params.f_k.head(h);

    // One pass over query chunks. Chunk c computes its logits and scores,
    // then routes chunk c-2 (whose scores are final) into the salient list
    // and the running linear state before producing its outputs. Only the
    // last two chunks of logits are kept.
    std::vector<double> scores(chunks * C, -std::numeric_limits<double>::infinity());
    std::vector<RoutingMasks> masks(chunks);
    std::vector<std::size_t> valid(chunks);
    Tensor<T> s_in, s_prev, k_prev_chunk;
    Tensor<T> s_state({fd, d});
    std::vector<T> z_state(fd, T{0});
    std::size_t la_tokens = 0;
    SalientCache<T> salient(d, cap);
    std::vector<T> scratch(d);
    std::vector<T> n_la(d);

    for (std::size_t c = 0; c < chunks; ++c) {
      valid[c] = std::min(C, N - c * C);
      const Tensor<T> qc = gather_rows(q, d, c * C, valid[c], C);
      const Tensor<T> kc = gather_rows(k, d, c * C, valid[c], C);
      s_in = matmul(qc, transpose(kc));
      for (T& x : s_in.data()) x *= scale;
      if (c > 0) {
        s_prev = matmul(qc, k_prev_chunk);
        for (T& x : s_prev.data()) x *= scale;
      }
      k_prev_chunk = transpose(kc);

      // Saliency: rows of [s_prev | s_in] with the diag (M^up, M^down) and
      // nodiag (M^up, strict lower) supports.
      {
        Tensor<T> joint({C, 2 * C});
        std::vector<std::vector<std::size_t>> excl_diag(C), excl_nodiag(C);
        std::vector<std::uint8_t> singleton(C, 0);
        for (std::size_t i = 0; i < C; ++i) {
          std::span<T> row = joint.row(i);
          for (std::size_t j = 0; j < C; ++j) {
            const bool up = c > 0 && j > i;
            row[j] = up ? s_prev.at(i, j) : T{0};
            if (!up) {
              excl_diag[i].push_back(j);
              excl_nodiag[i].push_back(j);
            }
          }
          for (std::size_t j = 0; j < C; ++j) {
            const bool down = j <= i && j < valid[c];
            row[C + j] = down ? s_in.at(i, j) : T{0};
            if (!down) excl_diag[i].push_back(C + j);
            if (!(down && j < i)) excl_nodiag[i].push_back(C + j);
          }
          singleton[i] = excl_nodiag[i].size() == 2 * C ? 1 : 0;
          if (singleton[i]) excl_nodiag[i].clear();  // placeholder support, unused
        }
        const Tensor<T> a_diag = masked_softmax(joint, excl_diag);
        const Tensor<T> a_nodiag = masked_softmax(joint, excl_nodiag);
        for (std::size_t i = 0; i < valid[c]; ++i) {
          if (singleton[i]) {
            scores[c * C + i] = static_cast<double>(std::log((T{1} + eps) / eps));
            continue;
          }
          T score{0};
          for (std::size_t j = 0; j < 2 * C; ++j) {
            const T a = a_diag.at(i, j);
            score += a * std::log((a + eps) / (a_nodiag.at(i, j) + eps));
          }
          scores[c * C + i] = static_cast<double>(score);
        }
      }

      // Route chunk c-2: top-lambda into the salient list, the rest summed
      // into the linear state as one chunk term.
      if (c >= 2) {
        const std::size_t r = c - 2;
        masks[r] = select_chunk(std::span<const double>(scores).subspan(r * C, C), lambda);
        for (std::size_t i : masks[r].sa) {
          const std::size_t t = r * C + i;
          salient.append(k.subspan(t * d, d), v.subspan(t * d, d), scores[t], t);
        }
        salient.enforce_cap();
        const std::size_t m = masks[r].la.size();
        if (m > 0) {
          Tensor<T> phi_t({fd, m});
          Tensor<T> v_la({m, d});
          std::vector<T> phi(fd);
          for (std::size_t j = 0; j < m; ++j) {
            const std::size_t t = r * C + masks[r].la[j];
            feature_map_row<T>(config.feature_map, f_k, k.subspan(t * d, d), phi, scratch);
            for (std::size_t a = 0; a < fd; ++a) phi_t.at(a, j) = phi[a];
            std::copy_n(v.begin() + t * d, d, v_la.row(j).begin());
          }
          const Tensor<T> chunk_s = matmul(phi_t, v_la);
          for (std::size_t a = 0; a < fd * d; ++a) s_state[a] += chunk_s[a];
          for (std::size_t a = 0; a < fd; ++a) {
            T acc{0};
            for (std::size_t j = 0; j < m; ++j) acc += phi_t.at(a, j);
            z_state[a] += acc;
          }
          la_tokens += m;
        }
      }

      // Softmax branch joined with the linear state.
      const std::size_t m = salient.size();
      const std::size_t prev = c > 0 ? C : 0;
      const std::size_t width = m + prev + C;

      Tensor<T> logits({C, width});
      if (m > 0) {
        Tensor<T> k_sa_t({d, m});
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t a = 0; a < d; ++a) k_sa_t.at(a, r) = salient.key(r)[a];
        const Tensor<T> s_sa = matmul(qc, k_sa_t);
        for (std::size_t i = 0; i < C; ++i)
          for (std::size_t r = 0; r < m; ++r) logits.at(i, r) = s_sa.at(i, r) * scale;
      }
      Tensor<T> values({width, d});
      std::copy(salient.values().begin(), salient.values().end(), values.data().begin());
      for (std::size_t j = 0; j < prev; ++j) {
        std::copy_n(v.begin() + ((c - 1) * C + j) * d, d, values.row(m + j).begin());
      }
      for (std::size_t j = 0; j < valid[c]; ++j) {
        std::copy_n(v.begin() + (c * C + j) * d, d, values.row(m + prev + j).begin());
      }

      Tensor<T> phi_q({C, fd});
      Tensor<T> weights({C, width});
      std::vector<T> offsets(C, T{0});
      std::vector<T> la_scales(C, T{0});
      std::vector<T> d_las(C, T{0});
      for (std::size_t i = 0; i < valid[c]; ++i) {
        feature_map_row<T>(config.feature_map, f_q, q.subspan((c * C + i) * d, d), phi_q.row(i),
                           scratch);
        std::span<T> lrow = logits.row(i);
        for (std::size_t j = 0; j < prev; ++j) lrow[m + j] = s_prev.at(i, j);
        for (std::size_t j = 0; j < C; ++j) lrow[m + prev + j] = s_in.at(i, j);
        const std::size_t support = m + prev + i + 1;  // causal: in-chunk j <= i
        T offset = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < support; ++j) offset = std::max(offset, lrow[j]);
        const T d_la = dot<T>(phi_q.row(i), z_state);
        if (d_la > T{0}) offset = std::max(offset, std::log(d_la));
        std::span<T> wrow = weights.row(i);
        for (std::size_t j = 0; j < support; ++j) wrow[j] = std::exp(lrow[j] - offset);
        offsets[i] = offset;
        la_scales[i] = std::exp(-offset);
        d_las[i] = d_la;
      }
      const Tensor<T> numer = matmul(weights, values);

      for (std::size_t i = 0; i < valid[c]; ++i) {
        const std::size_t t = c * C + i;
        std::span<const T> wrow = weights.row(i);
        T d_sa{0};
        for (T w : wrow) d_sa += w;
        // n_la = (phi_q s) * g
        std::fill(n_la.begin(), n_la.end(), T{0});
        std::span<const T> pq = phi_q.row(i);
        for (std::size_t a = 0; a < fd; ++a)
          for (std::size_t b = 0; b < d; ++b) n_la[b] += pq[a] * s_state[a * d + b];
        const T la_scale = la_scales[i];
        T den = d_sa + d_las[i] * la_scale;
        BranchDiagnostics diag;
        if (!(den >= static_cast<T>(kDenominatorFloor))) {
          den += static_cast<T>(kDenominatorFloor);
          diag.floor_hit = true;
        }
        std::span<T> yt = out.y.data().subspan((h * N + t) * d, d);
        for (std::size_t b = 0; b < d; ++b) {
          const T nla = n_la[b] * g[t * d + b] * la_scale;
          yt[b] = (numer.at(i, b) + nla) / den;
          if (diagnostics) {
            out.n_sa.data()[(h * N + t) * d + b] = numer.at(i, b);
            out.n_la.data()[(h * N + t) * d + b] = nla;
          }
        }
        if (diagnostics) {
          diag.d_sa = static_cast<double>(d_sa);
          diag.d_la = static_cast<double>(d_las[i] * la_scale);
          diag.log_scale = static_cast<double>(offsets[i]);
          diag.window_keys = prev + i + 1;
          diag.cache_keys = m;
          diag.la_tokens = la_tokens;
          out.diagnostics[h * N + t] = diag;
        }
      }
    }
  }
  return out;
}

template HybridOutput<float> prefill_chunk_parallel<float>(const AttentionInputs<float>&,
                                                           const AttentionConfig&,
                                                           const HybridParams<float>&, bool);
template HybridOutput<double> prefill_chunk_parallel<double>(const AttentionInputs<double>&,
                                                             const AttentionConfig&,
                                                             const HybridParams<double>&, bool);

}  // namespace still

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

#include "still/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "still/prefill.hpp"
#include "still/rng.hpp"
#include "still/routing_state.hpp"
#include "still/saliency.hpp"

namespace still {

template <typename T>
void AttentionInputs<T>::validate() const {
  if (q.rank() != 3) throw Error("attention inputs must be [H x N x d]");
  if (k.shape() != q.shape() || v.shape() != q.shape() || g.shape() != q.shape()) {
    throw Error("q, k, v and g must share one [H x N x d] shape");
  }
}

template <typename T>
AttentionInputs<T> random_inputs(std::size_t heads, std::size_t tokens, std::size_t head_dim,
                                 std::uint64_t seed) {
  Rng rng(seed);
  const Shape shape{heads, tokens, head_dim};
  AttentionInputs<T> in{rng.normal_tensor<T>(shape), rng.normal_tensor<T>(shape),
                        rng.normal_tensor<T>(shape), Tensor<T>(shape)};
  for (T& g : in.g.data()) g = static_cast<T>(logistic(rng.normal()));
  return in;
}

template <typename T>
HybridParams<T> HybridParams<T>::identity(std::size_t heads, std::size_t head_dim) {
  return {FeatureMapParams<T>::identity(heads, head_dim),
          FeatureMapParams<T>::identity(heads, head_dim)};
}

template <typename T>
HybridParams<T> HybridParams<T>::random(std::size_t heads, std::size_t head_dim, Rng& rng,
                                        double stddev) {
  auto f_q = FeatureMapParams<T>::random(heads, head_dim, rng, stddev);
  auto f_k = FeatureMapParams<T>::random(heads, head_dim, rng, stddev);
  return {std::move(f_q), std::move(f_k)};
}

template <typename T>
template <typename U>
HybridParams<U> HybridParams<T>::cast() const {
  auto convert = [](const FeatureMapParams<T>& p) {
    FeatureMapParams<U> out;
    out.shared = p.shared;
    for (const auto& m : p.heads) {
      LinearMap<U> c;
      c.in_dim = m.in_dim;
      c.out_dim = m.out_dim;
      c.weight.assign(m.weight.begin(), m.weight.end());
      c.bias.assign(m.bias.begin(), m.bias.end());
      out.heads.push_back(std::move(c));
    }
    return out;
  };
  return {convert(f_q), convert(f_k)};
}

namespace {

struct Dims {
  std::size_t heads;
  std::size_t tokens;
  std::size_t dim;
  std::size_t value_dim;
};

template <typename T>
Dims oracle_dims(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.shape() != k.shape()) throw Error("q and k shapes differ");
  if (v.rank() != q.rank()) throw Error("v rank differs from q");
  if (q.rank() == 2) {
    if (v.dim(0) != q.dim(0)) throw Error("v length differs from q");
    return {1, q.dim(0), q.dim(1), v.dim(1)};
  }
  if (q.rank() == 3) {
    if (v.dim(0) != q.dim(0) || v.dim(1) != q.dim(1)) throw Error("v extents differ from q");
    return {q.dim(0), q.dim(1), q.dim(2), v.dim(2)};
  }
  throw Error("expected [N x d] or [H x N x d] inputs");
}

// Softmax attention of each query over the last w positions.
template <typename T>
Tensor<T> windowed_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             std::size_t w, bool scale) {
  const Dims dm = oracle_dims(q, k, v);
  const T s = logit_scale<T>(dm.dim, scale);
  Tensor<T> y(v.shape());
  std::vector<T> weights(dm.tokens);
  for (std::size_t h = 0; h < dm.heads; ++h) {
    const T* qh = q.data().data() + h * dm.tokens * dm.dim;
    const T* kh = k.data().data() + h * dm.tokens * dm.dim;
    const T* vh = v.data().data() + h * dm.tokens * dm.value_dim;
    T* yh = y.data().data() + h * dm.tokens * dm.value_dim;
    for (std::size_t t = 0; t < dm.tokens; ++t) {
      const std::size_t first = t + 1 >= w ? t + 1 - w : 0;
      std::span<const T> qt(qh + t * dm.dim, dm.dim);
      T max_logit = -std::numeric_limits<T>::infinity();
      for (std::size_t j = first; j <= t; ++j) {
        weights[j] = dot<T>(qt, std::span<const T>(kh + j * dm.dim, dm.dim)) * s;
        max_logit = std::max(max_logit, weights[j]);
      }
      T total{0};
      std::span<T> yt(yh + t * dm.value_dim, dm.value_dim);
      for (std::size_t j = first; j <= t; ++j) {
        const T e = std::exp(weights[j] - max_logit);
        total += e;
        const T* vj = vh + j * dm.value_dim;
        for (std::size_t c = 0; c < dm.value_dim; ++c) yt[c] += e * vj[c];
      }
      for (T& c : yt) c /= total;
    }
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> oracle_full_softmax(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              bool scale) {
  const Dims dm = oracle_dims(q, k, v);
  return windowed_attention(q, k, v, std::max<std::size_t>(dm.tokens, 1), scale);
}

template <typename T>
Tensor<T> oracle_swa(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t w,
                     bool scale) {
  if (w == 0) throw Error("oracle_swa: window must be at least 1");
  return windowed_attention(q, k, v, w, scale);
}

template <typename T>
LinearAttentionResult<T> oracle_linear_attention(const Tensor<T>& phi_q, const Tensor<T>& phi_k,
                                                 const Tensor<T>& v, LinearForm form) {
  if (phi_q.rank() != 2 || phi_k.shape() != phi_q.shape() || v.rank() != 2 ||
      v.dim(0) != phi_q.dim(0)) {
    throw Error("oracle_linear_attention expects phi [N x d'] and v [N x d]");
  }
  const std::size_t n = phi_q.dim(0);
  const std::size_t fd = phi_q.dim(1);
  const std::size_t vd = v.dim(1);
  for (T x : phi_k.data()) {
    if (x < T{0}) throw Error("oracle_linear_attention: feature map must be non-negative");
  }
  LinearAttentionResult<T> out{Tensor<T>({n, vd}), std::vector<std::uint8_t>(n, 0)};

  auto readout = [&](std::size_t t, std::span<const T> s, std::span<const T> z) {
    std::span<const T> pq = phi_q.row(t);
    std::span<T> yt = out.y.row(t);
    for (std::size_t i = 0; i < fd; ++i) {
      for (std::size_t c = 0; c < vd; ++c) yt[c] += pq[i] * s[i * vd + c];
    }
    T den = dot<T>(pq, z);
    if (den < static_cast<T>(kDenominatorFloor)) {
      den += static_cast<T>(kDenominatorFloor);
      out.floored[t] = 1;
    }
    for (T& c : yt) c /= den;
  };

  if (form == LinearForm::kRecurrent) {
    std::vector<T> s(fd * vd, T{0});
    std::vector<T> z(fd, T{0});
    for (std::size_t t = 0; t < n; ++t) {
      std::span<const T> pk = phi_k.row(t);
      std::span<const T> vt = v.row(t);
      for (std::size_t i = 0; i < fd; ++i) {
        for (std::size_t c = 0; c < vd; ++c) s[i * vd + c] += pk[i] * vt[c];
        z[i] += pk[i];
      }
      readout(t, s, z);
    }
  } else {
    Tensor<T> outer({n, fd, vd});
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t i = 0; i < fd; ++i)
        for (std::size_t c = 0; c < vd; ++c) outer.at(t, i, c) = phi_k.at(t, i) * v.at(t, c);
    }
    const Tensor<T> s = chunked_cumsum(outer, 0);
    const Tensor<T> z = chunked_cumsum(phi_k, 0);
    for (std::size_t t = 0; t < n; ++t) readout(t, s.slab(t), z.row(t));
  }
  return out;
}

namespace detail {

template <typename T>
BranchDiagnostics combine_branches(std::span<const T> logits, std::span<const T* const> value_rows,
                                   std::span<const T> n_la, T d_la, std::span<T> y,
                                   std::span<T> n_sa_out, std::span<T> n_la_out) {
  const std::size_t d = y.size();
  T offset = -std::numeric_limits<T>::infinity();
  for (T l : logits) offset = std::max(offset, l);
  if (d_la > T{0}) offset = std::max(offset, std::log(d_la));
  std::fill(y.begin(), y.end(), T{0});
  T d_sa{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const T e = std::exp(logits[i] - offset);
    d_sa += e;
    const T* vi = value_rows[i];
    for (std::size_t c = 0; c < d; ++c) y[c] += e * vi[c];
  }
  if (!n_sa_out.empty()) std::copy(y.begin(), y.end(), n_sa_out.begin());
  const T la_scale = std::exp(-offset);
  const T d_la_scaled = d_la * la_scale;
  for (std::size_t c = 0; c < d; ++c) {
    const T n = n_la[c] * la_scale;
    if (!n_la_out.empty()) n_la_out[c] = n;
    y[c] += n;
  }
  T den = d_sa + d_la_scaled;
  BranchDiagnostics diag;
  if (!(den >= static_cast<T>(kDenominatorFloor))) {
    den += static_cast<T>(kDenominatorFloor);
    diag.floor_hit = true;
  }
  for (T& c : y) c /= den;
  diag.d_sa = static_cast<double>(d_sa);
  diag.d_la = static_cast<double>(d_la_scaled);
  diag.log_scale = static_cast<double>(offset);
  return diag;
}

template <typename T>
T linear_branch(std::span<const T> phi_q, std::span<const T> s, std::span<const T> z,
                std::span<const T> g, std::size_t value_dim, std::span<T> n_la) {
  std::fill(n_la.begin(), n_la.end(), T{0});
  for (std::size_t i = 0; i < phi_q.size(); ++i) {
    const T p = phi_q[i];
    const T* srow = s.data() + i * value_dim;
    for (std::size_t c = 0; c < value_dim; ++c) n_la[c] += p * srow[c];
  }
  for (std::size_t c = 0; c < value_dim; ++c) n_la[c] *= g[c];
  return dot<T>(phi_q, z);
}

}  // namespace detail

template <typename T>
HybridOutput<T> reference_hybrid(const AttentionInputs<T>& inputs, const AttentionConfig& config,
                                 const HybridParams<T>& params, bool diagnostics) {
  inputs.validate();
  config.validate();
  const std::size_t H = inputs.heads();
  const std::size_t N = inputs.tokens();
  const std::size_t d = inputs.head_dim();
  const std::size_t fd = 2 * d;
  const std::size_t C = config.chunk_size;
  if (H != config.heads || d != config.head_dim) throw Error("inputs disagree with config");
  const T scale = logit_scale<T>(d, config.scale);
  const auto cap = config.salient_capacity();

  HybridOutput<T> out;
  out.y = Tensor<T>({H, N, d});
  if (diagnostics) {
    out.diagnostics.resize(H * N);
    out.n_sa = Tensor<T>({H, N, d});
    out.n_la = Tensor<T>({H, N, d});
  }

  std::vector<T> phi(fd);
  std::vector<T> scratch(d);
  std::vector<T> n_la(d);
  std::vector<T> logits;
  std::vector<const T*> rows;

  for (std::size_t h = 0; h < H; ++h) {
    const Tensor<T> qh = inputs.q.slice(h);
    const Tensor<T> kh = inputs.k.slice(h);
    const Tensor<T> vh = inputs.v.slice(h);
    const Tensor<T> gh = inputs.g.slice(h);
    const ScoreReport report =
        self_saliency_scores(qh, kh, WindowSpec{C, config.scale}, config.epsilon);
    const std::span<const double> scores = report.head_scores(0);
    const LinearMap<T>& fq = params.f_q.head(h);
    const LinearMap<T>& fk = params.f_k.head(h);

    const std::size_t chunks = (N + C - 1) / C;
    std::vector<RoutingMasks> masks(chunks);
    for (std::size_t j = 0; j + 2 < chunks; ++j) {
      masks[j] = select_chunk(scores.subspan(j * C, C), config.lambda);
    }

    for (std::size_t c = 0; c < chunks; ++c) {
      // Salient set: replay promotions and evictions over chunks 0..c-2.
      std::vector<std::pair<double, std::size_t>> cached;  // (score, origin)
      std::vector<std::size_t> linear_tokens;
      for (std::size_t j = 0; j + 2 <= c; ++j) {
        for (std::size_t i : masks[j].sa) cached.emplace_back(scores[j * C + i], j * C + i);
        for (std::size_t i : masks[j].la) linear_tokens.push_back(j * C + i);
        while (cap && cached.size() > *cap) {
          auto victim = std::min_element(cached.begin(), cached.end());
          cached.erase(victim);
        }
      }
      std::vector<T> s(fd * d, T{0});
      std::vector<T> z(fd, T{0});
      for (std::size_t i : linear_tokens) {
        feature_map_row<T>(config.feature_map, fk, kh.row(i), phi, scratch);
        for (std::size_t a = 0; a < fd; ++a) {
          for (std::size_t b = 0; b < d; ++b) s[a * d + b] += phi[a] * vh.at(i, b);
          z[a] += phi[a];
        }
      }

      const std::size_t window_first = c == 0 ? 0 : (c - 1) * C;
      for (std::size_t t = c * C; t < std::min(N, (c + 1) * C); ++t) {
        logits.clear();
        rows.clear();
        for (const auto& [score, origin] : cached) {
          logits.push_back(dot<T>(qh.row(t), kh.row(origin)) * scale);
          rows.push_back(vh.row(origin).data());
        }
        for (std::size_t j = window_first; j <= t; ++j) {
          logits.push_back(dot<T>(qh.row(t), kh.row(j)) * scale);
          rows.push_back(vh.row(j).data());
        }
        feature_map_row<T>(config.feature_map, fq, qh.row(t), phi, scratch);
        const T d_la = detail::linear_branch<T>(phi, s, z, gh.row(t), d, n_la);
        std::span<T> yt = out.y.data().subspan((h * N + t) * d, d);
        std::span<T> nsa, nla;
        if (diagnostics) {
          nsa = out.n_sa.data().subspan((h * N + t) * d, d);
          nla = out.n_la.data().subspan((h * N + t) * d, d);
        }
        BranchDiagnostics diag = detail::combine_branches<T>(logits, rows, n_la, d_la, yt, nsa, nla);
        if (diagnostics) {
          diag.window_keys = t - window_first + 1;
          diag.cache_keys = cached.size();
          diag.la_tokens = linear_tokens.size();
          out.diagnostics[h * N + t] = diag;
        }
      }
    }
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::size_t, double>> output_error_curve(
    const AttentionInputs<T>& inputs, const AttentionConfig& config, const HybridParams<T>& params,
    std::span<const std::size_t> lambdas) {
  const Tensor<T> full = oracle_full_softmax(inputs.q, inputs.k, inputs.v, config.scale);
  const std::size_t d = inputs.head_dim();
  std::vector<std::pair<std::size_t, double>> curve;
  for (std::size_t lambda : lambdas) {
    AttentionConfig cfg = config;
    cfg.lambda = lambda;
    const HybridOutput<T> hy = prefill_chunk_parallel(inputs, cfg, params);
    double total = 0.0;
    const std::size_t rows = hy.y.size() / d;
    for (std::size_t r = 0; r < rows; ++r) {
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(hy.y[r * d + c]) - static_cast<double>(full[r * d + c]);
        sq += diff * diff;
      }
      total += std::sqrt(sq);
    }
    curve.emplace_back(lambda, rows ? total / static_cast<double>(rows) : 0.0);
  }
  return curve;
}

#define STILL_INSTANTIATE(T)                                                                     \
  template struct AttentionInputs<T>;                                                            \
  template struct HybridParams<T>;                                                               \
  template AttentionInputs<T> random_inputs<T>(std::size_t, std::size_t, std::size_t,            \
                                               std::uint64_t);                                   \
  template Tensor<T> oracle_full_softmax<T>(const Tensor<T>&, const Tensor<T>&,                  \
                                            const Tensor<T>&, bool);                             \
  template Tensor<T> oracle_swa<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                   std::size_t, bool);                                           \
  template LinearAttentionResult<T> oracle_linear_attention<T>(                                  \
      const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, LinearForm);                         \
  template HybridOutput<T> reference_hybrid<T>(const AttentionInputs<T>&,                        \
                                               const AttentionConfig&, const HybridParams<T>&,   \
                                               bool);                                            \
  template std::vector<std::pair<std::size_t, double>> output_error_curve<T>(                    \
      const AttentionInputs<T>&, const AttentionConfig&, const HybridParams<T>&,                 \
      std::span<const std::size_t>);                                                             \
  template BranchDiagnostics detail::combine_branches<T>(                                        \
      std::span<const T>, std::span<const T* const>, std::span<const T>, T, std::span<T>,        \
      std::span<T>, std::span<T>);                                                               \
  template T detail::linear_branch<T>(std::span<const T>, std::span<const T>,                    \
                                      std::span<const T>, std::span<const T>, std::size_t,       \
                                      std::span<T>);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

template HybridParams<float> HybridParams<double>::cast<float>() const;
template HybridParams<double> HybridParams<float>::cast<double>() const;
template HybridParams<double> HybridParams<double>::cast<double>() const;
template HybridParams<float> HybridParams<float>::cast<float>() const;

#undef STILL_INSTANTIATE

}  // namespace still

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

#include "still/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "still/routing_state.hpp"
#include "still/saliency.hpp"

namespace still {

AttentionConfig default_transfer_config() {
  AttentionConfig c;
  c.heads = 2;
  c.head_dim = 16;
  c.chunk_size = 32;
  c.lambda = 4;
  c.seed = 7;
  return c;
}

template <typename T>
TeacherLayer<T>::TeacherLayer(std::size_t model_dim, std::size_t heads, std::size_t head_dim,
                              LinearMap<T> w_q, LinearMap<T> w_k, LinearMap<T> w_v, bool scale)
    : model_dim_(model_dim),
      heads_(heads),
      head_dim_(head_dim),
      w_q_(std::move(w_q)),
      w_k_(std::move(w_k)),
      w_v_(std::move(w_v)),
      scale_(scale) {
  for (const LinearMap<T>* w : {&w_q_, &w_k_, &w_v_}) {
    if (w->in_dim != model_dim_ || w->out_dim != heads_ * head_dim_) {
      throw Error("teacher projections must be model_dim -> heads * head_dim");
    }
  }
}

template <typename T>
void TeacherLayer<T>::project(const Tensor<T>& hidden, Tensor<T>& q, Tensor<T>& k,
                              Tensor<T>& v) const {
  if (hidden.rank() != 2 || hidden.dim(1) != model_dim_) {
    throw Error("hidden states must be [N x model_dim]");
  }
  const std::size_t n = hidden.dim(0);
  const std::size_t d = head_dim_;
  q = Tensor<T>({heads_, n, d});
  k = Tensor<T>({heads_, n, d});
  v = Tensor<T>({heads_, n, d});
  std::vector<T> row(heads_ * d);
  auto scatter = [&](const LinearMap<T>& w, Tensor<T>& dst, std::size_t t) {
    w.apply(hidden.row(t), row);
    for (std::size_t h = 0; h < heads_; ++h) {
      std::copy_n(row.begin() + h * d, d, dst.data().begin() + (h * n + t) * d);
    }
  };
  for (std::size_t t = 0; t < n; ++t) {
    scatter(w_q_, q, t);
    scatter(w_k_, k, t);
    scatter(w_v_, v, t);
  }
}

template <typename T>
Tensor<T> TeacherLayer<T>::attend(const Tensor<T>& hidden) const {
  Tensor<T> q, k, v;
  project(hidden, q, k, v);
  return oracle_full_softmax(q, k, v, scale_);
}

template <typename T>
TeacherLayer<T> make_teacher(std::uint64_t seed, std::size_t model_dim, std::size_t heads,
                             std::size_t head_dim, bool scale) {
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(model_dim));
  auto w_q = LinearMap<T>::random(heads * head_dim, model_dim, rng, stddev);
  auto w_k = LinearMap<T>::random(heads * head_dim, model_dim, rng, stddev);
  auto w_v = LinearMap<T>::random(heads * head_dim, model_dim, rng, stddev);
  return TeacherLayer<T>(model_dim, heads, head_dim, std::move(w_q), std::move(w_k),
                         std::move(w_v), scale);
}

template <typename T>
StudentParams<T> StudentParams<T>::initial(std::size_t heads, std::size_t head_dim,
                                           std::size_t model_dim) {
  return {FeatureMapParams<T>::identity(heads, head_dim),
          FeatureMapParams<T>::identity(heads, head_dim),
          GateParams<T>::zeros(heads, model_dim, head_dim)};
}

template <typename T>
StudentParams<T> StudentParams<T>::zeros_like(const StudentParams& other) {
  StudentParams z = other;
  for (std::span<T> t : z.tensors()) std::fill(t.begin(), t.end(), T{0});
  return z;
}

template <typename T>
std::vector<std::span<T>> StudentParams<T>::tensors() {
  std::vector<std::span<T>> out;
  for (FeatureMapParams<T>* fm : {&f_q, &f_k}) {
    for (LinearMap<T>& m : fm->heads) {
      out.emplace_back(m.weight);
      if (m.has_bias()) out.emplace_back(m.bias);
    }
  }
  for (LinearMap<T>& m : gate.heads) {
    out.emplace_back(m.weight);
    if (m.has_bias()) out.emplace_back(m.bias);
  }
  return out;
}

template <typename T>
std::vector<std::span<const T>> StudentParams<T>::tensors() const {
  std::vector<std::span<const T>> out;
  for (std::span<T> t : const_cast<StudentParams*>(this)->tensors()) out.emplace_back(t);
  return out;
}

template <typename T>
std::size_t StudentParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

template <typename T>
TransferBatch<T> make_batch(std::uint64_t seed, std::size_t batch, std::size_t tokens,
                            std::size_t model_dim) {
  Rng rng(seed);
  TransferBatch<T> b;
  for (std::size_t i = 0; i < batch; ++i) b.hidden.push_back(rng.normal_tensor<T>({tokens, model_dim}));
  return b;
}

namespace {

// Loss contribution (sum of squared errors) of one sequence. When `grad` is
// non-null, adds grad_scale * d(sum)/d(params) into it.
template <typename T>
double sequence_loss(const Tensor<T>& hidden, const TeacherLayer<T>& teacher,
                     const StudentParams<T>& params, const AttentionConfig& config, T grad_scale,
                     StudentParams<T>* grad) {
  const std::size_t H = teacher.heads();
  const std::size_t d = teacher.head_dim();
  const std::size_t fd = 2 * d;
  const std::size_t N = hidden.dim(0);
  const std::size_t C = config.chunk_size;
  const std::size_t chunks = (N + C - 1) / C;
  const T scale = logit_scale<T>(d, config.scale);
  const auto cap = config.salient_capacity();
  const FeatureKind kind = config.feature_map;

  Tensor<T> q, k, v;
  teacher.project(hidden, q, k, v);
  const Tensor<T> target = oracle_full_softmax(q, k, v, config.scale);
  const Tensor<T> gates = gate_forward(hidden, params.gate);

  double loss = 0.0;
  std::vector<T> scratch(d), n_la(d), r(d), y(d), gy(d), gphi(fd), gx(d), gpre(d);
  std::vector<T> logits;
  std::vector<const T*> rows;

  for (std::size_t h = 0; h < H; ++h) {
    const Tensor<T> qh = q.slice(h);
    const Tensor<T> kh = k.slice(h);
    const Tensor<T> vh = v.slice(h);
    const LinearMap<T>& fq = params.f_q.head(h);
    const LinearMap<T>& fk = params.f_k.head(h);
    const LinearMap<T>& wg = params.gate.heads.at(h);
    const ScoreReport report = self_saliency_scores(qh, kh, WindowSpec{C, config.scale}, config.epsilon);
    const std::span<const double> scores = report.head_scores(0);

    std::vector<RoutingMasks> masks(chunks);
    for (std::size_t j = 0; j + 2 < chunks; ++j) {
      masks[j] = select_chunk(scores.subspan(j * C, C), config.lambda);
    }

    Tensor<T> phi_k({N, fd});
    for (std::size_t i = 0; i < N; ++i) feature_map_row<T>(kind, fk, kh.row(i), phi_k.row(i), scratch);

    // Prefix state visible to chunk c: LA tokens of chunks <= c - 2.
    std::vector<std::vector<T>> s_chunk(chunks, std::vector<T>(fd * d, T{0}));
    std::vector<std::vector<T>> z_chunk(chunks, std::vector<T>(fd, T{0}));
    for (std::size_t c = 2; c < chunks; ++c) {
      s_chunk[c] = s_chunk[c - 1];
      z_chunk[c] = z_chunk[c - 1];
      for (std::size_t i : masks[c - 2].la) {
        const std::size_t t = (c - 2) * C + i;
        for (std::size_t a = 0; a < fd; ++a) {
          for (std::size_t b = 0; b < d; ++b) s_chunk[c][a * d + b] += phi_k.at(t, a) * vh.at(t, b);
          z_chunk[c][a] += phi_k.at(t, a);
        }
      }
    }
    std::vector<std::vector<T>> gs_chunk, gz_chunk;
    if (grad) {
      gs_chunk.assign(chunks, std::vector<T>(fd * d, T{0}));
      gz_chunk.assign(chunks, std::vector<T>(fd, T{0}));
    }

    std::vector<std::pair<double, std::size_t>> cached;
    std::vector<T> phi_q(fd);
    for (std::size_t c = 0; c < chunks; ++c) {
      if (c >= 2) {
        for (std::size_t i : masks[c - 2].sa) cached.emplace_back(scores[(c - 2) * C + i], (c - 2) * C + i);
        while (cap && cached.size() > *cap) cached.erase(std::min_element(cached.begin(), cached.end()));
      }
      const std::vector<T>& s = s_chunk[c];
      const std::vector<T>& z = z_chunk[c];
      const std::size_t window_first = c == 0 ? 0 : (c - 1) * C;
      for (std::size_t t = c * C; t < std::min(N, (c + 1) * C); ++t) {
        logits.clear();
        rows.clear();
        for (const auto& entry : cached) {
          logits.push_back(dot<T>(qh.row(t), kh.row(entry.second)) * scale);
          rows.push_back(vh.row(entry.second).data());
        }
        for (std::size_t j = window_first; j <= t; ++j) {
          logits.push_back(dot<T>(qh.row(t), kh.row(j)) * scale);
          rows.push_back(vh.row(j).data());
        }
        T offset = *std::max_element(logits.begin(), logits.end());
        feature_map_row<T>(kind, fq, qh.row(t), phi_q, scratch);
        std::fill(r.begin(), r.end(), T{0});
        for (std::size_t a = 0; a < fd; ++a)
          for (std::size_t b = 0; b < d; ++b) r[b] += phi_q[a] * s[a * d + b];
        const T d_la = dot<T>(std::span<const T>(phi_q), std::span<const T>(z));
        if (d_la > T{0}) offset = std::max(offset, std::log(d_la));
        const T la_scale = std::exp(-offset);

        std::fill(y.begin(), y.end(), T{0});
        T d_sa{0};
        for (std::size_t i = 0; i < logits.size(); ++i) {
          const T e = std::exp(logits[i] - offset);
          d_sa += e;
          for (std::size_t b = 0; b < d; ++b) y[b] += e * rows[i][b];
        }
        std::span<const T> gt = gates.data().subspan((h * N + t) * d, d);
        for (std::size_t b = 0; b < d; ++b) y[b] += la_scale * r[b] * gt[b];
        const T den = d_sa + la_scale * d_la;
        for (T& yb : y) yb /= den;

        std::span<const T> yt = target.data().subspan((h * N + t) * d, d);
        for (std::size_t b = 0; b < d; ++b) {
          const T diff = y[b] - yt[b];
          loss += static_cast<double>(diff) * static_cast<double>(diff);
          gy[b] = grad_scale * T{2} * diff;
        }
        if (!grad) continue;

        // y = (A + c r*g) / (a + c D); c = la_scale treated as a constant
        // (y does not depend on the shared offset).
        const T gy_dot_y = dot<T>(std::span<const T>(gy), std::span<const T>(y));
        const T g_den = -la_scale * gy_dot_y / den;  // dL/dD
        std::fill(gphi.begin(), gphi.end(), T{0});
        for (std::size_t b = 0; b < d; ++b) {
          const T g_n = la_scale * gy[b] / den;  // dL/dN_la[b]
          const T g_r = g_n * gt[b];
          const T g_gate = g_n * r[b];
          gpre[b] = g_gate * gt[b] * (T{1} - gt[b]);
          for (std::size_t a = 0; a < fd; ++a) {
            gphi[a] += s[a * d + b] * g_r;
            gs_chunk[c][a * d + b] += phi_q[a] * g_r;
          }
        }
        for (std::size_t a = 0; a < fd; ++a) {
          gphi[a] += g_den * z[a];
          gz_chunk[c][a] += g_den * phi_q[a];
        }
        LinearMap<T>& gw = grad->gate.heads.at(h);
        std::span<const T> xt = hidden.row(t);
        for (std::size_t b = 0; b < d; ++b) {
          T* wrow = gw.weight.data() + b * wg.in_dim;
          for (std::size_t m = 0; m < wg.in_dim; ++m) wrow[m] += gpre[b] * xt[m];
          if (gw.has_bias()) gw.bias[b] += gpre[b];
        }
        feature_map_backward_row<T>(kind, fq, qh.row(t), gphi, gx, grad->f_q.head(h));
      }
    }

    if (grad) {
      // A token folded after chunk j feeds every query chunk >= j + 2.
      std::vector<T> suffix_s(fd * d, T{0});
      std::vector<T> suffix_z(fd, T{0});
      for (std::size_t c = chunks; c-- > 2;) {
        for (std::size_t a = 0; a < fd * d; ++a) suffix_s[a] += gs_chunk[c][a];
        for (std::size_t a = 0; a < fd; ++a) suffix_z[a] += gz_chunk[c][a];
        for (std::size_t i : masks[c - 2].la) {
          const std::size_t t = (c - 2) * C + i;
          for (std::size_t a = 0; a < fd; ++a) {
            T acc = suffix_z[a];
            for (std::size_t b = 0; b < d; ++b) acc += suffix_s[a * d + b] * vh.at(t, b);
            gphi[a] = acc;
          }
          feature_map_backward_row<T>(kind, fk, kh.row(t), gphi, gx, grad->f_k.head(h));
        }
      }
    }
  }
  return loss;
}

template <typename T>
void check_compatible(const TransferBatch<T>& batch, const TeacherLayer<T>& teacher,
                      const AttentionConfig& config) {
  config.validate();
  if (batch.hidden.empty()) throw Error("transfer batch is empty");
  if (config.heads != teacher.heads() || config.head_dim != teacher.head_dim()) {
    throw Error("student config disagrees with the teacher's heads/head_dim");
  }
}

}  // namespace

template <typename T>
T transfer_loss(const TransferBatch<T>& batch, const TeacherLayer<T>& teacher,
                const StudentParams<T>& params, const AttentionConfig& config) {
  check_compatible(batch, teacher, config);
  double total = 0.0;
  std::size_t count = 0;
  for (const Tensor<T>& hidden : batch.hidden) {
    total += sequence_loss<T>(hidden, teacher, params, config, T{0}, nullptr);
    count += hidden.dim(0) * teacher.heads() * teacher.head_dim();
  }
  return static_cast<T>(total / static_cast<double>(count));
}

template <typename T>
LossAndGrad<T> transfer_loss_and_grad(const TransferBatch<T>& batch, const TeacherLayer<T>& teacher,
                                      const StudentParams<T>& params, const AttentionConfig& config) {
  check_compatible(batch, teacher, config);
  std::size_t count = 0;
  for (const Tensor<T>& hidden : batch.hidden) count += hidden.dim(0) * teacher.heads() * teacher.head_dim();
  LossAndGrad<T> out{T{0}, StudentParams<T>::zeros_like(params)};
  const T grad_scale = T{1} / static_cast<T>(count);
  double total = 0.0;
  for (const Tensor<T>& hidden : batch.hidden) {
    total += sequence_loss<T>(hidden, teacher, params, config, grad_scale, &out.grad);
  }
  out.loss = static_cast<T>(total / static_cast<double>(count));
  return out;
}

template <typename T>
TrainState<T> TrainState<T>::start(StudentParams<T> params) {
  TrainState st;
  st.first_moment = StudentParams<T>::zeros_like(params);
  st.second_moment = StudentParams<T>::zeros_like(params);
  st.params = std::move(params);
  return st;
}

template <typename T>
void train_step(TrainState<T>& state, const TransferBatch<T>& batch,
                const TeacherLayer<T>& teacher, const AttentionConfig& config,
                double learning_rate) {
  LossAndGrad<T> lg = transfer_loss_and_grad(batch, teacher, state.params, config);
  for (std::span<const T> g : std::as_const(lg.grad).tensors()) {
    for (T x : g) {
      if (!std::isfinite(x)) {
        throw Error("train_step: non-finite gradient at step " + std::to_string(state.step));
      }
    }
  }
  const AdamConfig& adam = state.adam;
  const double t = static_cast<double>(state.step + 1);
  const double correction1 = 1.0 - std::pow(adam.beta1, t);
  const double correction2 = 1.0 - std::pow(adam.beta2, t);
  auto params = state.params.tensors();
  auto grads = lg.grad.tensors();
  auto m1 = state.first_moment.tensors();
  auto m2 = state.second_moment.tensors();
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double g = static_cast<double>(grads[p][i]);
      const double m = adam.beta1 * static_cast<double>(m1[p][i]) + (1.0 - adam.beta1) * g;
      const double s = adam.beta2 * static_cast<double>(m2[p][i]) + (1.0 - adam.beta2) * g * g;
      m1[p][i] = static_cast<T>(m);
      m2[p][i] = static_cast<T>(s);
      const double update =
          learning_rate * (m / correction1) / (std::sqrt(s / correction2) + adam.epsilon);
      params[p][i] = static_cast<T>(static_cast<double>(params[p][i]) - update);
    }
  }
  state.loss_history.push_back(static_cast<double>(lg.loss));
  ++state.step;
}

#define STILL_INSTANTIATE(T)                                                                    \
  template class TeacherLayer<T>;                                                               \
  template struct StudentParams<T>;                                                             \
  template struct TrainState<T>;                                                                \
  template TeacherLayer<T> make_teacher<T>(std::uint64_t, std::size_t, std::size_t,             \
                                           std::size_t, bool);                                  \
  template TransferBatch<T> make_batch<T>(std::uint64_t, std::size_t, std::size_t, std::size_t); \
  template T transfer_loss<T>(const TransferBatch<T>&, const TeacherLayer<T>&,                  \
                              const StudentParams<T>&, const AttentionConfig&);                 \
  template LossAndGrad<T> transfer_loss_and_grad<T>(const TransferBatch<T>&,                    \
                                                    const TeacherLayer<T>&,                     \
                                                    const StudentParams<T>&,                    \
                                                    const AttentionConfig&);                    \
  template void train_step<T>(TrainState<T>&, const TransferBatch<T>&, const TeacherLayer<T>&,  \
                              const AttentionConfig&, double);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

#undef STILL_INSTANTIATE

}  // namespace still

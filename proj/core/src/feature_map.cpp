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

#include "still/feature_map.hpp"

#include <algorithm>
#include <cmath>

namespace still {

template <typename T>
LinearMap<T> LinearMap<T>::identity(std::size_t dim) {
  LinearMap m = zeros(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) m.weight[i * dim + i] = T{1};
  return m;
}

template <typename T>
LinearMap<T> LinearMap<T>::zeros(std::size_t out_dim, std::size_t in_dim, bool with_bias) {
  LinearMap m;
  m.in_dim = in_dim;
  m.out_dim = out_dim;
  m.weight.assign(out_dim * in_dim, T{0});
  if (with_bias) m.bias.assign(out_dim, T{0});
  return m;
}

template <typename T>
LinearMap<T> LinearMap<T>::random(std::size_t out_dim, std::size_t in_dim, Rng& rng,
                                  double stddev, bool with_bias) {
  LinearMap m = zeros(out_dim, in_dim, with_bias);
  for (T& w : m.weight) w = static_cast<T>(stddev * rng.normal());
  for (T& b : m.bias) b = static_cast<T>(stddev * rng.normal());
  return m;
}

template <typename T>
void LinearMap<T>::apply(std::span<const T> x, std::span<T> out) const {
  for (std::size_t r = 0; r < out_dim; ++r) {
    T acc = dot<T>(weight_row(r), x);
    if (has_bias()) acc += bias[r];
    out[r] = acc;
  }
}

template <typename T>
FeatureMapParams<T> FeatureMapParams<T>::identity(std::size_t heads, std::size_t dim, bool shared) {
  FeatureMapParams p;
  p.shared = shared;
  p.heads.assign(shared ? 1 : heads, LinearMap<T>::identity(dim));
  return p;
}

template <typename T>
FeatureMapParams<T> FeatureMapParams<T>::random(std::size_t heads, std::size_t dim, Rng& rng,
                                                double stddev, bool with_bias) {
  FeatureMapParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.heads.push_back(LinearMap<T>::random(dim, dim, rng, stddev, with_bias));
  }
  return p;
}

std::string_view feature_kind_name(FeatureKind kind) {
  return kind == FeatureKind::kNormPreserved ? "np" : "hedgehog";
}

FeatureKind parse_feature_kind(std::string_view name) {
  if (name == "np") return FeatureKind::kNormPreserved;
  if (name == "hedgehog") return FeatureKind::kHedgehog;
  throw Error("unknown feature map '" + std::string(name) + "'");
}

namespace {

// phi = [softmax(u) ++ softmax(-u)]
template <typename T>
void dual_softmax(std::span<const T> u, std::span<T> phi) {
  const std::size_t d = u.size();
  std::span<T> pos = phi.subspan(0, d);
  std::span<T> neg = phi.subspan(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    pos[i] = u[i];
    neg[i] = -u[i];
  }
  softmax_inplace<T>(pos);
  softmax_inplace<T>(neg);
}

}  // namespace

template <typename T>
void hedgehog_map_row(const LinearMap<T>& f, std::span<const T> x, std::span<T> phi) {
  const std::size_t d = f.out_dim;
  std::vector<T> u(d);
  f.apply(x, u);
  dual_softmax<T>(u, phi);
}

template <typename T>
bool np_map_row(const LinearMap<T>& f, std::span<const T> x, std::span<T> phi,
                std::span<T> scratch) {
  const std::size_t d = f.out_dim;
  std::span<T> u = scratch.subspan(0, d);
  f.apply(x, u);
  const T fn = l2_norm<T>(u);
  const bool undefined = !(fn >= kNormFloor<T>);
  if (undefined) {
    std::fill(u.begin(), u.end(), T{0});
  } else {
    const T factor = l2_norm<T>(x) / fn;
    for (T& v : u) v *= factor;
  }
  dual_softmax<T>(u, phi);
  return undefined;
}

template <typename T>
bool feature_map_row(FeatureKind kind, const LinearMap<T>& f, std::span<const T> x,
                     std::span<T> phi, std::span<T> scratch) {
  if (kind == FeatureKind::kNormPreserved) return np_map_row<T>(f, x, phi, scratch);
  std::span<T> u = scratch.subspan(0, f.out_dim);
  f.apply(x, u);
  dual_softmax<T>(u, phi);
  return false;
}

namespace {

template <typename T>
void backward_row(bool norm_preserved, const LinearMap<T>& f, std::span<const T> x,
                  std::span<const T> upstream, std::span<T> grad_x, LinearMap<T>& grad_f) {
  const std::size_t d = f.out_dim;
  const std::size_t in = f.in_dim;
  std::vector<T> fx(d);
  f.apply(x, fx);
  std::fill(grad_x.begin(), grad_x.end(), T{0});
  T fn{1};
  T xn{1};
  T factor{1};
  if (norm_preserved) {
    fn = l2_norm<T>(fx);
    if (!(fn >= kNormFloor<T>)) return;
    xn = l2_norm<T>(x);
    factor = xn / fn;
  }
  std::vector<T> u(d);
  for (std::size_t i = 0; i < d; ++i) u[i] = fx[i] * factor;
  std::vector<T> phi(2 * d);
  dual_softmax<T>(u, phi);

  // Softmax Jacobian-vector products for the two halves.
  std::span<const T> p1(phi.data(), d);
  std::span<const T> p2(phi.data() + d, d);
  std::span<const T> g1 = upstream.subspan(0, d);
  std::span<const T> g2 = upstream.subspan(d, d);
  const T m1 = dot<T>(p1, g1);
  const T m2 = dot<T>(p2, g2);
  std::vector<T> gu(d);
  for (std::size_t i = 0; i < d; ++i) gu[i] = p1[i] * (g1[i] - m1) - p2[i] * (g2[i] - m2);

  std::vector<T> gf(gu);
  T radial{0};
  if (norm_preserved) {
    // u = f * (|x| / |f|): project out the radial component of f.
    radial = dot<T>(std::span<const T>(fx), std::span<const T>(gu));
    for (std::size_t i = 0; i < d; ++i) gf[i] = factor * (gu[i] - fx[i] * radial / (fn * fn));
  }

  for (std::size_t r = 0; r < d; ++r) {
    T* wrow = grad_f.weight.data() + r * in;
    for (std::size_t c = 0; c < in; ++c) wrow[c] += gf[r] * x[c];
    if (grad_f.has_bias()) grad_f.bias[r] += gf[r];
  }
  for (std::size_t r = 0; r < d; ++r) {
    const T* wrow = f.weight.data() + r * in;
    for (std::size_t c = 0; c < in; ++c) grad_x[c] += wrow[c] * gf[r];
  }
  if (norm_preserved && xn > T{0}) {
    const T norm_term = radial / fn / xn;
    for (std::size_t c = 0; c < in; ++c) grad_x[c] += norm_term * x[c];
  }
}

}  // namespace

template <typename T>
void np_map_backward_row(const LinearMap<T>& f, std::span<const T> x, std::span<const T> upstream,
                         std::span<T> grad_x, LinearMap<T>& grad_f) {
  backward_row<T>(true, f, x, upstream, grad_x, grad_f);
}

template <typename T>
void feature_map_backward_row(FeatureKind kind, const LinearMap<T>& f, std::span<const T> x,
                              std::span<const T> upstream, std::span<T> grad_x,
                              LinearMap<T>& grad_f) {
  backward_row<T>(kind == FeatureKind::kNormPreserved, f, x, upstream, grad_x, grad_f);
}

template <typename T>
Tensor<T> hedgehog_map(const Tensor<T>& x, const LinearMap<T>& f) {
  if (x.cols() != f.in_dim) throw Error("hedgehog_map: feature dimension mismatch");
  Shape shape = x.shape();
  shape.back() = 2 * f.out_dim;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < x.rows(); ++r) hedgehog_map_row<T>(f, x.row(r), out.row(r));
  return out;
}

template <typename T>
NpMapResult<T> np_map(const Tensor<T>& x, const LinearMap<T>& f) {
  if (x.cols() != f.in_dim || f.in_dim != f.out_dim) {
    throw Error("np_map: f must be d -> d with d matching the input");
  }
  Shape shape = x.shape();
  shape.back() = 2 * f.out_dim;
  NpMapResult<T> out{Tensor<T>(shape), std::vector<std::uint8_t>(x.rows(), 0)};
  std::vector<T> scratch(f.out_dim);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    out.direction_undefined[r] = np_map_row<T>(f, x.row(r), out.phi.row(r), scratch) ? 1 : 0;
  }
  return out;
}

template <typename T>
NpMapGrad<T> np_map_backward(const Tensor<T>& x, const LinearMap<T>& f, const Tensor<T>& upstream) {
  if (upstream.rows() != x.rows() || upstream.cols() != 2 * f.out_dim) {
    throw Error("np_map_backward: upstream must be [... x 2d] matching x");
  }
  NpMapGrad<T> out{Tensor<T>(x.shape()), LinearMap<T>::zeros(f.out_dim, f.in_dim, f.has_bias())};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    np_map_backward_row<T>(f, x.row(r), upstream.row(r), out.grad_x.row(r), out.grad_f);
  }
  return out;
}

template <typename T>
GateParams<T> GateParams<T>::zeros(std::size_t heads, std::size_t model_dim, std::size_t head_dim) {
  GateParams p;
  p.model_dim = model_dim;
  p.head_dim = head_dim;
  p.heads.assign(heads, LinearMap<T>::zeros(head_dim, model_dim));
  return p;
}

template <typename T>
GateParams<T> GateParams<T>::random(std::size_t heads, std::size_t model_dim, std::size_t head_dim,
                                    Rng& rng, double stddev) {
  GateParams p;
  p.model_dim = model_dim;
  p.head_dim = head_dim;
  for (std::size_t h = 0; h < heads; ++h) {
    p.heads.push_back(LinearMap<T>::random(head_dim, model_dim, rng, stddev));
  }
  return p;
}

template <typename T>
Tensor<T> gate_forward(std::span<const T> x_token, const GateParams<T>& params, std::size_t head) {
  if (x_token.size() != params.model_dim) throw Error("gate_forward: model dimension mismatch");
  Tensor<T> g({params.head_dim});
  params.heads.at(head).apply(x_token, g.data());
  for (T& v : g.data()) v = logistic(v);
  return g;
}

template <typename T>
Tensor<T> gate_forward(const Tensor<T>& hidden, const GateParams<T>& params) {
  if (hidden.rank() != 2 || hidden.dim(1) != params.model_dim) {
    throw Error("gate_forward: hidden states must be [N x model_dim]");
  }
  const std::size_t n = hidden.dim(0);
  const std::size_t d = params.head_dim;
  Tensor<T> g({params.heads.size(), n, d});
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    for (std::size_t t = 0; t < n; ++t) {
      std::span<T> out = g.data().subspan((h * n + t) * d, d);
      params.heads[h].apply(hidden.row(t), out);
      for (T& v : out) v = logistic(v);
    }
  }
  return g;
}

template <typename T>
Tensor<T> constant_gate(std::size_t heads, std::size_t tokens, std::size_t head_dim, T value) {
  return Tensor<T>({heads, tokens, head_dim}, value);
}

#define STILL_INSTANTIATE(T)                                                                      \
  template struct LinearMap<T>;                                                                   \
  template struct FeatureMapParams<T>;                                                            \
  template struct GateParams<T>;                                                                  \
  template void hedgehog_map_row<T>(const LinearMap<T>&, std::span<const T>, std::span<T>);       \
  template bool np_map_row<T>(const LinearMap<T>&, std::span<const T>, std::span<T>,              \
                              std::span<T>);                                                      \
  template bool feature_map_row<T>(FeatureKind, const LinearMap<T>&, std::span<const T>,          \
                                   std::span<T>, std::span<T>);                                   \
  template void np_map_backward_row<T>(const LinearMap<T>&, std::span<const T>,                   \
                                       std::span<const T>, std::span<T>, LinearMap<T>&);          \
  template void feature_map_backward_row<T>(FeatureKind, const LinearMap<T>&, std::span<const T>, \
                                            std::span<const T>, std::span<T>, LinearMap<T>&);     \
  template Tensor<T> hedgehog_map<T>(const Tensor<T>&, const LinearMap<T>&);                      \
  template NpMapResult<T> np_map<T>(const Tensor<T>&, const LinearMap<T>&);                       \
  template NpMapGrad<T> np_map_backward<T>(const Tensor<T>&, const LinearMap<T>&,                 \
                                           const Tensor<T>&);                                     \
  template Tensor<T> gate_forward<T>(std::span<const T>, const GateParams<T>&, std::size_t);      \
  template Tensor<T> gate_forward<T>(const Tensor<T>&, const GateParams<T>&);                     \
  template Tensor<T> constant_gate<T>(std::size_t, std::size_t, std::size_t, T);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

#undef STILL_INSTANTIATE

}  // namespace still

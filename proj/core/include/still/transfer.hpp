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
#include <span>
#include <vector>

#include "still/attention.hpp"
#include "still/attention_config.hpp"
#include "still/feature_map.hpp"
#include "still/rng.hpp"
#include "still/tensor.hpp"

namespace still {

/// Desk-scale attention-transfer task.
struct TransferTask {
  std::size_t model_dim = 64;
  std::size_t tokens = 128;
  std::size_t batch = 8;
  std::uint64_t seed = 7;
};

/// Desk-scale student configuration: H=2, d=16, C=32, lambda=4.
AttentionConfig default_transfer_config();

/// Frozen projections W_q, W_k, W_v (model_dim -> H*d each) whose causal
/// softmax attention is the distillation target.
template <typename T>
class TeacherLayer {
 public:
  TeacherLayer(std::size_t model_dim, std::size_t heads, std::size_t head_dim, LinearMap<T> w_q,
               LinearMap<T> w_k, LinearMap<T> w_v, bool scale = true);

  std::size_t model_dim() const noexcept { return model_dim_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t head_dim() const noexcept { return head_dim_; }
  const LinearMap<T>& w_q() const noexcept { return w_q_; }
  const LinearMap<T>& w_k() const noexcept { return w_k_; }
  const LinearMap<T>& w_v() const noexcept { return w_v_; }

  /// Projects hidden [N x model_dim] to q, k, v of shape [H x N x d].
  void project(const Tensor<T>& hidden, Tensor<T>& q, Tensor<T>& k, Tensor<T>& v) const;
  /// Teacher attention output [H x N x d].
  Tensor<T> attend(const Tensor<T>& hidden) const;

 private:
  std::size_t model_dim_;
  std::size_t heads_;
  std::size_t head_dim_;
  LinearMap<T> w_q_;
  LinearMap<T> w_k_;
  LinearMap<T> w_v_;
  bool scale_;
};

/// Deterministic from seed; weights drawn N(0, 1/model_dim), i.e. scale
/// 1/sqrt(model_dim).
template <typename T>
TeacherLayer<T> make_teacher(std::uint64_t seed, std::size_t model_dim, std::size_t heads,
                             std::size_t head_dim, bool scale = true);

/// Trainable parts of the student: feature-map projections and the gate.
template <typename T>
struct StudentParams {
  FeatureMapParams<T> f_q;
  FeatureMapParams<T> f_k;
  GateParams<T> gate;

  /// Identity feature projections and a zero gate (g = 0.5).
  static StudentParams initial(std::size_t heads, std::size_t head_dim, std::size_t model_dim);
  static StudentParams zeros_like(const StudentParams& other);

  /// Every trainable array, in a fixed order.
  std::vector<std::span<T>> tensors();
  std::vector<std::span<const T>> tensors() const;
  std::size_t parameter_count() const;
};

template <typename T>
struct TransferBatch {
  std::vector<Tensor<T>> hidden;  ///< each [N x model_dim]
};

/// Standard-normal hidden states.
template <typename T>
TransferBatch<T> make_batch(std::uint64_t seed, std::size_t batch, std::size_t tokens,
                            std::size_t model_dim);

/// Mean squared error between teacher outputs and student hybrid outputs,
/// averaged over batch, heads, tokens and dims.
template <typename T>
T transfer_loss(const TransferBatch<T>& batch, const TeacherLayer<T>& teacher,
                const StudentParams<T>& params, const AttentionConfig& config);

template <typename T>
struct LossAndGrad {
  T loss{};
  StudentParams<T> grad;
};

/// Loss and its analytic gradient. Routing masks come from the frozen q/k
/// and are constants of the loss.
template <typename T>
LossAndGrad<T> transfer_loss_and_grad(const TransferBatch<T>& batch, const TeacherLayer<T>& teacher,
                                      const StudentParams<T>& params, const AttentionConfig& config);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct TrainState {
  StudentParams<T> params;
  StudentParams<T> first_moment;
  StudentParams<T> second_moment;
  std::size_t step = 0;
  std::vector<double> loss_history;
  AdamConfig adam;

  static TrainState start(StudentParams<T> params);
};

/// One Adam step on the batch. Records the pre-update loss. Throws when a
/// gradient is not finite, leaving the state untouched.
template <typename T>
void train_step(TrainState<T>& state, const TransferBatch<T>& batch,
                const TeacherLayer<T>& teacher, const AttentionConfig& config,
                double learning_rate);

}  // namespace still

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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "still/attention.hpp"
#include "still/transfer.hpp"

namespace still {
namespace {

struct Fixture {
  AttentionConfig config;
  TeacherLayer<double> teacher;
  TransferBatch<double> batch;
};

Fixture small_fixture(std::size_t lambda, std::size_t tokens = 48) {
  AttentionConfig config;
  config.heads = 2;
  config.head_dim = 4;
  config.chunk_size = 8;
  config.lambda = lambda;
  auto teacher = make_teacher<double>(11, 12, 2, 4);
  auto batch = make_batch<double>(12, 2, tokens, 12);
  return {config, std::move(teacher), std::move(batch)};
}

StudentParams<double> perturbed(std::size_t heads, std::size_t d, std::size_t model_dim,
                                std::uint64_t seed) {
  auto p = StudentParams<double>::initial(heads, d, model_dim);
  Rng rng(seed);
  for (auto t : p.tensors())
    for (double& x : t) x += 0.3 * rng.normal();
  return p;
}

// Loss rebuilt from public pieces: teacher projection, gate, reference form.
double brute_loss(const Fixture& fx, const StudentParams<double>& p) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& hidden : fx.batch.hidden) {
    AttentionInputs<double> in;
    fx.teacher.project(hidden, in.q, in.k, in.v);
    in.g = gate_forward(hidden, p.gate);
    const auto y = reference_hybrid(in, fx.config, HybridParams<double>{p.f_q, p.f_k}).y;
    const auto target = oracle_full_softmax(in.q, in.k, in.v);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double e = y[i] - target[i];
      total += e * e;
    }
    count += y.size();
  }
  return total / static_cast<double>(count);
}

TEST(Teacher, DeterministicAndScaled) {
  const auto a = make_teacher<double>(3, 64, 2, 16);
  const auto b = make_teacher<double>(3, 64, 2, 16);
  EXPECT_EQ(a.w_q().weight, b.w_q().weight);
  EXPECT_EQ(a.w_v().weight, b.w_v().weight);
  EXPECT_NE(a.w_q().weight, make_teacher<double>(4, 64, 2, 16).w_q().weight);
  double sq = 0;
  for (double w : a.w_k().weight) sq += w * w;
  // N(0, 1/64) entries: mean square 1/64.
  EXPECT_NEAR(sq / static_cast<double>(a.w_k().weight.size()), 1.0 / 64.0, 0.15 / 64.0);
}

TEST(Teacher, AttendIsSoftmaxOfProjections) {
  const auto fx = small_fixture(2);
  Tensor<double> q, k, v;
  fx.teacher.project(fx.batch.hidden[0], q, k, v);
  EXPECT_EQ(q.shape(), (Shape{2, 48, 4}));
  const auto y = fx.teacher.attend(fx.batch.hidden[0]);
  EXPECT_EQ(y.vector(), oracle_full_softmax(q, k, v).vector());
}

TEST(StudentParams, InitialIsIdentityAndZeroGate) {
  const auto p = StudentParams<double>::initial(2, 4, 12);
  EXPECT_EQ(p.f_q.head(1).weight, LinearMap<double>::identity(4).weight);
  EXPECT_FALSE(p.f_k.head(0).has_bias());
  for (const auto& m : p.gate.heads)
    for (double w : m.weight) EXPECT_EQ(w, 0.0);
  EXPECT_EQ(p.parameter_count(), 2u * (16 + 16 + 48));
}

TEST(TransferLoss, MatchesIndependentRecomputation) {
  for (std::size_t lambda : {0u, 3u, 8u}) {
    const auto fx = small_fixture(lambda);
    const auto p = perturbed(2, 4, 12, 20 + lambda);
    const double loss = transfer_loss(fx.batch, fx.teacher, p, fx.config);
    EXPECT_GE(loss, 0.0);
    EXPECT_NEAR(loss, brute_loss(fx, p), 1e-13) << lambda;
    EXPECT_NEAR(transfer_loss_and_grad(fx.batch, fx.teacher, p, fx.config).loss, loss, 1e-15);
  }
}

TEST(TransferLoss, FullSelectionIsExact) {
  const auto fx = small_fixture(8);
  EXPECT_LE(transfer_loss(fx.batch, fx.teacher, perturbed(2, 4, 12, 30), fx.config), 1e-16);
}

TEST(TransferGrad, MatchesCentralDifferences) {
  for (std::size_t lambda : {0u, 2u, 5u}) {
    const auto fx = small_fixture(lambda, 37);
    auto p = perturbed(2, 4, 12, 40 + lambda);
    const auto analytic = transfer_loss_and_grad(fx.batch, fx.teacher, p, fx.config).grad;
    auto grads = analytic.tensors();
    auto params = p.tensors();
    double num2 = 0, diff2 = 0;
    const double h = 1e-6;
    for (std::size_t ti = 0; ti < params.size(); ++ti) {
      for (std::size_t i = 0; i < params[ti].size(); ++i) {
        const double keep = params[ti][i];
        params[ti][i] = keep + h;
        const double up = transfer_loss(fx.batch, fx.teacher, p, fx.config);
        params[ti][i] = keep - h;
        const double down = transfer_loss(fx.batch, fx.teacher, p, fx.config);
        params[ti][i] = keep;
        const double fd = (up - down) / (2 * h);
        num2 += fd * fd;
        diff2 += (fd - grads[ti][i]) * (fd - grads[ti][i]);
      }
    }
    ASSERT_GT(num2, 0.0);
    EXPECT_LE(std::sqrt(diff2 / num2), 1e-4) << lambda;
  }
}

TEST(TrainStep, ZeroLearningRateKeepsParameters) {
  const auto fx = small_fixture(2);
  auto state = TrainState<double>::start(perturbed(2, 4, 12, 50));
  const auto before = state.params;
  train_step(state, fx.batch, fx.teacher, fx.config, 0.0);
  const auto a = before.tensors();
  const auto b = state.params.tensors();
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i) EXPECT_EQ(a[t][i], b[t][i]);
  EXPECT_EQ(state.step, 1u);
  ASSERT_EQ(state.loss_history.size(), 1u);
  EXPECT_EQ(state.loss_history[0], transfer_loss(fx.batch, fx.teacher, before, fx.config));
}

TEST(TrainStep, NonFiniteGradientThrowsAndLeavesState) {
  const auto fx = small_fixture(2);
  auto p = perturbed(2, 4, 12, 51);
  p.gate.heads[0].weight[0] = std::numeric_limits<double>::quiet_NaN();
  auto state = TrainState<double>::start(p);
  EXPECT_THROW(train_step(state, fx.batch, fx.teacher, fx.config, 1e-2), Error);
  EXPECT_EQ(state.step, 0u);
  EXPECT_TRUE(state.loss_history.empty());
}

TEST(TrainStep, ReproducibleAndDescending) {
  const auto fx = small_fixture(2);
  auto run = [&] {
    auto state = TrainState<double>::start(StudentParams<double>::initial(2, 4, 12));
    for (int i = 0; i < 15; ++i) train_step(state, fx.batch, fx.teacher, fx.config, 3e-2);
    return state;
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.loss_history, b.loss_history);
  const auto pa = a.params.tensors();
  const auto pb = b.params.tensors();
  for (std::size_t t = 0; t < pa.size(); ++t)
    for (std::size_t i = 0; i < pa[t].size(); ++i) EXPECT_EQ(pa[t][i], pb[t][i]);
  EXPECT_LT(transfer_loss(fx.batch, fx.teacher, a.params, fx.config), a.loss_history.front());
}

}  // namespace
}  // namespace still

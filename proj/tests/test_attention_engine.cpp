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
#include <filesystem>

#include "still/attention.hpp"
#include "still/attention_config.hpp"
#include "still/decoder.hpp"
#include "still/prefill.hpp"
#include "support/oracles.hpp"

namespace still {
namespace {

using testing::max_abs_diff;

AttentionConfig make_config(std::size_t heads, std::size_t d, std::size_t c, std::size_t lambda,
                            std::optional<std::size_t> cap = std::nullopt) {
  AttentionConfig config;
  config.heads = heads;
  config.head_dim = d;
  config.chunk_size = c;
  config.lambda = lambda;
  config.cache_cap = cap;
  return config;
}

HybridParams<double> random_params(std::size_t heads, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return HybridParams<double>::random(heads, d, rng, 0.5);
}

TEST(OracleFullSoftmax, SingleTokenAndEqualLogits) {
  Rng rng(51);
  const TensorD v = rng.normal_tensor<double>({5, 3});
  const TensorD y1 = oracle_full_softmax(TensorD({1, 3}, 1.0), TensorD({1, 3}, 2.0),
                                         TensorD({1, 3}, std::vector<double>{v[0], v[1], v[2]}));
  for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(y1[a], v[a]);
  const TensorD y = oracle_full_softmax(TensorD({5, 3}), rng.normal_tensor<double>({5, 3}), v);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t a = 0; a < 3; ++a) {
      double mean = 0;
      for (std::size_t j = 0; j <= t; ++j) mean += v.at(j, a);
      EXPECT_NEAR(y.at(t, a), mean / static_cast<double>(t + 1), 1e-15);
    }
}

TEST(OracleFullSoftmax, MatchesArbitraryPrecision) {
  Rng rng(52);
  const std::size_t n = 40, d = 8;
  const TensorD q = rng.normal_tensor<double>({n, d}, 2.0);
  const TensorD k = rng.normal_tensor<double>({n, d}, 2.0);
  const TensorD v = rng.normal_tensor<double>({n, d});
  const TensorD y = oracle_full_softmax(q, k, v);
  const auto big = testing::big_causal_attention(q.vector(), k.vector(), v.vector(), n, d,
                                                 1.0 / std::sqrt(8.0));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], big[i], 1e-10);
}

TEST(OracleSwa, EndpointsAndMaskedOracle) {
  Rng rng(53);
  const std::size_t n = 30, d = 4;
  const TensorD q = rng.normal_tensor<double>({n, d});
  const TensorD k = rng.normal_tensor<double>({n, d});
  const TensorD v = rng.normal_tensor<double>({n, d});
  EXPECT_LE(max_abs_diff(oracle_swa(q, k, v, n), oracle_full_softmax(q, k, v)), 1e-15);
  EXPECT_EQ(oracle_swa(q, k, v, 1).vector(), v.vector());
  const std::size_t w = 6;
  const TensorD y = oracle_swa(q, k, v, w);
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> keep(n, 0);
    double z = 0;
    std::vector<double> acc(d, 0);
    for (std::size_t j = 0; j <= t; ++j) {
      if (j + w <= t) continue;
      const double e = std::exp(dot<double>(q.row(t), k.row(j)) / 2.0);
      z += e;
      for (std::size_t a = 0; a < d; ++a) acc[a] += e * v.at(j, a);
    }
    for (std::size_t a = 0; a < d; ++a) EXPECT_NEAR(y.at(t, a), acc[a] / z, 1e-13);
  }
}

TEST(OracleLinearAttention, FirstTokenAndFormsAgree) {
  Rng rng(54);
  const std::size_t n = 50, d = 4;
  TensorD pq({n, 2 * d}), pk({n, 2 * d});
  for (double& x : pq.data()) x = rng.uniform();
  for (double& x : pk.data()) x = rng.uniform();
  const TensorD v = rng.normal_tensor<double>({n, d});
  const auto rec = oracle_linear_attention(pq, pk, v, LinearForm::kRecurrent);
  const auto cum = oracle_linear_attention(pq, pk, v, LinearForm::kCumulative);
  for (std::size_t a = 0; a < d; ++a) EXPECT_NEAR(rec.y.at(0, a), v.at(0, a), 1e-15);
  EXPECT_LE(max_abs_diff(rec.y, cum.y), 1e-10);
}

TEST(OracleLinearAttention, OneHotFeaturesReproduceHardSelection) {
  // phi(k_i) = e_i and phi(q_t) = e_{sel(t)} with sel(t) <= t: y_t = v_sel(t).
  const std::size_t n = 6;
  TensorD pk({n, n}), pq({n, n});
  const std::size_t sel[n] = {0, 0, 2, 1, 3, 5};
  for (std::size_t i = 0; i < n; ++i) {
    pk.at(i, i) = 1.0;
    pq.at(i, sel[i]) = 1.0;
  }
  Rng rng(55);
  const TensorD v = rng.normal_tensor<double>({n, 3});
  const auto r = oracle_linear_attention(pq, pk, v);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(r.y.at(t, a), v.at(sel[t], a));
}

TEST(OracleLinearAttention, ZeroDenominatorIsFloored) {
  TensorD pq({2, 2}), pk({2, 2});
  pq.at(0, 0) = 1.0;
  pk.at(0, 1) = 1.0;  // orthogonal: phi(q).z = 0
  pq.at(1, 1) = 1.0;
  pk.at(1, 1) = 1.0;
  const auto r = oracle_linear_attention(pq, pk, TensorD({2, 1}, 1.0));
  EXPECT_EQ(r.floored[0], 1);
  EXPECT_EQ(r.floored[1], 0);
  EXPECT_TRUE(r.y.all_finite());
}

TEST(ReferenceHybrid, ShortSequencesAreFullSoftmax) {
  const auto config = make_config(2, 8, 16, 3);
  for (std::size_t n : {1u, 7u, 16u, 32u}) {
    const auto in = random_inputs<double>(2, n, 8, 56 + n);
    const auto out = reference_hybrid(in, config, random_params(2, 8, 1));
    EXPECT_LE(max_abs_diff(out.y, oracle_full_softmax(in.q, in.k, in.v)), 1e-12) << n;
  }
}

TEST(ReferenceHybrid, FullSelectionRecoversSoftmax) {
  const auto config = make_config(2, 8, 16, 16);
  const auto in = random_inputs<double>(2, 200, 8, 57);
  const auto out = reference_hybrid(in, config, random_params(2, 8, 2));
  EXPECT_LE(max_abs_diff(out.y, oracle_full_softmax(in.q, in.k, in.v)), 1e-10);
}

// lambda = 0: softmax over the previous chunk and the current prefix, plus
// pure linear attention over every older token, under one denominator.
TEST(ReferenceHybrid, NoSelectionIsWindowPlusLinearComposition) {
  const std::size_t h_count = 2, n = 90, d = 4, c = 10;
  const auto config = make_config(h_count, d, c, 0);
  const auto in = random_inputs<double>(h_count, n, d, 58);
  const auto params = random_params(h_count, d, 3);
  const auto out = reference_hybrid(in, config, params, true);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> phi_q(2 * d), phi_k(2 * d), scratch(d);
  for (std::size_t h = 0; h < h_count; ++h) {
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t chunk = t / c;
      const std::size_t first = chunk == 0 ? 0 : (chunk - 1) * c;
      np_map_row<double>(params.f_q.head(h), in.q.slab(h).subspan(t * d, d), phi_q, scratch);
      std::vector<double> num(d, 0.0);
      double den = 0.0;
      // Values are O(1) so exponentials need no offset here.
      for (std::size_t j = first; j <= t; ++j) {
        const double e = std::exp(dot<double>(in.q.slab(h).subspan(t * d, d), in.k.slab(h).subspan(j * d, d)) * s);
        den += e;
        for (std::size_t a = 0; a < d; ++a) num[a] += e * in.v.at(h, j, a);
      }
      for (std::size_t j = 0; j < first; ++j) {
        np_map_row<double>(params.f_k.head(h), in.k.slab(h).subspan(j * d, d), phi_k, scratch);
        const double kern = dot<double>(phi_q, phi_k);
        den += kern;
        for (std::size_t a = 0; a < d; ++a) num[a] += kern * in.v.at(h, j, a) * in.g.at(h, t, a);
      }
      for (std::size_t a = 0; a < d; ++a) EXPECT_NEAR(out.y.at(h, t, a), num[a] / den, 1e-12);
      const auto& diag = out.diagnostics[h * n + t];
      EXPECT_EQ(diag.cache_keys, 0u);
      EXPECT_EQ(diag.window_keys + diag.la_tokens, t + 1);
    }
  }
}

class CrossForm : public ::testing::TestWithParam<std::tuple<std::size_t, std::size_t, bool>> {};

TEST_P(CrossForm, DecodeIsBitwiseReferenceAndPrefillAgrees) {
  const auto [lambda, n, capped] = GetParam();
  const std::size_t d = 8, c = 16, heads = 2;
  const auto config = make_config(heads, d, c, lambda, capped ? std::optional<std::size_t>(40) : std::nullopt);
  const auto in = random_inputs<double>(heads, n, d, 60 + lambda + n);
  const auto params = random_params(heads, d, 4 + lambda);
  const auto ref = reference_hybrid(in, config, params);
  const auto dec = decode_sequence(in, config, params);
  const auto pre = prefill_chunk_parallel(in, config, params);
  EXPECT_EQ(ref.y.vector(), dec.y.vector());
  EXPECT_LE(max_abs_diff(ref.y, pre.y), 1e-10);

  const auto in32 = in.cast<float>();
  const auto p32 = params.cast<float>();
  const auto ref32 = reference_hybrid(in32, config, p32);
  const auto dec32 = decode_sequence(in32, config, p32);
  const auto pre32 = prefill_chunk_parallel(in32, config, p32);
  EXPECT_EQ(ref32.y.vector(), dec32.y.vector());
  EXPECT_LE(max_abs_diff(ref32.y, pre32.y), 1e-4);
  EXPECT_LE(max_abs_diff(ref32.y.cast<double>(), ref.y), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Grid, CrossForm,
                         ::testing::Combine(::testing::Values(0u, 4u, 8u, 16u),
                                            ::testing::Values(128u, 131u),
                                            ::testing::Bool()));

TEST(Prefill, PaperSizedInstances) {
  for (std::size_t lambda : {0u, 16u, 64u}) {
    const auto config = make_config(1, 16, 64, lambda);
    const auto in = random_inputs<double>(1, 512, 16, 70 + lambda);
    const auto params = random_params(1, 16, 5);
    const auto ref = reference_hybrid(in, config, params);
    EXPECT_LE(max_abs_diff(ref.y, prefill_chunk_parallel(in, config, params).y), 1e-10);
    if (lambda == 64) {
      EXPECT_LE(max_abs_diff(ref.y, oracle_full_softmax(in.q, in.k, in.v)), 1e-10);
    }
  }
}

TEST(Prefill, SingleChunkIsFullSoftmax) {
  const auto config = make_config(3, 4, 32, 5);
  const auto in = random_inputs<double>(3, 32, 4, 71);
  const auto out = prefill_chunk_parallel(in, config, random_params(3, 4, 6));
  EXPECT_LE(max_abs_diff(out.y, oracle_full_softmax(in.q, in.k, in.v)), 1e-12);
}

TEST(Causality, FutureTokensNeverChangePastOutputs) {
  const auto config = make_config(1, 4, 8, 2, 20);
  const auto params = random_params(1, 4, 7);
  const std::size_t n = 64;
  const auto base = random_inputs<double>(1, n, 4, 72);
  const auto y0 = prefill_chunk_parallel(base, config, params).y;
  const auto y0d = decode_sequence(base, config, params).y;
  Rng rng(73);
  for (std::size_t j : {5u, 17u, 40u, 63u}) {
    auto in = base;
    for (std::size_t a = 0; a < 4; ++a) {
      in.q.at(0, j, a) += rng.normal();
      in.k.at(0, j, a) += rng.normal();
      in.v.at(0, j, a) += rng.normal();
    }
    const auto y1 = prefill_chunk_parallel(in, config, params).y;
    const auto y2 = decode_sequence(in, config, params).y;
    for (std::size_t t = 0; t < j; ++t)
      for (std::size_t a = 0; a < 4; ++a) {
        EXPECT_EQ(y1.at(0, t, a), y0.at(0, t, a));
        EXPECT_EQ(y2.at(0, t, a), y0d.at(0, t, a));
      }
  }
}

TEST(Diagnostics, DenominatorPositiveAndBranchCounts) {
  const auto config = make_config(2, 8, 16, 4);
  const std::size_t n = 150;
  const auto in = random_inputs<double>(2, n, 8, 74);
  const auto out = decode_sequence(in, config, random_params(2, 8, 8), true);
  ASSERT_EQ(out.diagnostics.size(), 2 * n);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t t = 0; t < n; ++t) {
      const auto& dg = out.diagnostics[h * n + t];
      EXPECT_GT(dg.d_sa + dg.d_la, 0.0);
      EXPECT_FALSE(dg.floor_hit);
      EXPECT_EQ(dg.window_keys + dg.cache_keys + dg.la_tokens, t + 1);
    }
}

TEST(Decoder, RejectsOutOfOrderTokens) {
  const auto config = make_config(1, 2, 4, 1);
  HybridDecoder<double> dec(config, HybridParams<double>::identity(1, 2));
  std::vector<double> x{0.1, 0.2}, y(2);
  dec.step(0, x, x, x, x, y);
  EXPECT_THROW(dec.step(2, x, x, x, x, y), Error);
  EXPECT_THROW(dec.step(0, x, x, x, x, y), Error);
}

TEST(Decoder, SnapshotRestoreContinuesIdentically) {
  const auto config = make_config(2, 4, 8, 3, 30);
  const auto params = random_params(2, 4, 9);
  const std::size_t n = 100, cut = 53;
  const auto in = random_inputs<double>(2, n, 4, 75);
  const auto full = decode_sequence(in, config, params);

  auto token = [&](const TensorD& t, std::size_t pos) {
    std::vector<double> out(8);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t a = 0; a < 4; ++a) out[h * 4 + a] = t.at(h, pos, a);
    return out;
  };
  HybridDecoder<double> first(config, params);
  std::vector<double> y(8);
  for (std::size_t t = 0; t < cut; ++t)
    first.step(t, token(in.q, t), token(in.k, t), token(in.v, t), token(in.g, t), y);
  const auto dir = std::filesystem::temp_directory_path() / "still_snapshot_test";
  std::filesystem::remove_all(dir);
  first.save_snapshot(dir);

  HybridDecoder<double> second(config, params);
  second.restore_snapshot(dir);
  EXPECT_EQ(second.position(), cut);
  EXPECT_EQ(second.retained_state_size(), first.retained_state_size());
  for (std::size_t t = cut; t < n; ++t) {
    second.step(t, token(in.q, t), token(in.k, t), token(in.v, t), token(in.g, t), y);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t a = 0; a < 4; ++a) EXPECT_EQ(y[h * 4 + a], full.y.at(h, t, a));
  }
  std::filesystem::remove_all(dir);
}

TEST(Decoder, StateSizeConstantAfterFill) {
  const auto config = make_config(1, 4, 8, 4, 24);  // 8 salient slots
  HybridDecoder<double> dec(config, HybridParams<double>::identity(1, 4));
  const auto in = random_inputs<double>(1, 200, 4, 76);
  std::vector<double> y(4);
  std::size_t steady = 0;
  for (std::size_t t = 0; t < 200; ++t) {
    dec.step(t, in.q.slab(0).subspan(t * 4, 4), in.k.slab(0).subspan(t * 4, 4),
             in.v.slab(0).subspan(t * 4, 4), in.g.slab(0).subspan(t * 4, 4), y);
    if (t == 60) steady = dec.retained_state_size();
    if (t > 60) {
      EXPECT_EQ(dec.retained_state_size(), steady);
    }
  }
}

TEST(OutputErrorCurve, EndpointsOrdered) {
  const auto config = make_config(2, 8, 16, 4);
  const auto in = random_inputs<double>(2, 160, 8, 77);
  const std::vector<std::size_t> grid{0, 4, 8, 16};
  const auto curve = output_error_curve(in, config, random_params(2, 8, 10), grid);
  ASSERT_EQ(curve.size(), 4u);
  EXPECT_LE(curve.back().second, 1e-8);
  EXPECT_GE(curve.front().second, curve.back().second);
}

TEST(AttentionConfig, JsonRoundTripAndValidation) {
  auto c = AttentionConfig::from_json(
      R"({"heads":4,"head_dim":32,"chunk_size":64,"lambda":8,"epsilon":1e-6,"cache_cap":null,"scale":true,"seed":3,"precision":"f32"})");
  EXPECT_EQ(c.heads, 4u);
  EXPECT_FALSE(c.cache_cap.has_value());
  EXPECT_EQ(c.precision, DType::kF32);
  const auto back = AttentionConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  c.cache_cap = 1024;
  EXPECT_EQ(AttentionConfig::from_json(c.to_json()).cache_cap, std::optional<std::size_t>(1024));
  EXPECT_EQ(c.salient_capacity(), std::optional<std::size_t>(1024 - 128));
  EXPECT_THROW(AttentionConfig::from_json(R"({"lambda": 70, "chunk_size": 64})"), Error);
  EXPECT_THROW(AttentionConfig::from_json(R"({"chunk_size": 0})"), Error);
  EXPECT_THROW(AttentionConfig::from_json(R"({"epsilon": 0})"), Error);
  EXPECT_THROW(AttentionConfig::from_json(R"({"window": 3})"), Error);
  EXPECT_THROW(AttentionConfig::from_json("[1,2]"), Error);
}

}  // namespace
}  // namespace still

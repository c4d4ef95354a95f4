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

#include <cstdint>
#include <random>

#include "still/tensor.hpp"

namespace still {

/// Deterministic generator: std::mt19937_64 (its output sequence is fixed by
/// the C++ standard), 53-bit uniforms, and Box-Muller normals. Floating-point
/// draws are produced in double and narrowed, so a seed yields the same
/// stream regardless of the requested precision.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void fill_normal(Tensor<T>& t, double stddev = 1.0) {
    for (T& v : t.data()) v = static_cast<T>(stddev * normal());
  }

  template <typename T>
  Tensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    fill_normal(t, stddev);
    return t;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace still

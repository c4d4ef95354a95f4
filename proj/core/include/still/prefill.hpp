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

#include "still/attention.hpp"

namespace still {

/// Chunk-wise parallel form. Per head and per chunk of C queries:
///  1. in-chunk logits Q K^T and previous-chunk logits Q K_prev^T;
///  2. saliency from the two masked softmaxes over the trailing C keys;
///  3. top-lambda selection of chunk c-2, whose linear tokens are summed
///     into the running state (the prefix sum over chunk sums);
///  4. softmax over [salient keys of chunks <= c-2, previous chunk,
///     causal current chunk] joined with the linear terms under one
///     normalizer.
/// Working memory is O(C^2 + cache) per head beyond inputs and outputs.
/// A trailing partial chunk is padded and the padding is excluded everywhere.
template <typename T>
HybridOutput<T> prefill_chunk_parallel(const AttentionInputs<T>& inputs,
                                       const AttentionConfig& config,
                                       const HybridParams<T>& params, bool diagnostics = false);

}  // namespace still

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

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "still/tensor.hpp"

namespace still {

// On-disk tensor format: a raw little-endian IEEE-754 buffer (foo.bin) next
// to a JSON sidecar (foo.json) holding {"dtype": "f32"|"f64", "shape": [...]}.

struct TensorHeader {
  DType dtype = DType::kF64;
  Shape shape;
};

std::filesystem::path sidecar_path(const std::filesystem::path& bin_path);

TensorHeader read_tensor_header(const std::filesystem::path& bin_path);

template <typename T>
void save_tensor(const std::filesystem::path& bin_path, const Tensor<T>& tensor);

/// Loads a tensor, converting from the stored dtype to T when they differ.
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& bin_path);

/// A tensor with the name/role/head metadata recorded in a bundle manifest.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  std::optional<std::size_t> head;
  std::string role;
};

// A bundle is a directory holding one .bin/.json pair per tensor plus
// manifest.json: {"tensors": [{"name", "file", "dtype", "shape", "head"?,
// "role"?}], "meta": {...}}. The meta object is passed through as JSON text.

template <typename T>
void write_bundle(const std::filesystem::path& dir, const std::vector<NamedTensor<T>>& tensors,
                  const std::string& meta_json = "{}");

template <typename T>
std::vector<NamedTensor<T>> read_bundle(const std::filesystem::path& dir,
                                        std::string* meta_json = nullptr);

template <typename T>
const Tensor<T>& find_tensor(const std::vector<NamedTensor<T>>& bundle, const std::string& name);

}  // namespace still

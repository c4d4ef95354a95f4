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

#include "still/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace still {
namespace {

using nlohmann::json;

template <typename U>
U byteswap_value(U v) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(bytes[i], bytes[sizeof(U) - 1 - i]);
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

template <typename U>
std::vector<U> read_raw(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open tensor file " + path.string());
  std::vector<U> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(U)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(U)) {
    throw Error("tensor file " + path.string() + " is shorter than its sidecar shape");
  }
  in.peek();
  if (!in.eof()) throw Error("tensor file " + path.string() + " is longer than its sidecar shape");
  if constexpr (std::endian::native == std::endian::big) {
    for (U& v : values) v = byteswap_value(v);
  }
  return values;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text << "\n";
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& bin_path) {
  auto p = bin_path;
  p.replace_extension(".json");
  return p;
}

TensorHeader read_tensor_header(const std::filesystem::path& bin_path) {
  const json j = read_json(sidecar_path(bin_path));
  TensorHeader h;
  try {
    h.dtype = parse_dtype(j.at("dtype").get<std::string>());
    h.shape = j.at("shape").get<Shape>();
  } catch (const json::exception& e) {
    throw Error("bad tensor sidecar for " + bin_path.string() + ": " + e.what());
  }
  return h;
}

template <typename T>
void save_tensor(const std::filesystem::path& bin_path, const Tensor<T>& tensor) {
  if (bin_path.has_parent_path()) std::filesystem::create_directories(bin_path.parent_path());
  {
    std::ofstream out(bin_path, std::ios::binary);
    if (!out) throw Error("cannot write " + bin_path.string());
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(tensor.data().data()),
                static_cast<std::streamsize>(tensor.size() * sizeof(T)));
    } else {
      for (T v : tensor.data()) {
        const T swapped = byteswap_value(v);
        out.write(reinterpret_cast<const char*>(&swapped), sizeof(T));
      }
    }
  }
  json side = {{"dtype", std::string(dtype_name(Tensor<T>::dtype()))}, {"shape", tensor.shape()}};
  write_text(sidecar_path(bin_path), side.dump());
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& bin_path) {
  const TensorHeader h = read_tensor_header(bin_path);
  const std::size_t count = shape_size(h.shape);
  if (h.dtype == DType::kF32) {
    auto raw = read_raw<float>(bin_path, count);
    if constexpr (std::is_same_v<T, float>) return Tensor<T>(h.shape, std::move(raw));
    return Tensor<float>(h.shape, std::move(raw)).template cast<T>();
  }
  auto raw = read_raw<double>(bin_path, count);
  if constexpr (std::is_same_v<T, double>) return Tensor<T>(h.shape, std::move(raw));
  return Tensor<double>(h.shape, std::move(raw)).template cast<T>();
}

template <typename T>
void write_bundle(const std::filesystem::path& dir, const std::vector<NamedTensor<T>>& tensors,
                  const std::string& meta_json) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["tensors"] = json::array();
  for (const auto& nt : tensors) {
    const std::string file = nt.name + ".bin";
    save_tensor(dir / file, nt.tensor);
    json entry = {{"name", nt.name},
                  {"file", file},
                  {"dtype", std::string(dtype_name(Tensor<T>::dtype()))},
                  {"shape", nt.tensor.shape()}};
    if (nt.head) entry["head"] = *nt.head;
    if (!nt.role.empty()) entry["role"] = nt.role;
    manifest["tensors"].push_back(std::move(entry));
  }
  try {
    manifest["meta"] = json::parse(meta_json);
  } catch (const json::exception& e) {
    throw Error(std::string("bundle meta is not valid JSON: ") + e.what());
  }
  write_text(dir / "manifest.json", manifest.dump(2));
}

template <typename T>
std::vector<NamedTensor<T>> read_bundle(const std::filesystem::path& dir, std::string* meta_json) {
  const json manifest = read_json(dir / "manifest.json");
  std::vector<NamedTensor<T>> out;
  try {
    for (const auto& entry : manifest.at("tensors")) {
      NamedTensor<T> nt;
      nt.name = entry.at("name").get<std::string>();
      nt.tensor = load_tensor<T>(dir / entry.at("file").get<std::string>());
      if (entry.contains("head")) nt.head = entry.at("head").get<std::size_t>();
      if (entry.contains("role")) nt.role = entry.at("role").get<std::string>();
      out.push_back(std::move(nt));
    }
    if (meta_json) *meta_json = manifest.contains("meta") ? manifest.at("meta").dump() : "{}";
  } catch (const json::exception& e) {
    throw Error("bad bundle manifest in " + dir.string() + ": " + e.what());
  }
  return out;
}

template <typename T>
const Tensor<T>& find_tensor(const std::vector<NamedTensor<T>>& bundle, const std::string& name) {
  for (const auto& nt : bundle) {
    if (nt.name == name) return nt.tensor;
  }
  throw Error("bundle has no tensor named '" + name + "'");
}

#define STILL_INSTANTIATE(T)                                                                \
  template void save_tensor<T>(const std::filesystem::path&, const Tensor<T>&);             \
  template Tensor<T> load_tensor<T>(const std::filesystem::path&);                          \
  template void write_bundle<T>(const std::filesystem::path&,                               \
                                const std::vector<NamedTensor<T>>&, const std::string&);    \
  template std::vector<NamedTensor<T>> read_bundle<T>(const std::filesystem::path&,         \
                                                      std::string*);                        \
  template const Tensor<T>& find_tensor<T>(const std::vector<NamedTensor<T>>&,              \
                                           const std::string&);

STILL_INSTANTIATE(float)
STILL_INSTANTIATE(double)

#undef STILL_INSTANTIATE

}  // namespace still

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

#include "still/attention_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace still {

std::string_view budget_mode_name(BudgetMode mode) {
  return mode == BudgetMode::kJoint ? "joint" : "cache_only";
}

BudgetMode parse_budget_mode(std::string_view name) {
  if (name == "joint") return BudgetMode::kJoint;
  if (name == "cache_only") return BudgetMode::kCacheOnly;
  throw Error("unknown budget_mode '" + std::string(name) + "'");
}

void AttentionConfig::validate() const {
  if (heads == 0) throw Error("config: heads must be at least 1");
  if (head_dim == 0) throw Error("config: head_dim must be at least 1");
  if (chunk_size == 0) throw Error("config: chunk_size must be at least 1");
  if (lambda > chunk_size) throw Error("config: lambda must not exceed chunk_size");
  if (!(epsilon > 0.0)) throw Error("config: epsilon must be positive");
}

std::optional<std::size_t> AttentionConfig::salient_capacity() const {
  if (!cache_cap) return std::nullopt;
  if (budget_mode == BudgetMode::kCacheOnly) return *cache_cap;
  const std::size_t window = window_capacity();
  return *cache_cap > window ? *cache_cap - window : 0;
}

std::string AttentionConfig::to_json() const {
  nlohmann::json j = {
      {"heads", heads},
      {"head_dim", head_dim},
      {"chunk_size", chunk_size},
      {"lambda", lambda},
      {"epsilon", epsilon},
      {"cache_cap", nullptr},
      {"budget_mode", std::string(budget_mode_name(budget_mode))},
      {"scale", scale},
      {"seed", seed},
      {"precision", std::string(dtype_name(precision))},
      {"feature_map", std::string(feature_kind_name(feature_map))},
  };
  if (cache_cap) j["cache_cap"] = *cache_cap;
  return j.dump();
}

AttentionConfig AttentionConfig::from_json(std::string_view text) {
  static const std::set<std::string> kKnown = {"heads",     "head_dim",    "chunk_size",
                                               "lambda",    "epsilon",     "cache_cap",
                                               "scale",     "seed",        "precision",
                                               "budget_mode", "feature_map"};
  AttentionConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (!kKnown.count(key)) throw Error("config: unknown key '" + key + "'");
    }
    if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
    if (j.contains("head_dim")) c.head_dim = j.at("head_dim").get<std::size_t>();
    if (j.contains("chunk_size")) c.chunk_size = j.at("chunk_size").get<std::size_t>();
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<std::size_t>();
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
    if (j.contains("cache_cap") && !j.at("cache_cap").is_null()) {
      c.cache_cap = j.at("cache_cap").get<std::size_t>();
    }
    if (j.contains("scale")) c.scale = j.at("scale").get<bool>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("precision")) c.precision = parse_dtype(j.at("precision").get<std::string>());
    if (j.contains("budget_mode")) {
      c.budget_mode = parse_budget_mode(j.at("budget_mode").get<std::string>());
    }
    if (j.contains("feature_map")) {
      c.feature_map = parse_feature_kind(j.at("feature_map").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

AttentionConfig AttentionConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_json(buffer.str());
}

}  // namespace still

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

#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <sstream>

#include "still/attention.hpp"
#include "still/attention_config.hpp"
#include "still/decoder.hpp"
#include "still/harness.hpp"
#include "still/prefill.hpp"
#include "still/saliency.hpp"
#include "still/tensor_io.hpp"
#include "still/transfer.hpp"

namespace still::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad arguments discovered after parsing (exit code 2).
struct UsageError : Error {
  using Error::Error;
};


AttentionConfig load_config(const std::string& path, const AttentionConfig& fallback = {}) {
  if (path.empty()) return fallback;
  try {
    return AttentionConfig::load(path);
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (!(d <= m)) m = d;  // propagates NaN
  }
  return m;
}

// ---------------------------------------------------------------- score

struct ScoreArgs {
  std::string tensors;
  std::size_t window = 64;
  double epsilon = 1e-6;
  std::string out;
};

int run_score(const ScoreArgs& a, std::ostream& err) {
  if (a.window == 0) throw UsageError("--window must be at least 1");
  if (!(a.epsilon > 0.0)) throw UsageError("--epsilon must be positive");
  std::string meta_text;
  const auto bundle = read_bundle<double>(a.tensors, &meta_text);
  const json meta = meta_text.empty() ? json::object() : json::parse(meta_text);
  const bool scale = meta.value("scale", true);
  const Tensor<double>& q = find_tensor(bundle, "q");
  const Tensor<double>& k = find_tensor(bundle, "k");
  ScoreReport report = self_saliency_scores(q, k, WindowSpec{a.window, scale}, a.epsilon);

  // Optional routing column: top-lambda of each window-sized chunk.
  if (meta.contains("lambda")) {
    const std::size_t lambda = meta.at("lambda").get<std::size_t>();
    report.selected.assign(report.scores.size(), 0);
    for (std::size_t h = 0; h < report.heads; ++h) {
      const auto scores = report.head_scores(h);
      for (std::size_t c0 = 0; c0 < report.tokens; c0 += a.window) {
        const std::size_t len = std::min(a.window, report.tokens - c0);
        for (std::size_t i : top_k_indices<double>(scores.subspan(c0, len), std::min(lambda, len))) {
          report.selected[h * report.tokens + c0 + i] = 1;
        }
      }
    }
  }

  std::ostringstream os;
  os.precision(17);
  os << "token_index,head,score,selected\n";
  for (std::size_t h = 0; h < report.heads; ++h) {
    for (std::size_t t = 0; t < report.tokens; ++t) {
      os << t << ',' << h << ',' << report.score(h, t) << ',';
      if (!report.selected.empty()) os << int(report.selected[h * report.tokens + t]);
      os << '\n';
    }
  }
  write_file(a.out, os.str());
  err << "scored " << report.heads << " head(s) x " << report.tokens << " tokens -> " << a.out
      << '\n';
  return kOk;
}

// ---------------------------------------------------------------- equiv

struct EquivArgs {
  std::string config;
  std::string precision = "f64";
  std::string out;
  std::size_t instances = 5;
  std::size_t tokens = 0;
};

template <typename T>
json equiv_instance(const AttentionConfig& config, std::size_t tokens, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto params_d = HybridParams<double>::random(config.heads, config.head_dim, rng, 0.5);
  const auto params = params_d.template cast<T>();
  const auto inputs = random_inputs<double>(config.heads, tokens, config.head_dim, seed).template cast<T>();
  const auto ref = reference_hybrid(inputs, config, params).y.template cast<double>();
  const auto dec = decode_sequence(inputs, config, params).y.template cast<double>();
  const auto pre = prefill_chunk_parallel(inputs, config, params).y.template cast<double>();
  json row = {{"seed", seed},
              {"tokens", tokens},
              {"reference_vs_decode", max_abs_diff(ref, dec)},
              {"reference_vs_prefill", max_abs_diff(ref, pre)},
              {"decode_vs_prefill", max_abs_diff(dec, pre)}};
  if (config.lambda == config.chunk_size && !config.cache_cap) {
    const auto full = oracle_full_softmax(inputs.q, inputs.k, inputs.v, config.scale);
    row["reference_vs_full_softmax"] = max_abs_diff(ref, full.template cast<double>());
  }
  return row;
}

int run_equiv(const EquivArgs& a, std::ostream& out, std::ostream& err) {
  AttentionConfig config = load_config(a.config);
  try {
    config.precision = parse_dtype(a.precision);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const std::size_t tokens = a.tokens ? a.tokens : 4 * config.chunk_size + config.chunk_size / 2;
  const double tolerance = config.precision == DType::kF64 ? 1e-10 : 1e-4;
  json rows = json::array();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.instances; ++i) {
    const std::uint64_t seed = config.seed + i;
    json row = config.precision == DType::kF64 ? equiv_instance<double>(config, tokens, seed)
                                               : equiv_instance<float>(config, tokens, seed);
    for (const auto& [key, value] : row.items()) {
      if (key.find("_vs_") != std::string::npos) {
        const double v = value.get<double>();
        if (!(v <= worst)) worst = v;
      }
    }
    rows.push_back(row);
  }
  const bool pass = worst <= tolerance;
  json report = {{"config", json::parse(config.to_json())},
                 {"precision", dtype_name(config.precision)},
                 {"tolerance", tolerance},
                 {"instances", rows},
                 {"max_error", worst},
                 {"pass", pass}};
  write_file(a.out, report.dump(2) + "\n");
  out << "equiv " << dtype_name(config.precision) << ": max error " << worst << " (tolerance "
      << tolerance << ") " << (pass ? "PASS" : "FAIL") << '\n';
  if (!pass) {
    err << "forms disagree beyond tolerance\n";
    return kFailed;
  }
  return kOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::string mode;
  std::vector<std::size_t> lens;
  std::size_t reps = 3;
  std::string config;
  std::string out;
};

int run_bench(const BenchArgs& a, std::ostream& out) {
  BenchMode mode;
  try {
    mode = parse_bench_mode(a.mode);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (a.reps < 3) throw UsageError("--reps must be at least 3");
  if (a.lens.empty()) throw UsageError("--lens needs at least one length");
  for (std::size_t i = 1; i < a.lens.size(); ++i) {
    if (a.lens[i] <= a.lens[i - 1]) throw UsageError("--lens must be strictly increasing");
  }
  const AttentionConfig config = load_config(a.config);
  const auto records = bench(mode, a.lens, config, a.reps);
  write_file(a.out, bench_csv(records));
  for (const auto& r : records) {
    out << bench_mode_name(mode) << " N=" << r.tokens << " median " << r.median_seconds
        << " s, state " << r.state_size << '\n';
  }
  if (records.size() >= 2) out << "log-log slope " << loglog_slope(records) << '\n';
  return kOk;
}

// ---------------------------------------------------------------- transfer

struct TransferArgs {
  std::size_t steps = 500;
  std::uint64_t seed = 7;
  double lr = 3e-2;
  std::string config;
  std::string out;
};

template <typename T>
void save_params(const fs::path& dir, const StudentParams<T>& params, const json& meta) {
  std::vector<NamedTensor<T>> tensors;
  auto add = [&](const std::string& role, const std::vector<LinearMap<T>>& maps) {
    for (std::size_t h = 0; h < maps.size(); ++h) {
      const LinearMap<T>& m = maps[h];
      tensors.push_back({role + ".weight.h" + std::to_string(h),
                         Tensor<T>({m.out_dim, m.in_dim}, m.weight), h, role});
      if (m.has_bias()) {
        tensors.push_back({role + ".bias.h" + std::to_string(h), Tensor<T>({m.out_dim}, m.bias),
                           h, role});
      }
    }
  };
  add("f_q", params.f_q.heads);
  add("f_k", params.f_k.heads);
  add("gate", params.gate.heads);
  write_bundle(dir, tensors, meta.dump());
}

template <typename T>
int transfer_impl(const TransferArgs& a, const AttentionConfig& config, std::ostream& out) {
  const TransferTask task;
  const auto teacher =
      make_teacher<T>(a.seed, task.model_dim, config.heads, config.head_dim, config.scale);
  const auto batch = make_batch<T>(a.seed + 1, task.batch, task.tokens, task.model_dim);
  auto state = TrainState<T>::start(
      StudentParams<T>::initial(config.heads, config.head_dim, task.model_dim));
  for (std::size_t s = 0; s < a.steps; ++s) train_step(state, batch, teacher, config, a.lr);
  const double final_loss = static_cast<double>(transfer_loss(batch, teacher, state.params, config));

  const fs::path dir = a.out;
  fs::create_directories(dir);
  std::ostringstream csv;
  csv.precision(17);
  csv << "step,loss\n";
  for (std::size_t s = 0; s < state.loss_history.size(); ++s) {
    csv << s << ',' << state.loss_history[s] << '\n';
  }
  csv << state.loss_history.size() << ',' << final_loss << '\n';
  write_file(dir / "loss_curve.csv", csv.str());

  const double initial = state.loss_history.empty() ? final_loss : state.loss_history.front();
  json meta = {{"config", json::parse(config.to_json())},
               {"steps", a.steps},
               {"seed", a.seed},
               {"lr", a.lr},
               {"model_dim", task.model_dim},
               {"tokens", task.tokens},
               {"batch", task.batch},
               {"initial_loss", initial},
               {"final_loss", final_loss}};
  save_params(dir / "params", state.params, meta);
  write_file(dir / "summary.json", meta.dump(2) + "\n");
  out << "transfer: loss " << initial << " -> " << final_loss << " after " << a.steps
      << " steps (ratio " << (initial > 0 ? final_loss / initial : 0.0) << ")\n";
  return kOk;
}

int run_transfer(const TransferArgs& a, std::ostream& out) {
  if (!(a.lr >= 0.0) || !std::isfinite(a.lr)) throw UsageError("--lr must be a finite value >= 0");
  const AttentionConfig config = load_config(a.config, default_transfer_config());
  config.validate();
  return config.precision == DType::kF64 ? transfer_impl<double>(a, config, out)
                                         : transfer_impl<float>(a, config, out);
}

// ---------------------------------------------------------------- retrieval

struct RetrievalArgs {
  std::string router;
  std::size_t budget = 256;
  std::size_t seeds = 50;
  std::string config;
  std::string out;
  std::size_t tokens = 2048;
  std::size_t needles = 16;
};

int run_retrieval(const RetrievalArgs& a, std::ostream& out) {
  Router router;
  try {
    router = parse_router(a.router);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (a.seeds == 0) throw UsageError("--seeds must be positive");
  const AttentionConfig config = load_config(a.config);
  config.validate();
  if (a.budget > a.tokens) throw UsageError("--budget exceeds the task length");
  PlantedSpec spec;
  spec.tokens = a.tokens;
  spec.head_dim = config.head_dim;
  spec.heads = config.heads;
  spec.needles = a.needles;
  spec.tail_exclusion = 2 * config.chunk_size;
  spec.late_queries = std::min(config.chunk_size, spec.tail_exclusion);

  json runs = json::array();
  double total = 0.0;
  for (std::size_t i = 0; i < a.seeds; ++i) {
    const std::uint64_t seed = config.seed + i;
    const PlantedTask task = generate_planted(seed, spec);
    RecallResult r;
    try {
      r = routing_recall(task, router, a.budget, config, seed);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    total += r.recall;
    runs.push_back({{"seed", seed},
                    {"recall", r.recall},
                    {"found", r.found},
                    {"planted", r.planted},
                    {"window_tokens", r.window_tokens},
                    {"cache_tokens", r.cache_tokens},
                    {"retained_tokens", r.retained_tokens}});
  }
  const double mean = total / static_cast<double>(a.seeds);
  json report = {{"router", router_name(router)},
                 {"budget", a.budget},
                 {"tokens", a.tokens},
                 {"needles", a.needles},
                 {"config", json::parse(config.to_json())},
                 {"mean_recall", mean},
                 {"runs", runs}};
  write_file(a.out, report.dump(2) + "\n");
  out << "retrieval " << router_name(router) << " budget " << a.budget << ": mean recall " << mean
      << " over " << a.seeds << " seeds\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid softmax/linear attention with saliency routing"};
  app.require_subcommand(1);

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "Self-saliency scores for a q/k bundle");
  score_cmd->add_option("--tensors", score.tensors, "Bundle directory holding q and k")->required();
  score_cmd->add_option("--window", score.window, "Scoring window length")->required();
  score_cmd->add_option("--epsilon", score.epsilon, "Smoothing constant")->required();
  score_cmd->add_option("--out", score.out, "Output CSV")->required();

  EquivArgs equiv;
  auto* equiv_cmd = app.add_subcommand("equiv", "Compare reference, decode and prefill forms");
  equiv_cmd->add_option("--config", equiv.config, "Config JSON")->required();
  equiv_cmd->add_option("--precision", equiv.precision, "f32 or f64")->required();
  equiv_cmd->add_option("--out", equiv.out, "Output JSON")->required();
  equiv_cmd->add_option("--instances", equiv.instances, "Random instances");
  equiv_cmd->add_option("--tokens", equiv.tokens, "Sequence length (default 4.5 chunks)");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Prefill or decode timing over a length grid");
  bench_cmd->add_option("--mode", bench_args.mode, "prefill or decode")->required();
  bench_cmd->add_option("--lens", bench_args.lens, "Comma-separated lengths")
      ->required()
      ->delimiter(',');
  bench_cmd->add_option("--reps", bench_args.reps, "Repetitions (>= 3)")->required();
  bench_cmd->add_option("--config", bench_args.config, "Config JSON")->required();
  bench_cmd->add_option("--out", bench_args.out, "Output CSV")->required();

  TransferArgs transfer;
  auto* transfer_cmd = app.add_subcommand("transfer", "Fit feature maps and gate to a teacher");
  transfer_cmd->add_option("--steps", transfer.steps, "Optimizer steps")->required();
  transfer_cmd->add_option("--seed", transfer.seed, "Teacher and batch seed")->required();
  transfer_cmd->add_option("--lr", transfer.lr, "Adam learning rate")->required();
  transfer_cmd->add_option("--config", transfer.config, "Student config JSON");
  transfer_cmd->add_option("--out", transfer.out, "Output directory")->required();

  RetrievalArgs retrieval;
  auto* retrieval_cmd = app.add_subcommand("retrieval", "Planted-needle recall under a budget");
  retrieval_cmd->add_option("--router", retrieval.router, "saliency, position or random")
      ->required();
  retrieval_cmd->add_option("--budget", retrieval.budget, "Retained tokens")->required();
  retrieval_cmd->add_option("--seeds", retrieval.seeds, "Number of task seeds")->required();
  retrieval_cmd->add_option("--config", retrieval.config, "Config JSON")->required();
  retrieval_cmd->add_option("--out", retrieval.out, "Output JSON")->required();
  retrieval_cmd->add_option("--tokens", retrieval.tokens, "Task length");
  retrieval_cmd->add_option("--needles", retrieval.needles, "Planted positions per task");

  std::vector<const char*> argv{args.empty() ? "still" : args[0].c_str()};
  for (std::size_t i = 1; i < args.size(); ++i) argv.push_back(args[i].c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*score_cmd) return run_score(score, err);
    if (*equiv_cmd) return run_equiv(equiv, out, err);
    if (*bench_cmd) return run_bench(bench_args, out);
    if (*transfer_cmd) return run_transfer(transfer, out);
    if (*retrieval_cmd) return run_retrieval(retrieval, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kUsage;
}

}  // namespace still::cli

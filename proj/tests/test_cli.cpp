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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "cli.hpp"
#include "still/harness.hpp"
#include "still/saliency.hpp"
#include "still/tensor_io.hpp"

#if defined(__unix__) || defined(__APPLE__)
#include <sys/wait.h>
#endif

namespace still {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("still_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    args.insert(args.begin(), "still");
    return cli::run(args, out_, err_);
  }

  fs::path write_config(const std::string& text) {
    const fs::path p = dir_ / "config.json";
    std::ofstream(p) << text;
    return p;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  static std::vector<std::string> lines(const fs::path& p) {
    std::istringstream is(slurp(p));
    std::vector<std::string> out;
    for (std::string l; std::getline(is, l);)
      if (!l.empty()) out.push_back(l);
    return out;
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({}), cli::kUsage);
  EXPECT_EQ(cli::run({}, out_, err_), cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}), cli::kUsage);
  EXPECT_EQ(run({"score", "--window", "4"}), cli::kUsage);
  EXPECT_EQ(run({"bench", "--mode", "sideways", "--lens", "64,128", "--reps", "3", "--config",
                 write_config("{}").string(), "--out", (dir_ / "b.csv").string()}),
            cli::kUsage);
  EXPECT_EQ(run({"equiv", "--config", write_config("{}").string(), "--precision", "f16", "--out",
                 (dir_ / "e.json").string()}),
            cli::kUsage);
  EXPECT_EQ(run({"equiv", "--config", write_config(R"({"wat": 1})").string(), "--precision",
                 "f64", "--out", (dir_ / "e.json").string()}),
            cli::kUsage);
  EXPECT_EQ(run({"--help"}), cli::kOk);
}

TEST_F(CliTest, ScoreWritesCsvMatchingLibrary) {
  Rng rng(3);
  const auto q = rng.normal_tensor<double>({2, 20, 4});
  const auto k = rng.normal_tensor<double>({2, 20, 4});
  write_bundle<double>(dir_ / "qk", {{"q", q, std::nullopt, "q"}, {"k", k, std::nullopt, "k"}},
                       R"({"lambda": 2})");
  ASSERT_EQ(run({"score", "--tensors", (dir_ / "qk").string(), "--window", "5", "--epsilon",
                 "1e-6", "--out", (dir_ / "s.csv").string()}),
            cli::kOk);
  const auto rows = lines(dir_ / "s.csv");
  ASSERT_EQ(rows.size(), 41u);
  EXPECT_EQ(rows[0], "token_index,head,score,selected");
  const auto report = self_saliency_scores(q, k, WindowSpec{5, true}, 1e-6);
  std::size_t selected = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    std::istringstream is(rows[r]);
    std::string f[4];
    for (auto& x : f) std::getline(is, x, ',');
    const std::size_t t = std::stoul(f[0]), h = std::stoul(f[1]);
    EXPECT_EQ(t, (r - 1) % 20);
    EXPECT_EQ(std::stod(f[2]), report.score(h, t));
    selected += f[3] == "1";
  }
  EXPECT_EQ(selected, 2u * 4u * 2u);
}

TEST_F(CliTest, EquivPassesBothPrecisions) {
  const auto cfg = write_config(R"({"heads":2,"head_dim":4,"chunk_size":8,"lambda":3,"seed":5})");
  for (std::string prec : {"f64", "f32"}) {
    const auto out = dir_ / ("e_" + prec + ".json");
    ASSERT_EQ(run({"equiv", "--config", cfg.string(), "--precision", prec, "--out", out.string(),
                   "--instances", "2"}),
              cli::kOk)
        << err_.str();
    const json j = json::parse(slurp(out));
    EXPECT_TRUE(j.at("pass").get<bool>());
    EXPECT_EQ(j.at("precision"), prec);
    EXPECT_EQ(j.at("instances").size(), 2u);
    EXPECT_LE(j.at("max_error").get<double>(), j.at("tolerance").get<double>());
  }
}

TEST_F(CliTest, BenchWritesGrid) {
  const auto cfg = write_config(R"({"heads":1,"head_dim":8,"chunk_size":16,"lambda":2,"cache_cap":64})");
  const auto out = dir_ / "b.csv";
  ASSERT_EQ(run({"bench", "--mode", "decode", "--lens", "64,128", "--reps", "3", "--config",
                 cfg.string(), "--out", out.string()}),
            cli::kOk);
  const auto rows = lines(out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].rfind("decode,64,", 0), 0u);
  EXPECT_EQ(run({"bench", "--mode", "prefill", "--lens", "128,64", "--reps", "3", "--config",
                 cfg.string(), "--out", out.string()}),
            cli::kUsage);
}

TEST_F(CliTest, TransferWritesArtifacts) {
  const auto cfg = write_config(R"({"heads":1,"head_dim":4,"chunk_size":8,"lambda":2})");
  const auto out = dir_ / "t";
  ASSERT_EQ(run({"transfer", "--steps", "3", "--seed", "7", "--lr", "0.03", "--config",
                 cfg.string(), "--out", out.string()}),
            cli::kOk)
      << err_.str();
  const auto rows = lines(out / "loss_curve.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "step,loss");
  const json summary = json::parse(slurp(out / "summary.json"));
  EXPECT_EQ(summary.at("steps"), 3);
  std::string meta;
  const auto params = read_bundle<double>(out / "params", &meta);
  EXPECT_EQ(params.size(), 3u);
  EXPECT_EQ(find_tensor(params, "f_q.weight.h0").shape(), (Shape{4, 4}));
  EXPECT_EQ(run({"transfer", "--steps", "1", "--seed", "7", "--lr", "-1", "--out", out.string()}),
            cli::kUsage);
}

TEST_F(CliTest, RetrievalReportsPerSeed) {
  const auto cfg = write_config(R"({"heads":1,"head_dim":16,"chunk_size":16,"lambda":2,"seed":1})");
  const auto out = dir_ / "r.json";
  ASSERT_EQ(run({"retrieval", "--router", "saliency", "--budget", "96", "--seeds", "3",
                 "--config", cfg.string(), "--out", out.string(), "--tokens", "512", "--needles",
                 "8"}),
            cli::kOk)
      << err_.str();
  const json j = json::parse(slurp(out));
  EXPECT_EQ(j.at("router"), "saliency");
  ASSERT_EQ(j.at("runs").size(), 3u);
  double mean = 0;
  for (const auto& r : j.at("runs")) {
    EXPECT_LE(r.at("retained_tokens").get<std::size_t>(), 96u);
    mean += r.at("recall").get<double>() / 3.0;
  }
  EXPECT_NEAR(j.at("mean_recall").get<double>(), mean, 1e-15);
  EXPECT_EQ(run({"retrieval", "--router", "oracle", "--budget", "96", "--seeds", "1", "--config",
                 cfg.string(), "--out", out.string()}),
            cli::kUsage);
}

#if defined(__unix__) || defined(__APPLE__)
TEST(CliBinary, ExitCodes) {
  const std::string tool = STILL_TOOL_PATH;
  auto code = [&](const std::string& args) {
    const int status = std::system((tool + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  EXPECT_EQ(code("--help"), 0);
  EXPECT_EQ(code("nope"), 2);
  EXPECT_EQ(code("score"), 2);
}
#endif

}  // namespace
}  // namespace still

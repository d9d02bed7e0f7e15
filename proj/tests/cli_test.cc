// Copyright 2026 The Deferral Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include "deferral_cli/cli.h"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "deferral/errors.h"
#include "json.hpp"

namespace deferral::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const char* kToyConfig = R"({
  "seed": 3,
  "dataset": {"synthetic": {"kind": "linear", "rows": 200, "features": 3, "noise": 0.1, "seed": 1}},
  "train": {"batch_size": 64, "epochs": 15, "lr_grid": [0.01, 0.05], "log_every": 5},
  "experts": {"depths": [1, 2, 3], "hidden_width": 8, "epochs": 15, "lr_grid": [0.01]},
  "num_experts": 2,
  "base_costs": [0.1, 0.2],
  "verify": {"n_instances": 1, "candidates_per_instance": 0, "include_optimal": true},
  "table": {"datasets": ["Toy"], "seeds": [0], "max_experts": 3}
})";

fs::path Scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("deferral_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string Slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void Put(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun Invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "deferral");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out;
  std::ostringstream err;
  const int code = Main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path WriteConfig(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.json";
  Put(p, text);
  return p;
}

std::string WithChanges(const std::string& base, const json& patch) {
  json j = json::parse(base);
  j.merge_patch(patch);
  return j.dump();
}

TEST(ConfigTest, DefaultsAndUnknownKeys) {
  const RunConfig c = ParseRunConfig("{}");
  EXPECT_TRUE(c.dataset.synthetic());
  EXPECT_EQ(c.num_experts, 3u);
  EXPECT_EQ(c.base_costs, (std::vector<double>{4.0, 8.0, 12.0}));
  EXPECT_EQ(c.train.epochs, 2000u);
  EXPECT_EQ(c.experts.depths, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(c.verify.num_instances, 100u);
  EXPECT_THROW(ParseRunConfig(R"({"sed": 1})"), ConfigError);
  EXPECT_THROW(ParseRunConfig(R"({"train": {"epoch": 1}})"), ConfigError);
  EXPECT_THROW(ParseRunConfig(R"({"verify": {"checks": ["triple_stage"]}})"), ConfigError);
  EXPECT_THROW(ParseRunConfig(R"({"experts": {"depths": [4]}})"), ConfigError);
  EXPECT_THROW(ParseRunConfig(R"({"base_costs": [-1]})"), ConfigError);
  EXPECT_THROW(ParseRunConfig(R"({"surrogate": "cubic"})"), ConfigError);
  EXPECT_THROW(ParseRunConfig("not json"), ConfigError);
}

TEST(ConfigTest, ResolvedConfigIsStableAndReparses) {
  const RunConfig c = ParseRunConfig(kToyConfig);
  const std::string resolved = ResolvedConfigJson(c);
  const RunConfig again = ParseRunConfig(resolved);
  EXPECT_EQ(ResolvedConfigJson(again), resolved);
  EXPECT_EQ(ConfigDigest(again), ConfigDigest(c));
  EXPECT_EQ(ConfigDigest(c).size(), 16u);
  RunConfig other = c;
  other.seed = 4;
  EXPECT_NE(ConfigDigest(other), ConfigDigest(c));
}

TEST(ConfigTest, RelativePathsResolveAgainstConfigDirectory) {
  const fs::path dir = Scratch("paths");
  const RunConfig c = LoadRunConfig(WriteConfig(dir, R"({"expert_dir": "pool"})"));
  EXPECT_EQ(c.expert_dir, dir / "pool");
}

TEST(ExitCodeTest, MapsErrorKinds) {
  EXPECT_EQ(ExitCodeFor(ConfigError("x")), kExitConfig);
  EXPECT_EQ(ExitCodeFor(DataError("x")), kExitData);
  EXPECT_EQ(ExitCodeFor(DivergenceError("x", 0)), kExitDivergence);
  EXPECT_EQ(ExitCodeFor(std::runtime_error("x")), kExitOther);
}

TEST(MainTest, UsageErrorsAreConfigErrors) {
  EXPECT_EQ(Invoke({}).code, kExitConfig);
  EXPECT_EQ(Invoke({"train"}).code, kExitConfig);
  EXPECT_EQ(Invoke({"train", "-c", "/nonexistent/config.json"}).code, kExitConfig);
  EXPECT_EQ(Invoke({"--help"}).code, kExitOk);
}

TEST(MainTest, ToyPipelineRunsAndIsReproducible) {
  const fs::path dir = Scratch("toy");
  const std::string config = WriteConfig(dir, kToyConfig).string();
  const std::string out1 = (dir / "run1").string();
  const std::string out2 = (dir / "run2").string();

  for (const std::string& out : {out1, out2}) {
    const CliRun experts = Invoke({"train-experts", "-c", config, "-o", out});
    ASSERT_EQ(experts.code, kExitOk) << experts.err;
    for (int depth : {1, 2, 3}) {
      EXPECT_TRUE(fs::exists(fs::path(out) / "experts" /
                             ("expert_depth" + std::to_string(depth) + ".ckpt")));
    }
    const CliRun train = Invoke({"train", "-c", config, "-o", out});
    ASSERT_EQ(train.code, kExitOk) << train.err;
    const CliRun eval = Invoke({"evaluate", "-c", config, "-o", out});
    ASSERT_EQ(eval.code, kExitOk) << eval.err;
  }
  for (const char* f : {"experts/expert_depth1.ckpt", "experts/expert_depth2.ckpt",
                        "experts/expert_depth3.ckpt", "models/predictor.ckpt",
                        "models/scorer.ckpt", "report.json", "evaluation.json",
                        "train_log.jsonl", "selection.json", "resolved_config.json"}) {
    EXPECT_EQ(Slurp(fs::path(out1) / f), Slurp(fs::path(out2) / f)) << f;
  }

  const json report = json::parse(Slurp(fs::path(out1) / "report.json"));
  ASSERT_EQ(report["deferral_ratios"].size(), 3u);
  double total = 0.0;
  for (const auto& r : report["deferral_ratios"]) total += r.get<double>();
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_TRUE(report["base_model_mse"].is_null());
  EXPECT_EQ(report["seed"], 3);
  const json evaluation = json::parse(Slurp(fs::path(out1) / "evaluation.json"));
  EXPECT_DOUBLE_EQ(evaluation["system_mse"].get<double>(), report["system_mse"].get<double>());
  EXPECT_TRUE(evaluation["base_model_mse"].is_number());

  // A different seed override changes the run.
  const CliRun other = Invoke({"train-experts", "-c", config, "-o", (dir / "run3").string(),
                            "-s", "4"});
  ASSERT_EQ(other.code, kExitOk);
  EXPECT_NE(Slurp(fs::path(out1) / "experts/expert_depth1.ckpt"),
            Slurp(dir / "run3/experts/expert_depth1.ckpt"));

  // Corrupting a checkpoint is a data error naming the file.
  const fs::path scorer = fs::path(out2) / "models/scorer.ckpt";
  std::string bytes = Slurp(scorer);
  bytes[bytes.size() / 2] ^= 0x5a;
  Put(scorer, bytes);
  const CliRun corrupt = Invoke({"evaluate", "-c", config, "-o", out2});
  EXPECT_EQ(corrupt.code, kExitData);
  EXPECT_NE(corrupt.err.find("scorer.ckpt"), std::string::npos) << corrupt.err;
}

TEST(MainTest, SingleExpertAndTwoStageReports) {
  const fs::path dir = Scratch("two_stage");
  const std::string config =
      WriteConfig(dir, WithChanges(kToyConfig, {{"num_experts", 1}, {"method", "two"},
                                                {"base_costs", {0.1}}}))
          .string();
  const std::string out = (dir / "out").string();
  ASSERT_EQ(Invoke({"train-experts", "-c", config, "-o", out}).code, kExitOk);
  const CliRun train = Invoke({"train", "-c", config, "-o", out});
  ASSERT_EQ(train.code, kExitOk) << train.err;
  const json report = json::parse(Slurp(fs::path(out) / "report.json"));
  EXPECT_TRUE(report["base_model_mse"].is_number());
  ASSERT_EQ(report["deferral_ratios"].size(), 2u);
  EXPECT_NEAR(report["deferral_ratios"][0].get<double>() +
                  report["deferral_ratios"][1].get<double>(),
              1.0, 1e-12);
  const json selection = json::parse(Slurp(fs::path(out) / "selection.json"));
  EXPECT_TRUE(selection.contains("stage1_lr"));
}

TEST(MainTest, MissingExpertsAreDataErrors) {
  const fs::path dir = Scratch("missing");
  const std::string config = WriteConfig(dir, kToyConfig).string();
  const CliRun r = Invoke({"train", "-c", config, "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("expert_depth1.ckpt"), std::string::npos);
}

TEST(MainTest, ManifestChecksumMismatchNamesTheFile) {
  const fs::path dir = Scratch("manifest");
  std::string csv = "a,b,y\n";
  for (int i = 0; i < 50; ++i) {
    csv += std::to_string(i) + "," + std::to_string(i % 7) + "," + std::to_string(2 * i) + "\n";
  }
  Put(dir / "toy.csv", csv);
  Put(dir / "manifest.json", R"({"datasets": [{"name": "Toy", "path": "toy.csv",
      "target_column": "y", "has_header": true, "sha256": "00"}]})");
  const std::string config = WriteConfig(dir, WithChanges(kToyConfig, {{"dataset", {
      {"synthetic", nullptr}, {"manifest", "manifest.json"}, {"name", "Toy"}}}})).string();
  const CliRun r = Invoke({"train-experts", "-c", config, "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("toy.csv"), std::string::npos) << r.err;
}

TEST(MainTest, DivergenceExitCode) {
  const fs::path dir = Scratch("diverge");
  const std::string config = WriteConfig(
      dir, WithChanges(kToyConfig, {{"experts", {{"lr_grid", {1e200}}}}})).string();
  const CliRun r = Invoke({"train-experts", "-c", config, "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitDivergence) << r.err;
}

TEST(VerifyBoundsTest, OptimalCandidatesHoldWithZeroExcess) {
  const fs::path dir = Scratch("verify_opt");
  const std::string config = WriteConfig(dir, kToyConfig).string();
  const CliRun r = Invoke({"verify-bounds", "-c", config, "-o", (dir / "out").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::istringstream lines(Slurp(dir / "out/verdicts.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const json v = json::parse(line);
    EXPECT_NEAR(v["lhs"].get<double>(), 0.0, 1e-9);
    EXPECT_TRUE(v["holds"].get<bool>());
    ++n;
  }
  EXPECT_GT(n, 0u);
  EXPECT_TRUE(fs::exists(dir / "out/summary.txt"));
}

TEST(VerifyBoundsTest, SabotagedConstantIsDetected) {
  const fs::path dir = Scratch("verify_sabotage");
  const std::string config = WriteConfig(
      dir, WithChanges(kToyConfig, {{"verify", {{"n_instances", 20},
                                                {"candidates_per_instance", 10},
                                                {"checks", {"single_stage", "two_stage"}}}}}))
                                 .string();
  const CliRun ok = Invoke({"verify-bounds", "-c", config, "-o", (dir / "ok").string()});
  EXPECT_EQ(ok.code, kExitOk) << ok.err;
  const CliRun bad = Invoke({"verify-bounds", "-c", config, "-o", (dir / "bad").string(),
                          "--gamma-scale", "0.5"});
  EXPECT_EQ(bad.code, kExitViolation);
  EXPECT_NE(bad.err.find("seed"), std::string::npos);
  EXPECT_NE(bad.err.find("slack"), std::string::npos);
}

TEST(VerifyBoundsTest, InstanceFilesAreChecked) {
  const fs::path dir = Scratch("verify_file");
  Put(dir / "instance.json", R"({
    "loss": {"kind": "squared"}, "labels": [0.0, 2.0],
    "points": [{"weight": 1.0, "conditional": [0.5, 0.5], "costs": [[0.01, 0.01]]}],
    "candidates": [{"predictor": [1.0], "scores": [[0.0, -1e-9]]}]})");
  const std::string config = WriteConfig(
      dir, WithChanges(kToyConfig, {{"verify", {{"n_instances", 0},
                                                {"instance_files", {"instance.json"}}}}}))
                                 .string();
  const CliRun r = Invoke({"verify-bounds", "-c", config, "-o", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(Slurp(dir / "out/verdicts.jsonl").find("file/single_stage"), std::string::npos);
}

TEST(ReproduceTableTest, ZeroBaseCostsMatchNoCostRows) {
  const fs::path dir = Scratch("table");
  const std::string config = WriteConfig(
      dir, WithChanges(kToyConfig, {{"base_costs", {0.0, 0.0, 0.0}}})).string();
  const CliRun r = Invoke({"reproduce-table1", "-c", config, "-o", (dir / "out").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::map<std::string, double> by_key[2];
  std::istringstream lines(Slurp(dir / "out/table_runs.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const json j = json::parse(line);
    const std::string key =
        j["method"].get<std::string>() + "/" + std::to_string(j["num_experts"].get<int>());
    by_key[j["base_cost"].get<bool>() ? 1 : 0][key] = j["system_mse"].get<double>();
    if (j["method"] == "two") {
      EXPECT_TRUE(j["base_model_mse"].is_number());
    }
    ++n;
  }
  EXPECT_EQ(n, 2u * 2u * 3u);
  EXPECT_EQ(by_key[0], by_key[1]);
  const json table = json::parse(Slurp(dir / "out/table1.json"));
  EXPECT_EQ(table["rows"].size(), 4u);
  EXPECT_TRUE(table["missing"].empty());
}

TEST(ReproduceTableTest, MissingDatasetsAreFlagged) {
  const fs::path dir = Scratch("table_missing");
  std::string csv = "a,b,y\n";
  for (int i = 0; i < 120; ++i) {
    csv += std::to_string(i % 11) + "," + std::to_string(i % 7) + "," +
           std::to_string(i % 11 + 2 * (i % 7)) + "\n";
  }
  Put(dir / "toy.csv", csv);
  Put(dir / "manifest.json", R"({"datasets": [
      {"name": "Toy", "path": "toy.csv", "target_column": "y", "has_header": true},
      {"name": "Gone", "path": "gone.csv", "target_column": "y", "has_header": true}]})");
  const std::string config = WriteConfig(
      dir, WithChanges(kToyConfig,
                       {{"dataset", {{"synthetic", nullptr}, {"manifest", "manifest.json"},
                                     {"name", "Toy"}}},
                        {"table", {{"datasets", {"Toy", "Gone"}}, {"methods", {"single"}},
                                   {"base_cost_settings", {false}}}},
                        {"base_costs", {0.1, 0.2, 0.3}}}))
                                 .string();
  const CliRun r = Invoke({"reproduce-table1", "-c", config, "-o", (dir / "out").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const std::string text = Slurp(dir / "out/table1.txt");
  EXPECT_NE(text.find("MISSING: Gone"), std::string::npos);
  EXPECT_NE(text.find("Toy"), std::string::npos);
}

}  // namespace
}  // namespace deferral::cli

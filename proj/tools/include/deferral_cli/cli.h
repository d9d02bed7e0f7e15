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


// Command-line harness: config parsing and the five subcommands.

#ifndef DEFERRAL_CLI_CLI_H_
#define DEFERRAL_CLI_CLI_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "deferral/data_io.h"
#include "deferral/eval.h"
#include "deferral/theory.h"
#include "deferral/training.h"

namespace deferral::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitViolation = 4,
  kExitDivergence = 5,
};

// Maps the library's exception hierarchy onto exit codes.
int ExitCodeFor(const std::exception& e);

struct DatasetConfig {
  // Manifest entry, or a synthetic generator when manifest is empty.
  std::filesystem::path manifest;
  std::string name;
  std::string synth_kind = "linear";
  std::int64_t synth_rows = 600;
  std::int64_t synth_features = 5;
  double synth_noise = 0.1;
  std::uint64_t synth_seed = 0;
  bool synthetic() const { return manifest.empty(); }
};

struct VerifyConfig {
  std::size_t num_instances = 100;
  std::size_t candidates_per_instance = 20;
  std::vector<std::string> checks = {"single_stage", "two_stage", "single_expert"};
  ConstantMode constants = ConstantMode::kPrinted;
  bool include_optimal = false;
  double tolerance = 1e-6;
  GeneratorOptions generator;
  std::vector<std::filesystem::path> instance_files;
};

struct TableConfig {
  std::vector<std::string> datasets = {"Airfoil", "Housing", "Concrete"};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<Method> methods = {Method::kSingleStage, Method::kTwoStage};
  std::vector<bool> base_cost_settings = {false, true};
  std::size_t max_experts = 3;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  SplitSpec split;
  TrainConfig train;
  std::string surrogate = "comp_sum_logistic";
  double surrogate_parameter = 1.0;
  ExpertConfig experts;
  std::size_t num_experts = 3;
  std::vector<double> base_costs = {4.0, 8.0, 12.0};
  Method method = Method::kSingleStage;
  std::filesystem::path expert_dir;  // default <output>/experts
  std::filesystem::path model_dir;   // default <output>/models
  VerifyConfig verify;
  TableConfig table;
};

// Parses a JSON config; missing keys take defaults, unknown keys throw
// ConfigError. Relative paths resolve against base_dir.
RunConfig ParseRunConfig(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig LoadRunConfig(const std::filesystem::path& path);
// Fully defaulted config as JSON.
std::string ResolvedConfigJson(const RunConfig& config);
// 16 hex digits of FNV-1a over the resolved config.
std::string ConfigDigest(const RunConfig& config);

Surrogate MakeSurrogate(const RunConfig& config);

struct CommandOptions {
  std::filesystem::path output = "out";
  std::size_t parallel = 1;
  double gamma_scale = 1.0;
};

// Loads and standardizes the configured dataset split for a seed.
Splits LoadSplits(const RunConfig& config, std::uint64_t seed);

int CmdTrainExperts(const RunConfig& config, const CommandOptions& options, std::ostream& out);
int CmdTrain(const RunConfig& config, const CommandOptions& options, std::ostream& out);
int CmdEvaluate(const RunConfig& config, const CommandOptions& options, std::ostream& out);
int CmdVerifyBounds(const RunConfig& config, const CommandOptions& options, std::ostream& out,
                    std::ostream& err);
int CmdReproduceTable1(const RunConfig& config, const CommandOptions& options,
                       std::ostream& out, std::ostream& err);

// Full entry point: parses argv, runs the subcommand, maps errors to exit
// codes.
int Main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace deferral::cli

#endif  // DEFERRAL_CLI_CLI_H_

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


// Evaluation metrics and report assembly: System MSE, deferral ratios and
// the dataset x method x expert-count comparison table.

#ifndef DEFERRAL_EVAL_H_
#define DEFERRAL_EVAL_H_

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "deferral/data_io.h"
#include "deferral/models.h"

namespace deferral {

// Decision argmax_j r(x, j) for every row of features.
std::vector<std::size_t> RouteBatch(const LinearModel& scorer,
                                    const Eigen::MatrixXd& features);

// Mean of (chosen - y)^2 where chosen is predictor_out(i) for decision 0
// and expert_out(i, j - 1) for decision j. Base costs play no part.
double SystemMse(const Eigen::VectorXd& predictor_out,
                 const std::vector<std::size_t>& decisions,
                 const Eigen::MatrixXd& expert_out,
                 const Eigen::VectorXd& targets);

// Fractions of decisions equal to 0..num_experts; sums to 1.
std::vector<double> DeferralRatios(const std::vector<std::size_t>& decisions,
                                   std::size_t num_experts);

struct SystemReport {
  double system_mse = 0.0;
  std::vector<double> deferral_ratios;
  std::optional<double> base_model_mse;
  std::size_t n_test = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

// Evaluates h, r and the experts on a split. Model outputs and
// expert_predictions (n x n_e) live in the split's (possibly standardized)
// target space; MSEs are reported in original target units.
SystemReport EvaluateSystem(const DenseNetwork& predictor,
                            const LinearModel& scorer,
                            const Eigen::MatrixXd& expert_predictions,
                            const Dataset& data, bool with_base_model_mse);

// Plain MSE of a predictor in original target units.
double PredictorMse(const DenseNetwork& predictor, const Dataset& data);

std::string ReportToJson(const SystemReport& report);

enum class Method { kSingleStage, kTwoStage };
const char* MethodName(Method method);

struct TableRun {
  std::string dataset;
  Method method = Method::kSingleStage;
  bool base_cost = false;
  std::size_t num_experts = 1;  // 1..3
  std::uint64_t seed = 0;
  double system_mse = 0.0;
  // Only read from two-stage runs.
  std::optional<double> base_model_mse;
};

struct TableCell {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, n - 1 denominator
  std::size_t runs = 0;
};

// Mean and sample standard deviation; a single value has std 0.
TableCell MeanStd(const std::vector<double>& values);

struct TableRow {
  std::string dataset;
  bool base_cost = false;
  Method method = Method::kSingleStage;
  std::optional<TableCell> base_model;
  std::array<std::optional<TableCell>, 3> experts;
  // Set when all three expert cells exist: means strictly decrease from one
  // to three experts and, when the dataset has a base-model cell in any
  // row, the three-expert mean is below it.
  std::optional<bool> trend_holds;
};

struct ComparisonTable {
  std::vector<TableRow> rows;

  const TableRow* Find(const std::string& dataset, bool base_cost,
                       Method method) const;
  std::string RenderText() const;
  std::string ToJson() const;
};

// Groups runs by (dataset, base cost, method, expert count) and aggregates
// over seeds. Datasets are ordered Airfoil, Housing, Concrete, then any
// others by name; rows within a dataset are (no base cost, single),
// (no base cost, two), (base cost, single), (base cost, two). Values are
// combined in seed order, so the result is independent of input order.
// Throws DataError on duplicate (cell, seed) pairs, on two-stage runs of
// one seed reporting different base-model MSEs, and on expert counts
// outside 1..3.
ComparisonTable AssembleTable(const std::vector<TableRun>& runs);

}  // namespace deferral

#endif  // DEFERRAL_EVAL_H_

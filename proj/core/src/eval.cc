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


#include "deferral/eval.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "deferral/errors.h"
#include "json.hpp"

namespace deferral {
namespace {

using Eigen::Index;

double TargetScale(const Dataset& data) {
  return data.stats ? data.stats->target_std : 1.0;
}

int DatasetRank(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "airfoil") return 0;
  if (lower == "housing") return 1;
  if (lower == "concrete") return 2;
  return 3;
}

std::string FormatCell(const std::optional<TableCell>& cell) {
  if (!cell) return "---";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << cell->mean << " ± " << cell->std;
  return os.str();
}

// Display width counting the two-byte "±" as one column.
std::size_t DisplayWidth(const std::string& s) {
  std::size_t w = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++w;
  }
  return w;
}

nlohmann::json CellJson(const std::optional<TableCell>& cell) {
  if (!cell) return nullptr;
  return {{"mean", cell->mean}, {"std", cell->std}, {"runs", cell->runs}};
}

}  // namespace

std::vector<std::size_t> RouteBatch(const LinearModel& scorer,
                                    const Eigen::MatrixXd& features) {
  const Eigen::MatrixXd scores = scorer.ForwardBatch(features);
  std::vector<std::size_t> out(static_cast<std::size_t>(scores.rows()));
  std::vector<double> row(static_cast<std::size_t>(scores.cols()));
  for (Index i = 0; i < scores.rows(); ++i) {
    for (Index j = 0; j < scores.cols(); ++j) row[static_cast<std::size_t>(j)] = scores(i, j);
    out[static_cast<std::size_t>(i)] = ArgmaxDecision(row);
  }
  return out;
}

double SystemMse(const Eigen::VectorXd& predictor_out,
                 const std::vector<std::size_t>& decisions,
                 const Eigen::MatrixXd& expert_out, const Eigen::VectorXd& targets) {
  const Index n = targets.size();
  if (predictor_out.size() != n || static_cast<Index>(decisions.size()) != n ||
      (expert_out.size() > 0 && expert_out.rows() != n)) {
    throw StructuralError("SystemMse inputs disagree on the number of samples");
  }
  if (n == 0) throw DataError("SystemMse needs at least one sample");
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    const std::size_t d = decisions[static_cast<std::size_t>(i)];
    double chosen = predictor_out(i);
    if (d > 0) {
      if (static_cast<Index>(d) > expert_out.cols()) {
        throw StructuralError("decision " + std::to_string(d) + " exceeds expert count");
      }
      chosen = expert_out(i, static_cast<Index>(d) - 1);
    }
    const double e = chosen - targets(i);
    sum += e * e;
  }
  return sum / static_cast<double>(n);
}

std::vector<double> DeferralRatios(const std::vector<std::size_t>& decisions,
                                   std::size_t num_experts) {
  if (decisions.empty()) throw DataError("DeferralRatios needs at least one decision");
  std::vector<std::size_t> counts(num_experts + 1, 0);
  for (std::size_t d : decisions) {
    if (d > num_experts) throw StructuralError("decision exceeds expert count");
    ++counts[d];
  }
  std::vector<double> out(num_experts + 1);
  const double n = static_cast<double>(decisions.size());
  for (std::size_t j = 0; j <= num_experts; ++j) out[j] = static_cast<double>(counts[j]) / n;
  return out;
}

double PredictorMse(const DenseNetwork& predictor, const Dataset& data) {
  const Eigen::VectorXd pred = predictor.ForwardBatch(data.features).col(0);
  const double scale = TargetScale(data);
  return (pred - data.targets).squaredNorm() / static_cast<double>(data.size()) * scale * scale;
}

SystemReport EvaluateSystem(const DenseNetwork& predictor, const LinearModel& scorer,
                            const Eigen::MatrixXd& expert_predictions,
                            const Dataset& data, bool with_base_model_mse) {
  const auto num_experts = static_cast<std::size_t>(expert_predictions.cols());
  if (static_cast<std::size_t>(scorer.out_dim()) != num_experts + 1) {
    throw StructuralError("scorer has " + std::to_string(scorer.out_dim()) +
                          " outputs for " + std::to_string(num_experts) + " experts");
  }
  const Eigen::VectorXd pred = predictor.ForwardBatch(data.features).col(0);
  const std::vector<std::size_t> decisions = RouteBatch(scorer, data.features);
  const double scale = TargetScale(data);
  SystemReport report;
  // Affine de-standardization scales squared errors by sigma^2.
  report.system_mse =
      SystemMse(pred, decisions, expert_predictions, data.targets) * scale * scale;
  report.deferral_ratios = DeferralRatios(decisions, num_experts);
  if (with_base_model_mse) report.base_model_mse = PredictorMse(predictor, data);
  report.n_test = static_cast<std::size_t>(data.size());
  return report;
}

std::string ReportToJson(const SystemReport& report) {
  nlohmann::ordered_json j;
  j["system_mse"] = report.system_mse;
  j["deferral_ratios"] = report.deferral_ratios;
  j["base_model_mse"] =
      report.base_model_mse ? nlohmann::ordered_json(*report.base_model_mse) : nullptr;
  j["n_test"] = report.n_test;
  j["seed"] = report.seed;
  j["config_digest"] = report.config_digest;
  return j.dump(2);
}

const char* MethodName(Method method) {
  return method == Method::kSingleStage ? "single" : "two";
}

TableCell MeanStd(const std::vector<double>& values) {
  if (values.empty()) throw DataError("cannot aggregate an empty cell");
  TableCell cell;
  cell.runs = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  cell.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - cell.mean) * (v - cell.mean);
    cell.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return cell;
}

const TableRow* ComparisonTable::Find(const std::string& dataset, bool base_cost,
                                      Method method) const {
  for (const auto& row : rows) {
    if (row.dataset == dataset && row.base_cost == base_cost && row.method == method) {
      return &row;
    }
  }
  return nullptr;
}

ComparisonTable AssembleTable(const std::vector<TableRun>& runs) {
  using RowKey = std::tuple<int, std::string, bool, int>;
  // Per row: per expert count, seed -> value; seed -> base-model value.
  struct Acc {
    std::array<std::map<std::uint64_t, double>, 3> experts;
    std::map<std::uint64_t, double> base;
  };
  std::map<RowKey, Acc> acc;
  for (const auto& run : runs) {
    if (run.num_experts < 1 || run.num_experts > 3) {
      throw DataError("table runs need 1..3 experts, got " + std::to_string(run.num_experts));
    }
    if (run.dataset.empty()) throw DataError("table run without a dataset name");
    const RowKey key{DatasetRank(run.dataset), run.dataset, run.base_cost,
                     run.method == Method::kSingleStage ? 0 : 1};
    Acc& a = acc[key];
    auto& cell = a.experts[run.num_experts - 1];
    if (!cell.emplace(run.seed, run.system_mse).second) {
      throw DataError("duplicate run for " + run.dataset + "/" + MethodName(run.method) +
                      "/" + std::to_string(run.num_experts) + " experts, seed " +
                      std::to_string(run.seed));
    }
    if (run.method == Method::kTwoStage && run.base_model_mse) {
      auto [it, inserted] = a.base.emplace(run.seed, *run.base_model_mse);
      if (!inserted && it->second != *run.base_model_mse) {
        throw DataError("inconsistent base-model MSE for " + run.dataset + ", seed " +
                        std::to_string(run.seed));
      }
    }
  }
  ComparisonTable table;
  for (const auto& [key, a] : acc) {
    TableRow row;
    row.dataset = std::get<1>(key);
    row.base_cost = std::get<2>(key);
    row.method = std::get<3>(key) == 0 ? Method::kSingleStage : Method::kTwoStage;
    for (std::size_t k = 0; k < 3; ++k) {
      if (a.experts[k].empty()) continue;
      std::vector<double> values;
      for (const auto& [seed, v] : a.experts[k]) values.push_back(v);
      row.experts[k] = MeanStd(values);
    }
    if (!a.base.empty()) {
      std::vector<double> values;
      for (const auto& [seed, v] : a.base) values.push_back(v);
      row.base_model = MeanStd(values);
    }
    table.rows.push_back(std::move(row));
  }
  // Single-stage rows print no base model but are compared against the
  // dataset's base model from the two-stage runs.
  for (TableRow& row : table.rows) {
    if (!(row.experts[0] && row.experts[1] && row.experts[2])) continue;
    std::optional<TableCell> base = row.base_model;
    for (const TableRow& other : table.rows) {
      if (!base && other.dataset == row.dataset && other.base_model) base = other.base_model;
    }
    bool ok = row.experts[0]->mean > row.experts[1]->mean &&
              row.experts[1]->mean > row.experts[2]->mean;
    if (base) ok = ok && row.experts[2]->mean < base->mean;
    row.trend_holds = ok;
  }
  return table;
}

std::string ComparisonTable::RenderText() const {
  const std::vector<std::string> header = {"Dataset",      "Base cost",   "Method",
                                           "Base model",   "Single expert", "Two experts",
                                           "Three experts", "Trend"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : rows) {
    cells.push_back({row.dataset, row.base_cost ? "yes" : "no", MethodName(row.method),
                     FormatCell(row.base_model), FormatCell(row.experts[0]),
                     FormatCell(row.experts[1]), FormatCell(row.experts[2]),
                     row.trend_holds ? (*row.trend_holds ? "ok" : "broken") : "n/a"});
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = DisplayWidth(header[c]);
    for (const auto& r : cells) width[c] = std::max(width[c], DisplayWidth(r[c]));
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      os << r[c];
      if (c + 1 < r.size()) os << std::string(width[c] - DisplayWidth(r[c]) + 2, ' ');
    }
    os << '\n';
  };
  emit(header);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  os << std::string(total - 2, '-') << '\n';
  std::string last;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i > 0 && rows[i].dataset != last) os << std::string(total - 2, '-') << '\n';
    last = rows[i].dataset;
    emit(cells[i]);
  }
  os << "System MSE in original target units; mean ± sample std (n-1) over runs.\n";
  return os.str();
}

std::string ComparisonTable::ToJson() const {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& row : rows) {
    nlohmann::ordered_json r;
    r["dataset"] = row.dataset;
    r["base_cost"] = row.base_cost;
    r["method"] = MethodName(row.method);
    r["base_model"] = CellJson(row.base_model);
    r["single_expert"] = CellJson(row.experts[0]);
    r["two_experts"] = CellJson(row.experts[1]);
    r["three_experts"] = CellJson(row.experts[2]);
    r["trend_holds"] = row.trend_holds ? nlohmann::ordered_json(*row.trend_holds) : nullptr;
    out.push_back(std::move(r));
  }
  return out.dump(2);
}

}  // namespace deferral

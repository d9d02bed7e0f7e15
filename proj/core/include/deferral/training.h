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


// Training pipelines: expert pretraining, single-stage joint training of the
// predictor and scorer, and two-stage training of the scorer under a frozen
// predictor. Every pipeline sweeps a learning-rate grid and keeps the run
// with the lowest validation System MSE (validation MSE for regression-only
// stages); ties go to the smallest learning rate.
//
// Inputs are standardized splits. Expert predictions are passed per split as
// n x n_e matrices in the same standardized target space, so any expert
// (trained, oracle, constant) can be plugged in.

#ifndef DEFERRAL_TRAINING_H_
#define DEFERRAL_TRAINING_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "deferral/data_io.h"
#include "deferral/eval.h"
#include "deferral/loss_core.h"
#include "deferral/models.h"
#include "deferral/optim.h"

namespace deferral {

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t epochs = 2000;
  std::vector<double> lr_grid = {0.01, 0.05, 0.1};
  std::uint64_t seed = 0;
  Surrogate surrogate = Surrogate::CompSumLogistic();
  LossKind loss_kind = LossKind::kSquared;
  double loss_exponent = 2.0;
  // alpha_j in original target units; converted to alpha_j / sigma_y^p in
  // standardized space.
  std::vector<double> base_costs;
  // Learning-rate candidates evaluated concurrently (results are identical
  // for any value).
  std::size_t workers = 1;
  // Validation metrics are logged every log_every epochs and at the last.
  std::size_t log_every = 100;
  AdamConfig adam;  // lr is overwritten by each grid entry
  GradOptions grad;

  // Throws ConfigError on batch_size = 0, epochs = 0, an empty grid or a
  // non-positive grid entry, negative base costs.
  void Validate() const;
};

struct ExpertConfig {
  TrainConfig train;
  std::vector<std::size_t> depths = {1, 2, 3};
  Eigen::Index hidden_width = 64;
};

struct LogRecord {
  std::string stage;  // "expert<k>", "single", "stage1", "stage2"
  double lr = 0.0;
  std::size_t epoch = 0;  // 1-based
  std::string split;      // "train" or "val"
  double loss = 0.0;      // surrogate or regression objective
  std::optional<double> system_mse;  // original units
  std::vector<double> deferral_ratios;
};

std::string LogToJsonLines(const std::vector<LogRecord>& log);

struct LrCandidate {
  double lr = 0.0;
  double val_metric = 0.0;
};

// Index of the candidate with the lowest val_metric; ties go to the
// smallest lr. Throws ConfigError on an empty list.
std::size_t SelectLr(const std::vector<LrCandidate>& candidates);

struct ExpertPool {
  std::vector<MlpModel> experts;
  std::vector<double> val_mse;  // original units
  std::vector<double> chosen_lr;
  std::vector<std::uint64_t> hashes;  // recorded right after training
  std::vector<LogRecord> log;

  std::size_t size() const { return experts.size(); }
  // Throws StructuralError if any expert's parameters changed since
  // training.
  void VerifyFrozen() const;
  // n x count predictions of the first count experts.
  Eigen::MatrixXd Predict(const Eigen::MatrixXd& features, std::size_t count) const;
};

// One MLP per depth (hidden layers of hidden_width), trained with Adam on
// the regression loss. Throws DivergenceError with the epoch index.
ExpertPool TrainExperts(const Dataset& train, const Dataset& val,
                        const ExpertConfig& config);

// Standardized per-sample costs L(g_j(x), y) + alpha_j / sigma_y^p.
Eigen::MatrixXd CostTable(const Eigen::MatrixXd& expert_predictions,
                          const Eigen::VectorXd& targets,
                          const RegressionLoss& loss,
                          const std::vector<double>& scaled_base_costs);
std::vector<double> ScaleBaseCosts(const std::vector<double>& base_costs,
                                   const Dataset& split, double exponent);

struct DeferralModels {
  LinearModel predictor;
  LinearModel scorer;
  double lr = 0.0;
  SystemReport val_report;
  std::vector<LrCandidate> candidates;
  // Two-stage only: the regression stage.
  std::optional<double> stage1_lr;
  std::optional<double> base_model_val_mse;
  std::vector<LrCandidate> stage1_candidates;
  std::vector<LogRecord> log;
};

// Joint minimization of the batch-mean single-stage surrogate over linear h
// and r. Expert count is expert_train.cols().
DeferralModels TrainSingleStage(const Dataset& train, const Dataset& val,
                                const Eigen::MatrixXd& expert_train,
                                const Eigen::MatrixXd& expert_val,
                                const TrainConfig& config);

// Stage 1 fits h on the regression loss; stage 2 fits r on the two-stage
// surrogate with h frozen (verified by parameter hash).
DeferralModels TrainTwoStage(const Dataset& train, const Dataset& val,
                             const Eigen::MatrixXd& expert_train,
                             const Eigen::MatrixXd& expert_val,
                             const TrainConfig& config);

// Stage 2 alone for a given frozen predictor.
DeferralModels TrainScorer(const LinearModel& fixed_predictor,
                           const Dataset& train, const Dataset& val,
                           const Eigen::MatrixXd& expert_train,
                           const Eigen::MatrixXd& expert_val,
                           const TrainConfig& config);

// Regression-only training of a linear predictor (stage 1 / base model).
struct RegressionFit {
  LinearModel model;
  double lr = 0.0;
  double val_mse = 0.0;  // original units
  std::vector<LrCandidate> candidates;
  std::vector<LogRecord> log;
};
RegressionFit TrainLinearRegression(const Dataset& train, const Dataset& val,
                                    const TrainConfig& config);

}  // namespace deferral

#endif  // DEFERRAL_TRAINING_H_

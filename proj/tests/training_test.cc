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


#include "deferral/training.h"

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "deferral/errors.h"

namespace deferral {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Splits ToySplits(std::uint64_t seed = 1, SynthKind kind = SynthKind::kPiecewise) {
  const Dataset d = SynthRegression(300, 3, 0.3, seed, kind).data;
  return StandardizeSplits(Split(d, SplitSpec{0.6, 0.2, 0.2, seed}));
}

TrainConfig FastConfig() {
  TrainConfig c;
  c.epochs = 40;
  c.batch_size = 32;
  c.log_every = 10;
  c.seed = 5;
  return c;
}

double DeferredFraction(const std::vector<double>& ratios) {
  return 1.0 - ratios.front();
}

TEST(TrainConfigTest, ValidateRejectsBadValues) {
  TrainConfig c;
  EXPECT_NO_THROW(c.Validate());
  c.batch_size = 0;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = TrainConfig{};
  c.lr_grid = {};
  EXPECT_THROW(c.Validate(), ConfigError);
  c.lr_grid = {0.1, -1.0};
  EXPECT_THROW(c.Validate(), ConfigError);
  c = TrainConfig{};
  c.base_costs = {1.0, -0.1};
  EXPECT_THROW(c.Validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_THROW(c.Validate(), ConfigError);
}

TEST(SelectLrTest, LowestMetricThenSmallestLr) {
  EXPECT_EQ(SelectLr({{0.1, 2.0}, {0.01, 1.0}, {0.05, 3.0}}), 1u);
  EXPECT_EQ(SelectLr({{0.1, 1.0}, {0.01, 1.0}, {0.05, 1.0}}), 1u);
}

TEST(CostTableTest, ExpertLossPlusBaseCost) {
  MatrixXd preds(2, 2);
  preds << 1.0, 0.0, 2.0, 4.0;
  VectorXd y(2);
  y << 0.0, 1.0;
  const MatrixXd c = CostTable(preds, y, RegressionLoss::Squared(100.0), {0.5, 1.5});
  EXPECT_DOUBLE_EQ(c(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(c(0, 1), 1.5);
  EXPECT_DOUBLE_EQ(c(1, 0), 1.5);
  EXPECT_DOUBLE_EQ(c(1, 1), 10.5);
  EXPECT_THROW(CostTable(preds, y, RegressionLoss::Squared(100.0), {0.5}), StructuralError);
}

TEST(ScaleBaseCostsTest, DividesBySigmaToThePower) {
  const Splits s = ToySplits();
  const double sigma = s.train.stats->target_std;
  const auto scaled = ScaleBaseCosts({4.0, 8.0}, s.train, 2.0);
  EXPECT_NEAR(scaled[0], 4.0 / (sigma * sigma), 1e-15);
  EXPECT_NEAR(scaled[1], 8.0 / (sigma * sigma), 1e-15);
}

TEST(TrainExpertsTest, DeterministicAcrossWorkersAndFrozen) {
  const Splits s = ToySplits();
  ExpertConfig cfg;
  cfg.train = FastConfig();
  cfg.hidden_width = 8;
  const ExpertPool a = TrainExperts(s.train, s.val, cfg);
  cfg.train.workers = 3;
  const ExpertPool b = TrainExperts(s.train, s.val, cfg);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.experts[k].depth(), k + 1);
    EXPECT_EQ(a.experts[k].Hash(), b.experts[k].Hash());
    EXPECT_EQ(a.val_mse[k], b.val_mse[k]);
  }
  EXPECT_NO_THROW(a.VerifyFrozen());
  ExpertPool tampered = a;
  Eigen::VectorXd p = tampered.experts[0].Flatten();
  p(0) += 1.0;
  tampered.experts[0].Unflatten(p);
  EXPECT_THROW(tampered.VerifyFrozen(), StructuralError);
  EXPECT_EQ(a.Predict(s.val.features, 2).cols(), 2);
}

TEST(TrainSingleStageTest, DeterministicReportAndLog) {
  const Splits s = ToySplits();
  const MatrixXd e_train = s.train.targets + 0.3 * VectorXd::Ones(s.train.size());
  const MatrixXd e_val = s.val.targets + 0.3 * VectorXd::Ones(s.val.size());
  TrainConfig cfg = FastConfig();
  cfg.base_costs = {0.1};
  const DeferralModels a = TrainSingleStage(s.train, s.val, e_train, e_val, cfg);
  cfg.workers = 2;
  const DeferralModels b = TrainSingleStage(s.train, s.val, e_train, e_val, cfg);
  EXPECT_EQ(a.predictor.Hash(), b.predictor.Hash());
  EXPECT_EQ(a.scorer.Hash(), b.scorer.Hash());
  EXPECT_EQ(a.val_report.system_mse, b.val_report.system_mse);
  EXPECT_EQ(a.candidates.size(), cfg.lr_grid.size());
  const auto& r = a.val_report.deferral_ratios;
  EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-12);
  bool has_train = false;
  bool has_val = false;
  for (const auto& rec : a.log) {
    has_train |= rec.split == "train";
    has_val |= rec.split == "val" && rec.system_mse.has_value();
  }
  EXPECT_TRUE(has_train && has_val);
  EXPECT_NE(LogToJsonLines(a.log).find("\"stage\":\"single\""), std::string::npos);
}

TEST(TrainTwoStageTest, StageOneEqualsRegressionFitAndIsNotMutated) {
  const Splits s = ToySplits(2);
  const MatrixXd e_train = s.train.targets;
  const MatrixXd e_val = s.val.targets;
  TrainConfig cfg = FastConfig();
  cfg.base_costs = {0.5};
  const RegressionFit fit = TrainLinearRegression(s.train, s.val, cfg);
  const DeferralModels two = TrainTwoStage(s.train, s.val, e_train, e_val, cfg);
  EXPECT_EQ(two.predictor.Hash(), fit.model.Hash());
  ASSERT_TRUE(two.base_model_val_mse.has_value());
  EXPECT_DOUBLE_EQ(*two.base_model_val_mse, fit.val_mse);
  ASSERT_TRUE(two.stage1_lr.has_value());
  EXPECT_EQ(*two.stage1_lr, fit.lr);
  const DeferralModels scorer_only = TrainScorer(fit.model, s.train, s.val, e_train, e_val, cfg);
  EXPECT_EQ(scorer_only.scorer.Hash(), two.scorer.Hash());
}

TEST(TrainSingleStageTest, OracleExpertIsAlmostAlwaysChosen) {
  const Splits s = ToySplits(3);
  TrainConfig cfg = FastConfig();
  cfg.epochs = 150;
  const DeferralModels m = TrainSingleStage(s.train, s.val, s.train.targets, s.val.targets, cfg);
  EXPECT_GE(DeferredFraction(m.val_report.deferral_ratios), 0.95);
  EXPECT_LE(m.val_report.system_mse, 1e-12);
}

TEST(TrainSingleStageTest, ProhibitiveCostPreventsDeferral) {
  const Splits s = ToySplits(3);
  TrainConfig cfg = FastConfig();
  cfg.epochs = 150;
  cfg.base_costs = {1e6};
  const DeferralModels m = TrainSingleStage(s.train, s.val, s.train.targets, s.val.targets, cfg);
  EXPECT_LE(DeferredFraction(m.val_report.deferral_ratios), 0.05);
}

TEST(TrainSingleStageTest, ScalingBaseCostsDoesNotRaiseDeferral) {
  const Splits s = ToySplits(4, SynthKind::kHeteroscedastic);
  const Eigen::VectorXd shift_train = 0.4 * VectorXd::Ones(s.train.size());
  const Eigen::VectorXd shift_val = 0.4 * VectorXd::Ones(s.val.size());
  const MatrixXd e_train = s.train.targets + shift_train;
  const MatrixXd e_val = s.val.targets + shift_val;
  TrainConfig cfg = FastConfig();
  cfg.epochs = 100;
  cfg.base_costs = {0.05};
  const DeferralModels low = TrainSingleStage(s.train, s.val, e_train, e_val, cfg);
  cfg.base_costs = {0.5};
  const DeferralModels high = TrainSingleStage(s.train, s.val, e_train, e_val, cfg);
  EXPECT_LE(DeferredFraction(high.val_report.deferral_ratios),
            DeferredFraction(low.val_report.deferral_ratios));
}

TEST(TrainingTest, HugeLearningRateDiverges) {
  const Splits s = ToySplits();
  TrainConfig cfg = FastConfig();
  cfg.lr_grid = {1e200};
  EXPECT_THROW(TrainLinearRegression(s.train, s.val, cfg), DivergenceError);
}

TEST(TrainingTest, MismatchedExpertTablesAreStructural) {
  const Splits s = ToySplits();
  const MatrixXd bad = MatrixXd::Zero(3, 1);
  EXPECT_THROW(TrainSingleStage(s.train, s.val, bad, bad, FastConfig()), StructuralError);
}

}  // namespace
}  // namespace deferral

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

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

#include "deferral/errors.h"
#include "deferral/rng.h"
#include "json.hpp"

namespace deferral {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

RegressionLoss MakeLoss(const TrainConfig& config, const Dataset& train) {
  double lo = train.targets.minCoeff();
  double hi = train.targets.maxCoeff();
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  return RegressionLoss::ForLabelRange(config.loss_kind, lo, hi, config.loss_exponent);
}

// Runs f(k) for k in [0, count) on up to `workers` threads. Results are
// stored by index; the lowest-index exception is rethrown.
template <typename R, typename F>
std::vector<R> MapCandidates(std::size_t count, std::size_t workers, F&& f) {
  std::vector<std::optional<R>> slots(count);
  std::vector<std::exception_ptr> errors(count);
  auto run = [&](std::size_t k) {
    try {
      slots[k].emplace(f(k));
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t k = 0; k < count; ++k) run(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < count; k += workers) run(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<R> out;
  out.reserve(count);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

// Epoch loop shared by every stage: seeded shuffle, mini-batches with the
// last short batch kept, divergence detection and periodic logging.
// step(rows) performs one update and returns the batch-mean loss.
template <typename Step, typename Validate>
void RunEpochs(const TrainConfig& config, Index n, std::uint64_t shuffle_seed,
               const std::string& stage, double lr, Step&& step, Validate&& validate,
               std::vector<LogRecord>& log) {
  Rng rng(shuffle_seed);
  const auto batch = static_cast<Index>(config.batch_size);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::vector<std::size_t> perm = rng.Permutation(static_cast<std::size_t>(n));
    double sum = 0.0;
    try {
      for (Index start = 0; start < n; start += batch) {
        const Index count = std::min(batch, n - start);
        std::vector<Index> rows(perm.begin() + start, perm.begin() + start + count);
        sum += step(rows) * static_cast<double>(count);
      }
    } catch (const DivergenceError&) {
      throw;
    } catch (const NonFiniteError& e) {
      throw DivergenceError(stage + " (lr " + std::to_string(lr) + ") diverged at epoch " +
                                std::to_string(epoch) + ": " + e.what(),
                            epoch);
    }
    const double train_loss = sum / static_cast<double>(n);
    if (!std::isfinite(train_loss)) {
      throw DivergenceError(stage + " (lr " + std::to_string(lr) +
                                ") loss became non-finite at epoch " + std::to_string(epoch),
                            epoch);
    }
    if (epoch % std::max<std::size_t>(1, config.log_every) == 0 || epoch == config.epochs) {
      LogRecord rec;
      rec.stage = stage;
      rec.lr = lr;
      rec.epoch = epoch;
      rec.split = "train";
      rec.loss = train_loss;
      log.push_back(rec);
      LogRecord val = validate();
      val.stage = stage;
      val.lr = lr;
      val.epoch = epoch;
      val.split = "val";
      log.push_back(std::move(val));
    }
  }
}

void CheckExpertShapes(const Dataset& train, const Dataset& val, const MatrixXd& expert_train,
                       const MatrixXd& expert_val) {
  if (expert_train.rows() != train.size() || expert_val.rows() != val.size()) {
    throw StructuralError("expert prediction rows do not match the split sizes");
  }
  if (expert_train.cols() != expert_val.cols()) {
    throw StructuralError("train and val expert predictions disagree on expert count");
  }
  if (expert_train.cols() < 1) throw ConfigError("at least one expert is required");
}

void CheckBaseCosts(const TrainConfig& config, Index num_experts) {
  if (!config.base_costs.empty() &&
      static_cast<Index>(config.base_costs.size()) < num_experts) {
    throw ConfigError("base_costs lists " + std::to_string(config.base_costs.size()) +
                      " values for " + std::to_string(num_experts) + " experts");
  }
}

std::vector<double> FirstBaseCosts(const TrainConfig& config, Index num_experts) {
  std::vector<double> out(static_cast<std::size_t>(num_experts), 0.0);
  for (Index j = 0; j < num_experts && j < static_cast<Index>(config.base_costs.size()); ++j) {
    out[static_cast<std::size_t>(j)] = config.base_costs[static_cast<std::size_t>(j)];
  }
  return out;
}

template <typename Net>
struct FitRun {
  Net model;
  double val_mse;
  std::vector<LogRecord> log;
};

// Adam on the regression loss for one learning rate.
template <typename Net>
FitRun<Net> FitRegression(Net model, const Dataset& train, const Dataset& val,
                          const RegressionLoss& loss, const TrainConfig& config, double lr,
                          std::uint64_t shuffle_seed, const std::string& stage) {
  AdamConfig adam = config.adam;
  adam.lr = lr;
  AdamState state(static_cast<Index>(model.num_parameters()), adam);
  VectorXd params = model.Flatten();
  std::vector<LogRecord> log;
  auto step = [&](const std::vector<Index>& rows) {
    const MatrixXd x = train.features(rows, Eigen::all);
    const VectorXd y = train.targets(rows);
    GradientBundle g = GradRegression(model, loss, x, y, config.grad);
    state.Step(params, g.Flatten());
    model.Unflatten(params);
    return g.loss;
  };
  auto validate = [&] {
    LogRecord rec;
    rec.loss = RegressionObjective(model, loss, val.features, val.targets);
    rec.system_mse = PredictorMse(model, val);
    return rec;
  };
  RunEpochs(config, train.size(), shuffle_seed, stage, lr, step, validate, log);
  if (!model.AllFinite()) throw DivergenceError(stage + " produced non-finite parameters", config.epochs);
  const double val_mse = PredictorMse(model, val);
  return FitRun<Net>{std::move(model), val_mse, std::move(log)};
}

struct ScorerRun {
  LinearModel predictor;
  LinearModel scorer;
  SystemReport val_report;
  std::vector<LogRecord> log;
};

}  // namespace

void TrainConfig::Validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (lr_grid.empty()) throw ConfigError("lr_grid must not be empty");
  for (double lr : lr_grid) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr_grid entries must be positive");
  }
  for (double a : base_costs) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("base costs must be finite and >= 0");
  }
  if (!(loss_exponent >= 1.0)) throw ConfigError("loss exponent must be >= 1");
}

std::string LogToJsonLines(const std::vector<LogRecord>& log) {
  std::string out;
  for (const auto& r : log) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["lr"] = r.lr;
    j["epoch"] = r.epoch;
    j["split"] = r.split;
    j["loss"] = r.loss;
    j["system_mse"] = r.system_mse ? nlohmann::ordered_json(*r.system_mse) : nullptr;
    j["deferral_ratios"] = r.deferral_ratios;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::size_t SelectLr(const std::vector<LrCandidate>& candidates) {
  if (candidates.empty()) throw ConfigError("no learning-rate candidates to select from");
  std::size_t best = 0;
  for (std::size_t k = 1; k < candidates.size(); ++k) {
    const auto& c = candidates[k];
    const auto& b = candidates[best];
    if (c.val_metric < b.val_metric || (c.val_metric == b.val_metric && c.lr < b.lr)) best = k;
  }
  return best;
}

void ExpertPool::VerifyFrozen() const {
  for (std::size_t k = 0; k < experts.size(); ++k) {
    if (experts[k].Hash() != hashes[k]) {
      throw StructuralError("expert " + std::to_string(k + 1) +
                            " parameters changed after pretraining");
    }
  }
}

Eigen::MatrixXd ExpertPool::Predict(const Eigen::MatrixXd& features, std::size_t count) const {
  if (count > experts.size()) {
    throw StructuralError("requested " + std::to_string(count) + " experts from a pool of " +
                          std::to_string(experts.size()));
  }
  MatrixXd out(features.rows(), static_cast<Index>(count));
  for (std::size_t k = 0; k < count; ++k) {
    out.col(static_cast<Index>(k)) = experts[k].ForwardBatch(features).col(0);
  }
  return out;
}

ExpertPool TrainExperts(const Dataset& train, const Dataset& val, const ExpertConfig& config) {
  config.train.Validate();
  if (config.depths.empty()) throw ConfigError("at least one expert depth is required");
  if (config.hidden_width < 1) throw ConfigError("hidden_width must be >= 1");
  for (std::size_t depth : config.depths) {
    if (depth < 1 || depth > MlpModel::kMaxHiddenLayers) {
      throw ConfigError("expert depth must be in 1..3");
    }
  }
  if (train.size() == 0 || val.size() == 0) throw DataError("empty training or validation split");
  const RegressionLoss loss = MakeLoss(config.train, train);
  ExpertPool pool;
  for (std::size_t depth : config.depths) {
    const std::string stage = "expert" + std::to_string(depth);
    const std::vector<Index> widths(depth, config.hidden_width);
    const MlpModel init =
        MlpModel::Init(train.dims(), widths, DeriveSeed(config.train.seed, stage + "/init"));
    const std::uint64_t shuffle = DeriveSeed(config.train.seed, stage + "/shuffle");
    const auto& grid = config.train.lr_grid;
    auto runs = MapCandidates<FitRun<MlpModel>>(grid.size(), config.train.workers,
                                                 [&](std::size_t k) {
                                                   return FitRegression(init, train, val, loss,
                                                                        config.train, grid[k],
                                                                        shuffle, stage);
                                                 });
    std::vector<LrCandidate> cands;
    for (std::size_t k = 0; k < grid.size(); ++k) cands.push_back({grid[k], runs[k].val_mse});
    const std::size_t best = SelectLr(cands);
    for (auto& r : runs) pool.log.insert(pool.log.end(), r.log.begin(), r.log.end());
    pool.hashes.push_back(runs[best].model.Hash());
    pool.val_mse.push_back(runs[best].val_mse);
    pool.chosen_lr.push_back(grid[best]);
    pool.experts.push_back(std::move(runs[best].model));
  }
  return pool;
}

Eigen::MatrixXd CostTable(const Eigen::MatrixXd& expert_predictions,
                          const Eigen::VectorXd& targets, const RegressionLoss& loss,
                          const std::vector<double>& scaled_base_costs) {
  if (expert_predictions.rows() != targets.size()) {
    throw StructuralError("expert predictions and targets disagree on sample count");
  }
  if (static_cast<Index>(scaled_base_costs.size()) != expert_predictions.cols()) {
    throw StructuralError("one base cost per expert is required");
  }
  MatrixXd out(expert_predictions.rows(), expert_predictions.cols());
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) {
      out(i, j) = loss(expert_predictions(i, j), targets(i)) +
                  scaled_base_costs[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

std::vector<double> ScaleBaseCosts(const std::vector<double>& base_costs, const Dataset& split,
                                   double exponent) {
  const double sigma = split.stats ? split.stats->target_std : 1.0;
  const double scale = std::pow(sigma, exponent);
  std::vector<double> out;
  out.reserve(base_costs.size());
  for (double a : base_costs) out.push_back(a / scale);
  return out;
}

RegressionFit TrainLinearRegression(const Dataset& train, const Dataset& val,
                                    const TrainConfig& config) {
  config.Validate();
  if (train.size() == 0 || val.size() == 0) throw DataError("empty training or validation split");
  const RegressionLoss loss = MakeLoss(config, train);
  const LinearModel init = LinearModel::Init(train.dims(), 1, DeriveSeed(config.seed, "h/init"));
  const std::uint64_t shuffle = DeriveSeed(config.seed, "stage1/shuffle");
  const auto& grid = config.lr_grid;
  auto runs = MapCandidates<FitRun<LinearModel>>(grid.size(), config.workers, [&](std::size_t k) {
    return FitRegression(init, train, val, loss, config, grid[k], shuffle, "stage1");
  });
  RegressionFit fit{init, 0.0, 0.0, {}, {}};
  for (std::size_t k = 0; k < grid.size(); ++k) fit.candidates.push_back({grid[k], runs[k].val_mse});
  const std::size_t best = SelectLr(fit.candidates);
  for (auto& r : runs) fit.log.insert(fit.log.end(), r.log.begin(), r.log.end());
  fit.model = std::move(runs[best].model);
  fit.lr = grid[best];
  fit.val_mse = runs[best].val_mse;
  return fit;
}

DeferralModels TrainSingleStage(const Dataset& train, const Dataset& val,
                                const Eigen::MatrixXd& expert_train,
                                const Eigen::MatrixXd& expert_val, const TrainConfig& config) {
  config.Validate();
  CheckExpertShapes(train, val, expert_train, expert_val);
  const Index n_e = expert_train.cols();
  CheckBaseCosts(config, n_e);
  const RegressionLoss loss = MakeLoss(config, train);
  const std::vector<double> alpha =
      ScaleBaseCosts(FirstBaseCosts(config, n_e), train, loss.exponent());
  const MatrixXd train_costs = CostTable(expert_train, train.targets, loss, alpha);
  const MatrixXd val_costs = CostTable(expert_val, val.targets, loss, alpha);
  const LinearModel h0 = LinearModel::Init(train.dims(), 1, DeriveSeed(config.seed, "h/init"));
  const LinearModel r0 =
      LinearModel::Init(train.dims(), n_e + 1, DeriveSeed(config.seed, "r/init"));
  const std::uint64_t shuffle = DeriveSeed(config.seed, "single/shuffle");
  const auto& grid = config.lr_grid;

  auto runs = MapCandidates<ScorerRun>(grid.size(), config.workers, [&](std::size_t k) {
    AdamConfig adam = config.adam;
    adam.lr = grid[k];
    LinearModel h = h0;
    LinearModel r = r0;
    AdamState h_state(static_cast<Index>(h.num_parameters()), adam);
    AdamState r_state(static_cast<Index>(r.num_parameters()), adam);
    VectorXd h_params = h.Flatten();
    VectorXd r_params = r.Flatten();
    std::vector<LogRecord> log;
    auto step = [&](const std::vector<Index>& rows) {
      const MatrixXd x = train.features(rows, Eigen::all);
      const VectorXd y = train.targets(rows);
      const MatrixXd c = train_costs(rows, Eigen::all);
      auto [gh, gr] = GradSingleStage(h, r, loss, config.surrogate, BatchView{x, y, c},
                                      config.grad);
      h_state.Step(h_params, gh.Flatten());
      r_state.Step(r_params, gr.Flatten());
      h.Unflatten(h_params);
      r.Unflatten(r_params);
      return gh.loss;
    };
    auto validate = [&] {
      LogRecord rec;
      rec.loss = SingleStageObjective(h, r, loss, config.surrogate,
                                      BatchView{val.features, val.targets, val_costs});
      const SystemReport rep = EvaluateSystem(h, r, expert_val, val, false);
      rec.system_mse = rep.system_mse;
      rec.deferral_ratios = rep.deferral_ratios;
      return rec;
    };
    RunEpochs(config, train.size(), shuffle, "single", grid[k], step, validate, log);
    SystemReport rep = EvaluateSystem(h, r, expert_val, val, false);
    rep.seed = config.seed;
    return ScorerRun{std::move(h), std::move(r), std::move(rep), std::move(log)};
  });

  std::vector<LrCandidate> cands;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    cands.push_back({grid[k], runs[k].val_report.system_mse});
  }
  const std::size_t best = SelectLr(cands);
  DeferralModels out{runs[best].predictor, runs[best].scorer, grid[best], runs[best].val_report,
                     cands, std::nullopt, std::nullopt, {}, {}};
  for (auto& r : runs) out.log.insert(out.log.end(), r.log.begin(), r.log.end());
  return out;
}

DeferralModels TrainScorer(const LinearModel& fixed_predictor, const Dataset& train,
                           const Dataset& val, const Eigen::MatrixXd& expert_train,
                           const Eigen::MatrixXd& expert_val, const TrainConfig& config) {
  config.Validate();
  CheckExpertShapes(train, val, expert_train, expert_val);
  const Index n_e = expert_train.cols();
  CheckBaseCosts(config, n_e);
  if (fixed_predictor.in_dim() != train.dims() || fixed_predictor.out_dim() != 1) {
    throw StructuralError("fixed predictor shape does not match the data");
  }
  const std::uint64_t h_hash = fixed_predictor.Hash();
  const RegressionLoss loss = MakeLoss(config, train);
  const std::vector<double> alpha =
      ScaleBaseCosts(FirstBaseCosts(config, n_e), train, loss.exponent());
  const MatrixXd train_costs = CostTable(expert_train, train.targets, loss, alpha);
  const MatrixXd val_costs = CostTable(expert_val, val.targets, loss, alpha);
  const LinearModel r0 =
      LinearModel::Init(train.dims(), n_e + 1, DeriveSeed(config.seed, "r/init"));
  const std::uint64_t shuffle = DeriveSeed(config.seed, "stage2/shuffle");
  const auto& grid = config.lr_grid;

  auto runs = MapCandidates<ScorerRun>(grid.size(), config.workers, [&](std::size_t k) {
    AdamConfig adam = config.adam;
    adam.lr = grid[k];
    LinearModel r = r0;
    AdamState r_state(static_cast<Index>(r.num_parameters()), adam);
    VectorXd r_params = r.Flatten();
    std::vector<LogRecord> log;
    auto step = [&](const std::vector<Index>& rows) {
      const MatrixXd x = train.features(rows, Eigen::all);
      const VectorXd y = train.targets(rows);
      const MatrixXd c = train_costs(rows, Eigen::all);
      GradientBundle g = GradTwoStage(r, fixed_predictor, loss, config.surrogate,
                                      BatchView{x, y, c}, config.grad);
      r_state.Step(r_params, g.Flatten());
      r.Unflatten(r_params);
      return g.loss;
    };
    auto validate = [&] {
      LogRecord rec;
      rec.loss = TwoStageObjective(r, fixed_predictor, loss, config.surrogate,
                                   BatchView{val.features, val.targets, val_costs});
      const SystemReport rep = EvaluateSystem(fixed_predictor, r, expert_val, val, false);
      rec.system_mse = rep.system_mse;
      rec.deferral_ratios = rep.deferral_ratios;
      return rec;
    };
    RunEpochs(config, train.size(), shuffle, "stage2", grid[k], step, validate, log);
    SystemReport rep = EvaluateSystem(fixed_predictor, r, expert_val, val, true);
    rep.seed = config.seed;
    return ScorerRun{fixed_predictor, std::move(r), std::move(rep), std::move(log)};
  });
  if (fixed_predictor.Hash() != h_hash) {
    throw StructuralError("stage 2 modified the frozen predictor");
  }

  std::vector<LrCandidate> cands;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    cands.push_back({grid[k], runs[k].val_report.system_mse});
  }
  const std::size_t best = SelectLr(cands);
  DeferralModels out{fixed_predictor, runs[best].scorer, grid[best], runs[best].val_report,
                     cands, std::nullopt, runs[best].val_report.base_model_mse, {}, {}};
  for (auto& r : runs) out.log.insert(out.log.end(), r.log.begin(), r.log.end());
  return out;
}

DeferralModels TrainTwoStage(const Dataset& train, const Dataset& val,
                             const Eigen::MatrixXd& expert_train,
                             const Eigen::MatrixXd& expert_val, const TrainConfig& config) {
  RegressionFit stage1 = TrainLinearRegression(train, val, config);
  const std::uint64_t h_hash = stage1.model.Hash();
  DeferralModels out = TrainScorer(stage1.model, train, val, expert_train, expert_val, config);
  if (out.predictor.Hash() != h_hash) {
    throw StructuralError("two-stage predictor differs from the stage-1 model");
  }
  out.stage1_lr = stage1.lr;
  out.base_model_val_mse = stage1.val_mse;
  out.stage1_candidates = std::move(stage1.candidates);
  std::vector<LogRecord> log = std::move(stage1.log);
  log.insert(log.end(), out.log.begin(), out.log.end());
  out.log = std::move(log);
  return out;
}

}  // namespace deferral

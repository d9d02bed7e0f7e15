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


// Numerical certification of the excess-error bounds for the deferral
// surrogates on finite instances: a finite set of points with marginal
// weights, a shared finite label set, per-point conditional label
// distributions and per-expert cost tables. On such instances every
// conditional risk, infimum and best-in-class error is computable exactly
// (or by a 1-D / small convex minimization), so each inequality can be
// checked directly.
//
// Hypothesis classes default to "all measurable": the predictor value and
// the score vector at each point are free, so best-in-class errors equal
// the weighted sum of pointwise infima and minimizability gaps vanish.

#ifndef DEFERRAL_THEORY_H_
#define DEFERRAL_THEORY_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deferral/loss_core.h"

namespace deferral {

struct FiniteInstance {
  std::vector<double> weights;  // m marginal weights
  std::vector<double> labels;   // K label values
  // conditionals[i][k] = P(y = labels[k] | x_i)
  std::vector<std::vector<double>> conditionals;
  // costs[i][j][k] = c_{j+1}(x_i, labels[k])
  std::vector<std::vector<std::vector<double>>> costs;
  RegressionLoss loss = RegressionLoss::Squared(1.0);
  // Upper bounds on each expert's cost.
  std::vector<double> cost_bounds;

  std::size_t num_points() const { return weights.size(); }
  std::size_t num_labels() const { return labels.size(); }
  std::size_t num_experts() const { return cost_bounds.size(); }
  double loss_bound() const { return loss.bound(); }
  double label_min() const;
  double label_max() const;

  // Throws ConfigError unless weights and conditionals are non-negative
  // and sum to 1 within 1e-12, shapes agree, every cost is non-negative and
  // at most its bound, and the loss bound covers the label range.
  void Validate() const;
};

// Per-expert maxima of the cost table (the tightest valid bounds).
std::vector<double> TightCostBounds(const FiniteInstance& instance);

struct GeneratorOptions {
  std::vector<std::size_t> point_counts = {2, 3, 4};
  std::vector<std::size_t> label_counts = {2, 3};
  std::vector<std::size_t> expert_counts = {1, 2, 3};
  double max_cost = 5.0;
  LossKind loss_kind = LossKind::kSquared;
  double loss_exponent = 2.0;
  // c_j(x, y) drawn once per (x, j) and shared by every label.
  bool label_independent_costs = false;
  // Declared cost bounds = tight bounds times this factor (>= 1).
  double cost_bound_scale = 1.0;
};

// Seeded instance: sizes picked uniformly from the option lists, labels
// sorted U(-2, 2), weights and conditionals Dirichlet(1), costs
// U[0, max_cost], loss bound (label range)^p.
FiniteInstance GenerateInstance(std::uint64_t seed, const GeneratorOptions& options = {});

struct RegressionInfimum {
  double value;      // inf_h E_{y|x} L(h, y)
  double minimizer;  // an h attaining it
};

// Squared loss: conditional variance at the conditional mean. Absolute
// loss: exact minimum over label points (a weighted median). Other p:
// golden-section search on [min Y, max Y] to 1e-10.
RegressionInfimum BayesConditionalRegression(const FiniteInstance& instance,
                                             std::size_t point);
// Golden-section search for any loss kind (independent path used by tests).
RegressionInfimum NumericConditionalRegression(const FiniteInstance& instance,
                                               std::size_t point,
                                               double tolerance = 1e-10);

// Conditional expected loss of predicting value at a point.
double ConditionalLoss(const FiniteInstance& instance, std::size_t point, double value);
// Conditional expected cost of expert j (1-based).
double ConditionalCost(const FiniteInstance& instance, std::size_t point, std::size_t expert);

// inf_r sum_j w_j l(r, j) for non-negative weights w_0..w_{n_e}.
// Comp-sum logistic: S * H2(w / S) with S = sum w (Shannon entropy in
// bits). A margin surrogate needs two weights: inf_u w_0 Phi(u) + w_1
// Phi(-u), in closed form per kind. Throws ConfigError on negative or
// non-finite weights.
double ConditionalSurrogateInfimum(std::span<const double> weights,
                                   const Surrogate& surrogate);

// Same infimum by numeric minimization: damped Newton with multi-start for
// the comp-sum logistic, golden-section over u in [-60, 60] for margins.
double NumericSurrogateInfimum(std::span<const double> weights, const Surrogate& surrogate,
                               std::size_t starts = 5, std::uint64_t seed = 0);

// Candidate (h, r) tables: predictor value per point and, per point, the
// n_e + 1 scores (multi-expert) or a single score (single-expert margin
// form, defer iff score <= 0).
struct Candidate {
  std::vector<double> predictor;
  std::vector<std::vector<double>> scores;
};

struct PointRisk {
  double weight = 0.0;
  double predictor_risk = 0.0;   // E L(h(x), y)
  double regression_infimum = 0.0;
  std::vector<double> expected_costs;
  double deferral_risk = 0.0;       // candidate, full deferral loss
  double best_deferral_risk = 0.0;  // min(regression infimum, min_j E c_j)
  double surrogate_risk = 0.0;
  double best_surrogate_risk = 0.0;
  // Fixed-predictor (two-stage) quantities.
  double fixed_deferral_risk = 0.0;
  double best_fixed_deferral_risk = 0.0;
  double fixed_surrogate_risk = 0.0;
  double best_fixed_surrogate_risk = 0.0;
};

struct RiskReport {
  std::vector<PointRisk> points;
  // Deferral loss: candidate error, best-in-class error, minimizability gap.
  double deferral_error = 0.0;
  double best_deferral_error = 0.0;
  double deferral_gap = 0.0;
  // Single-stage surrogate.
  double surrogate_error = 0.0;
  double best_surrogate_error = 0.0;
  double surrogate_gap = 0.0;
  // Regression loss of the predictor alone.
  double regression_error = 0.0;
  double best_regression_error = 0.0;
  // Fixed-predictor deferral loss and two-stage surrogate.
  double fixed_deferral_error = 0.0;
  double best_fixed_deferral_error = 0.0;
  double fixed_surrogate_error = 0.0;
  double best_fixed_surrogate_error = 0.0;

  double DeferralEstimation() const { return deferral_error - best_deferral_error; }
  double SurrogateEstimation() const { return surrogate_error - best_surrogate_error; }
  double RegressionEstimation() const { return regression_error - best_regression_error; }
  double FixedDeferralEstimation() const {
    return fixed_deferral_error - best_fixed_deferral_error;
  }
  double FixedSurrogateEstimation() const {
    return fixed_surrogate_error - best_fixed_surrogate_error;
  }
};

// All conditional and aggregate risks of a candidate over the all-measurable
// classes. The comp-sum logistic is used for multi-expert candidates; a
// single-score candidate needs a margin surrogate. Candidate risks are
// expectations over labels of the loss_core per-sample functions.
RiskReport EvaluateEstimationErrors(const FiniteInstance& instance, const Candidate& candidate,
                                    const Surrogate& surrogate);

// min over all (n_e + 1)^m decision assignments of sum_i w_i * risk_i(d_i),
// with the regression infimum at points that keep the prediction.
double EnumerateBestDeferralRisk(const FiniteInstance& instance);

// Pointwise-optimal candidates: h at the conditional regression minimizer,
// comp-sum scores at log(weights) (zero weights mapped to -1000), margin
// score at the closed-form minimizer clamped to [-40, 40].
Candidate OptimalCandidate(const FiniteInstance& instance);
Candidate OptimalSingleExpertCandidate(const FiniteInstance& instance, const MarginLoss& phi);
// Random candidates: h uniform on the label range (pointwise optimal with
// probability 1/4), scores uniform on [-4, 4].
Candidate RandomCandidate(const FiniteInstance& instance, std::uint64_t seed);
Candidate RandomSingleExpertCandidate(const FiniteInstance& instance, std::uint64_t seed);

// Printed: the constants exactly as stated with each bound. Derived: the
// exponential and logistic single-expert forms use beta = sqrt(2) (from
// Gamma(t) = sqrt(2 t)) in place of the printed 1/2.
enum class ConstantMode { kPrinted, kDerived };

struct BoundOptions {
  ConstantMode constants = ConstantMode::kPrinted;
  // Multiplies every Gamma-bar; values below 1 are a sensitivity check.
  double gamma_scale = 1.0;
  // A check holds when rhs - lhs >= -tolerance.
  double tolerance = 1e-6;
};

// max{t, sqrt(2 n_e) (lbar + sum cbar)^{1/2} t^{1/2}}.
double GammaBarSingleStage(double t, std::size_t num_experts, double loss_bound,
                           double cost_bound_sum, const BoundOptions& options);
// sqrt(2 n_e) (lbar + sum cbar)^{1/2} t^{1/2}.
double GammaBarTwoStage(double t, std::size_t num_experts, double loss_bound,
                        double cost_bound_sum, const BoundOptions& options);
// Single expert: exp/log max{t, 1/2 (lbar + cbar)^{1/2} t^{1/2}}, quad
// max{t, (lbar + cbar)^{1/2} t^{1/2}}, hinge/sigmoid/rho t. The two-stage
// variant drops the max{t, .}.
double GammaBarSingleExpert(MarginKind kind, double t, double loss_bound, double cost_bound,
                            bool two_stage, const BoundOptions& options);

struct BoundCheck {
  std::string name;
  double lhs = 0.0;
  double t = 0.0;         // surrogate estimation error fed to Gamma-bar
  double extra = 0.0;     // additive regression term, when present
  double rhs = 0.0;
  double slack = 0.0;     // rhs - lhs
  bool holds = true;
};

// Joint single-stage bound with the comp-sum logistic.
BoundCheck CheckSingleStageBound(const FiniteInstance& instance, const Candidate& candidate,
                                 const BoundOptions& options = {});

struct TwoStageChecks {
  BoundCheck fixed_predictor;  // second stage alone, h fixed
  BoundCheck full;             // adds the first-stage regression term
};
TwoStageChecks CheckTwoStageBounds(const FiniteInstance& instance, const Candidate& candidate,
                                   const BoundOptions& options = {});

struct SingleExpertChecks {
  BoundCheck single_stage;
  BoundCheck two_stage;
};
// Requires exactly one expert and single-score candidates.
SingleExpertChecks CheckSingleExpertBounds(const FiniteInstance& instance,
                                           const Candidate& candidate, const MarginLoss& phi,
                                           const BoundOptions& options = {});

// Conditional regret reduction for the comp-sum logistic at a simplex
// point p and scores r:
//   lhs = sum_j p_j 1{argmax r != j} - (1 - max_j p_j)
//   rhs = sqrt(2 (sum_j p_j l_log(r, j) - H2(p)))
struct RegretReduction {
  double lhs;
  double rhs;
};
RegretReduction CompSumRegretReduction(std::span<const double> p,
                                       std::span<const double> scores);

// Restricted (finite) hypothesis classes: explicit predictor and scorer
// tables. Best-in-class errors are minima over all pairs; minimizability
// gaps are best-in-class minus the pointwise infima.
struct HypothesisClass {
  std::vector<std::vector<double>> predictors;              // each m values
  std::vector<std::vector<std::vector<double>>> scorers;    // each m x (n_e+1)
};

struct RestrictedReport {
  double best_deferral_error = 0.0;
  double deferral_gap = 0.0;
  double best_surrogate_error = 0.0;
  double surrogate_gap = 0.0;
  // One check per (predictor, scorer) pair, predictor-major order:
  //   E_def - E*_def(H,R) + M_def <= Gamma-bar(E_sur - E*_sur(H,R) + M_sur)
  std::vector<BoundCheck> checks;
};
RestrictedReport CheckRestrictedClass(const FiniteInstance& instance,
                                      const HypothesisClass& hypotheses,
                                      const BoundOptions& options = {});

// Randomized certification sweep.
struct SweepConfig {
  std::size_t num_instances = 100;
  std::size_t candidates_per_instance = 20;
  std::uint64_t seed = 0;
  bool single_stage = true;
  bool two_stage = true;
  bool single_expert = true;
  // Adds the pointwise-optimal candidate to each instance's random ones.
  bool include_optimal = false;
  GeneratorOptions generator;
  BoundOptions bounds;
  std::size_t workers = 1;
};

struct Verdict {
  std::string check;  // "single_stage", "two_stage_fixed", "two_stage",
                      // "single_expert/<phi>", "single_expert_two_stage/<phi>"
  std::size_t instance = 0;
  std::uint64_t instance_seed = 0;
  std::size_t candidate = 0;
  double lhs = 0.0;
  double t = 0.0;
  double rhs = 0.0;
  double slack = 0.0;
  bool holds = true;
};

struct CheckSummary {
  std::string check;
  std::size_t count = 0;
  std::size_t violations = 0;
  double min_slack = 0.0;
  double median_slack = 0.0;
};

struct SweepResult {
  std::vector<Verdict> verdicts;     // instance-major, deterministic order
  std::vector<CheckSummary> summary;  // sorted by check name
  bool AllHold() const;
};

SweepResult RunSweep(const SweepConfig& config);

std::string VerdictsToJsonLines(const std::vector<Verdict>& verdicts);
std::string SummaryToText(const SweepResult& result);

}  // namespace deferral

#endif  // DEFERRAL_THEORY_H_

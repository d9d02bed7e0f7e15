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

// Losses for regression with deferral to multiple experts.
//
// Index convention: decision 0 means "predict with h", decision j in
// 1..n_e means "defer to expert j". Score vectors therefore have n_e + 1
// entries and cost vectors have n_e entries (cost of expert j is costs[j-1]).
//
// Two logarithm bases are in play. The comp-sum logistic loss is
//   log2(sum_k exp(r_k - r_j)),
// which upper-bounds the 0-1 loss because log2(2) = 1 at a tie. The margin
// logistic loss is likewise taken in base 2, log2(1 + exp(-u)), so that
// Phi(0) = 1 and the single-expert surrogate dominates the deferral loss.

#ifndef DEFERRAL_LOSS_CORE_H_
#define DEFERRAL_LOSS_CORE_H_

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace deferral {

enum class LossKind { kSquared, kAbsolute, kPower };

// "squared", "absolute", "power".
std::string_view LossKindName(LossKind kind);
LossKind ParseLossKind(std::string_view name);

// L(y', y) = |y' - y|^p with an upper bound l_bar on the declared label range.
class RegressionLoss {
 public:
  static RegressionLoss Squared(double bound);
  static RegressionLoss Absolute(double bound);
  static RegressionLoss Power(double p, double bound);
  // Bound set to (y_max - y_min)^p, the largest loss a prediction inside the
  // label range can incur.
  static RegressionLoss ForLabelRange(LossKind kind, double y_min, double y_max,
                                     double p = 2.0);

  LossKind kind() const { return kind_; }
  double exponent() const { return exponent_; }
  double bound() const { return bound_; }

  double operator()(double prediction, double label) const;
  // d/d prediction. Absolute and p = 1 use sign(prediction - label), which
  // is 0 at the kink.
  double Derivative(double prediction, double label) const;

  // Throws ConfigError unless bound() >= value(y', y) for all y', y in
  // [y_min, y_max].
  void CheckRange(double y_min, double y_max) const;

 private:
  RegressionLoss(LossKind kind, double exponent, double bound);

  LossKind kind_;
  double exponent_;
  double bound_;
};

using Features = std::span<const double>;
using ExpertFn = std::function<double(Features)>;

// c_j(x, y) = L(g_j(x), y) + alpha_j.
class CostModel {
 public:
  // Cost bounds default to loss.bound() + alpha_j.
  CostModel(std::vector<ExpertFn> experts, std::vector<double> base_costs,
            RegressionLoss loss);
  CostModel(std::vector<ExpertFn> experts, std::vector<double> base_costs,
            RegressionLoss loss, std::vector<double> cost_bounds);

  std::size_t num_experts() const { return experts_.size(); }
  const RegressionLoss& loss() const { return loss_; }
  const std::vector<double>& base_costs() const { return base_costs_; }
  const std::vector<double>& cost_bounds() const { return cost_bounds_; }

  // expert is 1-based. Throws StructuralError when out of range.
  double Cost(std::size_t expert, Features x, double y) const;
  std::vector<double> Costs(Features x, double y) const;
  double ExpertPrediction(std::size_t expert, Features x) const;

 private:
  std::vector<ExpertFn> experts_;
  std::vector<double> base_costs_;
  RegressionLoss loss_;
  std::vector<double> cost_bounds_;
};

// argmax_j scores[j], smallest index on ties (so no-deferral wins ties).
std::size_t ArgmaxDecision(std::span<const double> scores);

// Single-expert decision rule: defer iff r(x) <= 0.
inline bool DefersSingle(double r) { return r <= 0.0; }

enum class MarginKind { kExp, kLog, kQuad, kHinge, kSigmoid, kRhoMargin };

std::string_view MarginKindName(MarginKind kind);
// Accepts the names printed by MarginKindName ("exp", "log", ...).
MarginKind ParseMarginKind(std::string_view name);
inline constexpr MarginKind kAllMarginKinds[] = {
    MarginKind::kExp,   MarginKind::kLog,     MarginKind::kQuad,
    MarginKind::kHinge, MarginKind::kSigmoid, MarginKind::kRhoMargin};

// Non-increasing Phi with Phi(u) >= 1{u <= 0}.
class MarginLoss {
 public:
  // Arguments to the exponential are clamped to [-kExpClamp, kExpClamp];
  // Clamps() reports when that happened.
  static constexpr double kExpClamp = 50.0;

  static MarginLoss Exp() { return MarginLoss(MarginKind::kExp, 0.0); }
  static MarginLoss Log() { return MarginLoss(MarginKind::kLog, 0.0); }
  static MarginLoss Quad() { return MarginLoss(MarginKind::kQuad, 0.0); }
  static MarginLoss Hinge() { return MarginLoss(MarginKind::kHinge, 0.0); }
  static MarginLoss Sigmoid(double k);
  static MarginLoss RhoMargin(double rho);
  // Default parameters k = 1, rho = 1 for the parametric kinds.
  static MarginLoss OfKind(MarginKind kind);

  MarginKind kind() const { return kind_; }
  double parameter() const { return parameter_; }

  double operator()(double u) const;
  // Left derivative at the hinge and rho-margin kinks.
  double Derivative(double u) const;
  bool Clamps(double u) const;

 private:
  MarginLoss(MarginKind kind, double parameter)
      : kind_(kind), parameter_(parameter) {}

  MarginKind kind_;
  double parameter_;
};

// log2(sum_k exp(s_k - s_j)), evaluated with a max shift.
double CompSumLogistic(std::span<const double> scores, std::size_t j);

// The multi-class surrogate l(r, x, j). For a margin loss the score vector
// must have two entries and l(r, x, 0) = Phi(s_0 - s_1),
// l(r, x, 1) = Phi(s_1 - s_0).
class Surrogate {
 public:
  static Surrogate CompSumLogistic() { return Surrogate(); }
  static Surrogate Margin(MarginLoss phi) { return Surrogate(phi); }

  bool is_comp_sum() const { return !is_margin_; }
  const MarginLoss& margin() const { return margin_; }
  std::string_view name() const;

  double Component(std::span<const double> scores, std::size_t j) const;
  // Adds weight * d l(r, x, j) / d scores into grad.
  void AccumulateComponentGrad(std::span<const double> scores, std::size_t j,
                               double weight, std::span<double> grad) const;

 private:
  Surrogate() : is_margin_(false), margin_(MarginLoss::Exp()) {}
  explicit Surrogate(MarginLoss phi) : is_margin_(true), margin_(phi) {}

  bool is_margin_;
  MarginLoss margin_;
};

// Everything a deferral loss depends on at one (x, y).
struct DeferralTerms {
  double predictor_loss;          // L(h(x), y)
  std::span<const double> costs;  // c_1(x, y) .. c_{n_e}(x, y)
};

double DeferralLossForDecision(std::size_t decision, const DeferralTerms& t);
double DeferralLoss(std::span<const double> scores, const DeferralTerms& t);
// Indicator expansion of the deferral loss; equals DeferralLossForDecision.
double ExpandDeferralLoss(std::size_t decision, const DeferralTerms& t);

// Weights on l(r, x, j) shared by the single- and two-stage surrogates:
// w_0 = sum_j c_j, w_j = L + sum_{j' != j} c_j'. Writes n_e + 1 entries.
void SurrogateWeights(const DeferralTerms& t, std::span<double> weights);

double SingleStageSurrogate(std::span<const double> scores,
                            const DeferralTerms& t, const Surrogate& surrogate);
// Same as SingleStageSurrogate without the -(n_e - 1) L term.
double TwoStageSurrogate(std::span<const double> scores,
                         const DeferralTerms& t, const Surrogate& surrogate);

// Value and local derivatives of the single-stage surrogate: d/d scores is
// written into score_grad and d/d L(h(x), y) into *predictor_loss_grad.
// The two-stage surrogate has the same score gradient.
double SingleStageSurrogateWithGrad(std::span<const double> scores,
                                    const DeferralTerms& t,
                                    const Surrogate& surrogate,
                                    std::span<double> score_grad,
                                    double* predictor_loss_grad);

// Single-expert forms with a scalar scorer r(x).
double SingleExpertDeferralLoss(double predictor_loss, double cost, double r);
// c Phi(r) + L Phi(-r).
double SingleExpertSurrogate(double predictor_loss, double cost, double r,
                             const MarginLoss& phi);

// Function-level view of a deferral system: predictor h, scorer r(x, .)
// and a cost model. Used by the system-level overloads below.
struct DeferralSystem {
  std::function<double(Features)> predictor;
  std::function<std::vector<double>(Features)> scorer;
  const CostModel* costs = nullptr;
};

double DeferralLoss(const DeferralSystem& system, Features x, double y);
double ExpandDeferralLoss(const DeferralSystem& system, Features x, double y);
double SingleStageSurrogate(const DeferralSystem& system,
                            const Surrogate& surrogate, Features x, double y);
double TwoStageSurrogate(const DeferralSystem& system,
                         const Surrogate& surrogate, Features x, double y);
// Deferral loss with h frozen; numerically the same as DeferralLoss.
double FixedPredictorDeferralLoss(const DeferralSystem& system, Features x,
                                  double y);

}  // namespace deferral

#endif  // DEFERRAL_LOSS_CORE_H_

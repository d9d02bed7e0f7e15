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

#include "deferral/loss_core.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "deferral/errors.h"

namespace deferral {
namespace {

constexpr double kLn2 = std::numbers::ln2;

double LogSumExp(std::span<const double> s) {
  const double m = *std::max_element(s.begin(), s.end());
  double acc = 0.0;
  for (double v : s) acc += std::exp(v - m);
  return m + std::log(acc);
}

// log(1 + exp(z)) without overflow.
double Softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double LogisticFn(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void CheckShapes(std::span<const double> scores, const DeferralTerms& t) {
  if (scores.size() != t.costs.size() + 1) {
    throw StructuralError("score vector has " + std::to_string(scores.size()) +
                          " entries but the cost model has " +
                          std::to_string(t.costs.size()) + " experts");
  }
}

double SumCosts(const DeferralTerms& t) {
  return std::accumulate(t.costs.begin(), t.costs.end(), 0.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// RegressionLoss

RegressionLoss::RegressionLoss(LossKind kind, double exponent, double bound)
    : kind_(kind), exponent_(exponent), bound_(bound) {
  if (!(exponent >= 1.0) || !std::isfinite(exponent)) {
    throw ConfigError("regression loss exponent must be >= 1");
  }
  if (!(bound > 0.0) || !std::isfinite(bound)) {
    throw ConfigError("regression loss bound must be positive and finite");
  }
}

RegressionLoss RegressionLoss::Squared(double bound) {
  return RegressionLoss(LossKind::kSquared, 2.0, bound);
}

RegressionLoss RegressionLoss::Absolute(double bound) {
  return RegressionLoss(LossKind::kAbsolute, 1.0, bound);
}

RegressionLoss RegressionLoss::Power(double p, double bound) {
  return RegressionLoss(LossKind::kPower, p, bound);
}

RegressionLoss RegressionLoss::ForLabelRange(LossKind kind, double y_min,
                                             double y_max, double p) {
  if (!(y_max > y_min)) throw ConfigError("label range must satisfy y_min < y_max");
  const double exponent = kind == LossKind::kSquared    ? 2.0
                          : kind == LossKind::kAbsolute ? 1.0
                                                        : p;
  return RegressionLoss(kind, exponent, std::pow(y_max - y_min, exponent));
}

double RegressionLoss::operator()(double prediction, double label) const {
  const double d = prediction - label;
  switch (kind_) {
    case LossKind::kSquared:
      return d * d;
    case LossKind::kAbsolute:
      return std::abs(d);
    case LossKind::kPower:
      return std::pow(std::abs(d), exponent_);
  }
  return 0.0;
}

double RegressionLoss::Derivative(double prediction, double label) const {
  const double d = prediction - label;
  const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
  switch (kind_) {
    case LossKind::kSquared:
      return 2.0 * d;
    case LossKind::kAbsolute:
      return sign;
    case LossKind::kPower:
      if (exponent_ == 1.0) return sign;
      return exponent_ * std::pow(std::abs(d), exponent_ - 1.0) * sign;
  }
  return 0.0;
}

void RegressionLoss::CheckRange(double y_min, double y_max) const {
  const double worst = std::pow(std::abs(y_max - y_min), exponent_);
  if (bound_ < worst) {
    throw ConfigError("loss bound " + std::to_string(bound_) +
                      " is below the worst-case loss " + std::to_string(worst) +
                      " on the label range");
  }
}

// ---------------------------------------------------------------------------
// CostModel

CostModel::CostModel(std::vector<ExpertFn> experts,
                     std::vector<double> base_costs, RegressionLoss loss)
    : CostModel(std::move(experts), base_costs, loss, {}) {}

CostModel::CostModel(std::vector<ExpertFn> experts,
                     std::vector<double> base_costs, RegressionLoss loss,
                     std::vector<double> cost_bounds)
    : experts_(std::move(experts)),
      base_costs_(std::move(base_costs)),
      loss_(loss),
      cost_bounds_(std::move(cost_bounds)) {
  if (experts_.empty()) throw ConfigError("cost model needs at least one expert");
  if (base_costs_.size() != experts_.size()) {
    throw StructuralError("one base cost per expert is required");
  }
  for (double a : base_costs_) {
    if (!(a >= 0.0) || !std::isfinite(a)) {
      throw ConfigError("base costs must be finite and non-negative");
    }
  }
  if (cost_bounds_.empty()) {
    for (double a : base_costs_) cost_bounds_.push_back(loss_.bound() + a);
  }
  if (cost_bounds_.size() != experts_.size()) {
    throw StructuralError("one cost bound per expert is required");
  }
  for (double c : cost_bounds_) {
    if (!(c > 0.0)) throw ConfigError("cost bounds must be positive");
  }
}

double CostModel::ExpertPrediction(std::size_t expert, Features x) const {
  if (expert == 0 || expert > experts_.size()) {
    throw StructuralError("expert index " + std::to_string(expert) +
                          " out of range 1.." + std::to_string(experts_.size()));
  }
  return experts_[expert - 1](x);
}

double CostModel::Cost(std::size_t expert, Features x, double y) const {
  return loss_(ExpertPrediction(expert, x), y) + base_costs_[expert - 1];
}

std::vector<double> CostModel::Costs(Features x, double y) const {
  std::vector<double> out(experts_.size());
  for (std::size_t j = 1; j <= experts_.size(); ++j) out[j - 1] = Cost(j, x, y);
  return out;
}

// ---------------------------------------------------------------------------
// Decisions and margin losses

std::size_t ArgmaxDecision(std::span<const double> scores) {
  if (scores.empty()) throw StructuralError("empty score vector");
  std::size_t best = 0;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    if (scores[j] > scores[best]) best = j;
  }
  return best;
}

std::string_view MarginKindName(MarginKind kind) {
  switch (kind) {
    case MarginKind::kExp:
      return "exp";
    case MarginKind::kLog:
      return "log";
    case MarginKind::kQuad:
      return "quad";
    case MarginKind::kHinge:
      return "hinge";
    case MarginKind::kSigmoid:
      return "sigmoid";
    case MarginKind::kRhoMargin:
      return "rho_margin";
  }
  return "?";
}

std::string_view LossKindName(LossKind kind) {
  switch (kind) {
    case LossKind::kSquared:
      return "squared";
    case LossKind::kAbsolute:
      return "absolute";
    case LossKind::kPower:
      return "power";
  }
  return "unknown";
}

LossKind ParseLossKind(std::string_view name) {
  for (LossKind k : {LossKind::kSquared, LossKind::kAbsolute, LossKind::kPower}) {
    if (LossKindName(k) == name) return k;
  }
  throw ConfigError("unknown regression loss '" + std::string(name) + "'");
}

MarginKind ParseMarginKind(std::string_view name) {
  for (MarginKind k : kAllMarginKinds) {
    if (MarginKindName(k) == name) return k;
  }
  throw ConfigError("unknown margin loss '" + std::string(name) + "'");
}

MarginLoss MarginLoss::Sigmoid(double k) {
  if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("sigmoid loss needs k > 0");
  return MarginLoss(MarginKind::kSigmoid, k);
}

MarginLoss MarginLoss::RhoMargin(double rho) {
  if (!(rho > 0.0) || !std::isfinite(rho)) throw ConfigError("rho-margin loss needs rho > 0");
  return MarginLoss(MarginKind::kRhoMargin, rho);
}

MarginLoss MarginLoss::OfKind(MarginKind kind) {
  switch (kind) {
    case MarginKind::kSigmoid:
      return Sigmoid(1.0);
    case MarginKind::kRhoMargin:
      return RhoMargin(1.0);
    default:
      return MarginLoss(kind, 0.0);
  }
}

double MarginLoss::operator()(double u) const {
  switch (kind_) {
    case MarginKind::kExp:
      return std::exp(-std::clamp(u, -kExpClamp, kExpClamp));
    case MarginKind::kLog:
      return Softplus(-u) / kLn2;
    case MarginKind::kQuad: {
      const double m = std::max(1.0 - u, 0.0);
      return m * m;
    }
    case MarginKind::kHinge:
      return std::max(1.0 - u, 0.0);
    case MarginKind::kSigmoid:
      return 1.0 - std::tanh(parameter_ * u);
    case MarginKind::kRhoMargin:
      return std::min(1.0, std::max(0.0, 1.0 - u / parameter_));
  }
  return 0.0;
}

double MarginLoss::Derivative(double u) const {
  switch (kind_) {
    case MarginKind::kExp:
      if (u < -kExpClamp || u > kExpClamp) return 0.0;
      return -std::exp(-u);
    case MarginKind::kLog:
      return -LogisticFn(-u) / kLn2;
    case MarginKind::kQuad:
      return u < 1.0 ? -2.0 * (1.0 - u) : 0.0;
    case MarginKind::kHinge:
      return u <= 1.0 ? -1.0 : 0.0;
    case MarginKind::kSigmoid: {
      const double t = std::tanh(parameter_ * u);
      return -parameter_ * (1.0 - t * t);
    }
    case MarginKind::kRhoMargin:
      return (u > 0.0 && u <= parameter_) ? -1.0 / parameter_ : 0.0;
  }
  return 0.0;
}

bool MarginLoss::Clamps(double u) const {
  return kind_ == MarginKind::kExp && (u < -kExpClamp || u > kExpClamp);
}

double CompSumLogistic(std::span<const double> scores, std::size_t j) {
  if (j >= scores.size()) throw StructuralError("comp-sum label out of range");
  return (LogSumExp(scores) - scores[j]) / kLn2;
}

std::string_view Surrogate::name() const {
  return is_margin_ ? MarginKindName(margin_.kind()) : "comp_sum_logistic";
}

double Surrogate::Component(std::span<const double> scores, std::size_t j) const {
  if (!is_margin_) return deferral::CompSumLogistic(scores, j);
  if (scores.size() != 2 || j > 1) {
    throw StructuralError("margin surrogates need exactly two scores (one expert)");
  }
  const double u = scores[0] - scores[1];
  return j == 0 ? margin_(u) : margin_(-u);
}

void Surrogate::AccumulateComponentGrad(std::span<const double> scores,
                                        std::size_t j, double weight,
                                        std::span<double> grad) const {
  if (!is_margin_) {
    const double lse = LogSumExp(scores);
    for (std::size_t k = 0; k < scores.size(); ++k) {
      const double p = std::exp(scores[k] - lse);
      grad[k] += weight * (p - (k == j ? 1.0 : 0.0)) / kLn2;
    }
    return;
  }
  if (scores.size() != 2 || j > 1) {
    throw StructuralError("margin surrogates need exactly two scores (one expert)");
  }
  const double u = j == 0 ? scores[0] - scores[1] : scores[1] - scores[0];
  const double d = weight * margin_.Derivative(u);
  grad[j] += d;
  grad[1 - j] -= d;
}

// ---------------------------------------------------------------------------
// Deferral losses

double DeferralLossForDecision(std::size_t decision, const DeferralTerms& t) {
  if (decision == 0) return t.predictor_loss;
  if (decision > t.costs.size()) {
    throw StructuralError("decision " + std::to_string(decision) +
                          " has no matching expert cost");
  }
  return t.costs[decision - 1];
}

double DeferralLoss(std::span<const double> scores, const DeferralTerms& t) {
  CheckShapes(scores, t);
  return DeferralLossForDecision(ArgmaxDecision(scores), t);
}

double ExpandDeferralLoss(std::size_t decision, const DeferralTerms& t) {
  const std::size_t n_e = t.costs.size();
  if (decision > n_e) {
    throw StructuralError("decision " + std::to_string(decision) +
                          " has no matching expert cost");
  }
  const double total = SumCosts(t);
  double value = decision != 0 ? total : 0.0;
  for (std::size_t j = 1; j <= n_e; ++j) {
    if (decision != j) value += t.predictor_loss + (total - t.costs[j - 1]);
  }
  value -= static_cast<double>(n_e - 1) * (t.predictor_loss + total);
  return value;
}

void SurrogateWeights(const DeferralTerms& t, std::span<double> weights) {
  const double total = SumCosts(t);
  weights[0] = total;
  for (std::size_t j = 1; j <= t.costs.size(); ++j) {
    weights[j] = t.predictor_loss + (total - t.costs[j - 1]);
  }
}

double TwoStageSurrogate(std::span<const double> scores, const DeferralTerms& t,
                         const Surrogate& surrogate) {
  CheckShapes(scores, t);
  const double total = SumCosts(t);
  double value = total * surrogate.Component(scores, 0);
  for (std::size_t j = 1; j <= t.costs.size(); ++j) {
    value += (t.predictor_loss + (total - t.costs[j - 1])) *
             surrogate.Component(scores, j);
  }
  return value;
}

double SingleStageSurrogate(std::span<const double> scores,
                            const DeferralTerms& t, const Surrogate& surrogate) {
  return TwoStageSurrogate(scores, t, surrogate) -
         static_cast<double>(t.costs.size() - 1) * t.predictor_loss;
}

double SingleStageSurrogateWithGrad(std::span<const double> scores,
                                    const DeferralTerms& t,
                                    const Surrogate& surrogate,
                                    std::span<double> score_grad,
                                    double* predictor_loss_grad) {
  CheckShapes(scores, t);
  const std::size_t n = scores.size();
  const std::size_t n_e = t.costs.size();
  std::fill(score_grad.begin(), score_grad.begin() + static_cast<long>(n), 0.0);
  double weights_buf[16];
  std::vector<double> weights_heap;
  std::span<double> weights;
  if (n <= 16) {
    weights = std::span<double>(weights_buf, n);
  } else {
    weights_heap.resize(n);
    weights = weights_heap;
  }
  SurrogateWeights(t, weights);

  double value = 0.0;
  double sum_expert_components = 0.0;
  if (surrogate.is_comp_sum()) {
    const double lse = LogSumExp(scores);
    double weight_total = 0.0;
    for (std::size_t j = 0; j < n; ++j) weight_total += weights[j];
    for (std::size_t j = 0; j < n; ++j) {
      const double component = (lse - scores[j]) / kLn2;
      value += weights[j] * component;
      if (j > 0) sum_expert_components += component;
      const double p = std::exp(scores[j] - lse);
      score_grad[j] = (weight_total * p - weights[j]) / kLn2;
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      const double component = surrogate.Component(scores, j);
      value += weights[j] * component;
      if (j > 0) sum_expert_components += component;
      surrogate.AccumulateComponentGrad(scores, j, weights[j], score_grad);
    }
  }
  const double shift = static_cast<double>(n_e - 1);
  value -= shift * t.predictor_loss;
  if (predictor_loss_grad != nullptr) {
    *predictor_loss_grad = sum_expert_components - shift;
  }
  return value;
}

double SingleExpertDeferralLoss(double predictor_loss, double cost, double r) {
  return DefersSingle(r) ? cost : predictor_loss;
}

double SingleExpertSurrogate(double predictor_loss, double cost, double r,
                             const MarginLoss& phi) {
  return cost * phi(r) + predictor_loss * phi(-r);
}

// ---------------------------------------------------------------------------
// System-level overloads

namespace {

struct Evaluated {
  std::vector<double> scores;
  std::vector<double> costs;
  double predictor_loss;

  DeferralTerms terms() const { return {predictor_loss, costs}; }
};

Evaluated Evaluate(const DeferralSystem& system, Features x, double y) {
  if (system.costs == nullptr) throw StructuralError("deferral system has no cost model");
  Evaluated e;
  e.scores = system.scorer(x);
  e.costs = system.costs->Costs(x, y);
  e.predictor_loss = system.costs->loss()(system.predictor(x), y);
  if (e.scores.size() != e.costs.size() + 1) {
    throw StructuralError("scorer output size does not match n_e + 1");
  }
  return e;
}

}  // namespace

double DeferralLoss(const DeferralSystem& system, Features x, double y) {
  const Evaluated e = Evaluate(system, x, y);
  return DeferralLoss(e.scores, e.terms());
}

double ExpandDeferralLoss(const DeferralSystem& system, Features x, double y) {
  const Evaluated e = Evaluate(system, x, y);
  return ExpandDeferralLoss(ArgmaxDecision(e.scores), e.terms());
}

double SingleStageSurrogate(const DeferralSystem& system,
                            const Surrogate& surrogate, Features x, double y) {
  const Evaluated e = Evaluate(system, x, y);
  return SingleStageSurrogate(e.scores, e.terms(), surrogate);
}

double TwoStageSurrogate(const DeferralSystem& system,
                         const Surrogate& surrogate, Features x, double y) {
  const Evaluated e = Evaluate(system, x, y);
  return TwoStageSurrogate(e.scores, e.terms(), surrogate);
}

double FixedPredictorDeferralLoss(const DeferralSystem& system, Features x,
                                  double y) {
  return DeferralLoss(system, x, y);
}

}  // namespace deferral

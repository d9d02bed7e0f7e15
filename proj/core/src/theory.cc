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


#include "deferral/theory.h"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include <Eigen/Dense>

#include "deferral/errors.h"
#include "deferral/rng.h"
#include "json.hpp"

namespace deferral {
namespace {

constexpr double kLn2 = 0.69314718055994530942;
constexpr double kInvPhi = 0.61803398874989484820;  // 1 / golden ratio
constexpr double kZeroWeightScore = -1000.0;
constexpr double kMarginScoreClamp = 40.0;

void CheckSimplexRow(const std::vector<double>& v, const std::string& what) {
  double sum = 0.0;
  for (double x : v) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError(what + " has a negative entry");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw ConfigError(what + " sums to " + std::to_string(sum) + ", not 1");
  }
}

// Minimizes a unimodal f on [lo, hi]; also compares both endpoints.
template <typename F>
std::pair<double, double> GoldenSection(F&& f, double lo, double hi, double tolerance) {
  double a = lo;
  double b = hi;
  double x1 = b - kInvPhi * (b - a);
  double x2 = a + kInvPhi * (b - a);
  double f1 = f(x1);
  double f2 = f(x2);
  while (b - a > tolerance) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - kInvPhi * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + kInvPhi * (b - a);
      f2 = f(x2);
    }
  }
  std::pair<double, double> best{0.5 * (a + b), f(0.5 * (a + b))};
  for (double x : {lo, hi, x1, x2}) {
    const double v = f(x);
    if (v < best.second) best = {x, v};
  }
  return best;
}

void CheckWeights(std::span<const double> weights) {
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ConfigError("surrogate weights must be finite and non-negative");
    }
  }
}

double EntropyTimesMass(std::span<const double> weights) {
  double s = 0.0;
  for (double w : weights) s += w;
  if (s <= 0.0) return 0.0;
  double h = 0.0;
  for (double w : weights) {
    if (w > 0.0) h -= w * std::log2(w / s);
  }
  return h;
}

// inf_u c Phi(u) + a Phi(-u).
double MarginInfimum(double c, double a, const MarginLoss& phi) {
  switch (phi.kind()) {
    case MarginKind::kExp: {
      if (c > 0.0 && a > 0.0) {
        const double u = 0.5 * std::log(c / a);
        if (std::abs(u) <= MarginLoss::kExpClamp) return 2.0 * std::sqrt(a * c);
      }
      // Optimum lies beyond the clamp: the clamped loss is flat there.
      if (c == 0.0 && a == 0.0) return 0.0;
      const double u = (c >= a) ? MarginLoss::kExpClamp : -MarginLoss::kExpClamp;
      return c * phi(u) + a * phi(-u);
    }
    case MarginKind::kLog: {
      const double s = a + c;
      if (s <= 0.0) return 0.0;
      const double weights[2] = {a, c};
      return EntropyTimesMass(weights);
    }
    case MarginKind::kQuad:
      return (a + c) > 0.0 ? 4.0 * a * c / (a + c) : 0.0;
    case MarginKind::kHinge:
    case MarginKind::kSigmoid:
      return 2.0 * std::min(a, c);
    case MarginKind::kRhoMargin:
      return std::min(a, c);
  }
  return 0.0;
}

// Comp-sum objective in bits: (S * LSE(r) - sum w r) / ln 2.
double CompSumObjective(std::span<const double> w, const Eigen::VectorXd& r) {
  const double m = r.maxCoeff();
  double z = 0.0;
  for (Eigen::Index j = 0; j < r.size(); ++j) z += std::exp(r(j) - m);
  const double lse = m + std::log(z);
  double s = 0.0;
  double dot = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    s += w[j];
    dot += w[j] * r(static_cast<Eigen::Index>(j));
  }
  return (s * lse - dot) / kLn2;
}

// Damped Newton on the comp-sum objective with the score of the largest
// weight pinned at 0.
double NewtonCompSum(std::span<const double> w, Eigen::VectorXd r, std::size_t pinned) {
  const auto k = static_cast<Eigen::Index>(w.size());
  double s = 0.0;
  for (double x : w) s += x;
  r(static_cast<Eigen::Index>(pinned)) = 0.0;
  double f = CompSumObjective(w, r);
  for (int iter = 0; iter < 300; ++iter) {
    const double m = r.maxCoeff();
    Eigen::VectorXd q = (r.array() - m).exp();
    q /= q.sum();
    Eigen::VectorXd g = s * q;
    for (Eigen::Index j = 0; j < k; ++j) g(j) -= w[static_cast<std::size_t>(j)];
    g(static_cast<Eigen::Index>(pinned)) = 0.0;
    if (g.lpNorm<Eigen::Infinity>() < 1e-14 * std::max(1.0, s)) break;
    Eigen::MatrixXd h = s * (Eigen::MatrixXd(q.asDiagonal()) - q * q.transpose());
    h.row(static_cast<Eigen::Index>(pinned)).setZero();
    h.col(static_cast<Eigen::Index>(pinned)).setZero();
    h(static_cast<Eigen::Index>(pinned), static_cast<Eigen::Index>(pinned)) = 1.0;
    h.diagonal().array() += 1e-12 * std::max(1.0, s);
    const Eigen::VectorXd d = -h.ldlt().solve(g);
    double step = 1.0;
    bool improved = false;
    for (int back = 0; back < 60; ++back) {
      const Eigen::VectorXd trial = r + step * d;
      const double ft = CompSumObjective(w, trial);
      if (ft <= f + 1e-4 * step * g.dot(d) / kLn2) {
        r = trial;
        improved = ft < f;
        f = ft;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }
  return f;
}

double SumOf(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0);
}

// Single-stage surrogate weights with predictor risk a and expected costs.
std::vector<double> SurrogateWeightsFor(double a, const std::vector<double>& expected_costs) {
  const double c = SumOf(expected_costs);
  std::vector<double> w(expected_costs.size() + 1);
  w[0] = c;
  for (std::size_t j = 0; j < expected_costs.size(); ++j) w[j + 1] = a + c - expected_costs[j];
  return w;
}

double Coefficient(MarginKind kind, const BoundOptions& options) {
  switch (kind) {
    case MarginKind::kExp:
    case MarginKind::kLog:
      return options.constants == ConstantMode::kPrinted ? 0.5 : std::sqrt(2.0);
    case MarginKind::kQuad:
      return 1.0;
    default:
      return 0.0;
  }
}

BoundCheck Finish(std::string name, double lhs, double t, double extra, double rhs,
                  const BoundOptions& options) {
  BoundCheck c;
  c.name = std::move(name);
  c.lhs = lhs;
  c.t = t;
  c.extra = extra;
  c.rhs = rhs;
  c.slack = rhs - lhs;
  c.holds = c.slack >= -options.tolerance;
  return c;
}

void CheckCandidateShape(const FiniteInstance& instance, const Candidate& candidate,
                         std::size_t score_width) {
  if (candidate.predictor.size() != instance.num_points() ||
      candidate.scores.size() != instance.num_points()) {
    throw StructuralError("candidate tables must cover every point");
  }
  for (const auto& row : candidate.scores) {
    if (row.size() != score_width) {
      throw StructuralError("candidate score rows must have " + std::to_string(score_width) +
                            " entries");
    }
  }
}

}  // namespace

double FiniteInstance::label_min() const {
  return *std::min_element(labels.begin(), labels.end());
}

double FiniteInstance::label_max() const {
  return *std::max_element(labels.begin(), labels.end());
}

void FiniteInstance::Validate() const {
  const std::size_t m = weights.size();
  if (m == 0) throw ConfigError("instance needs at least one point");
  if (labels.empty()) throw ConfigError("instance needs at least one label");
  if (cost_bounds.empty()) throw ConfigError("instance needs at least one expert");
  for (double y : labels) {
    if (!std::isfinite(y)) throw ConfigError("labels must be finite");
  }
  CheckSimplexRow(weights, "point weights");
  if (conditionals.size() != m || costs.size() != m) {
    throw ConfigError("conditional and cost tables must have one entry per point");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (conditionals[i].size() != labels.size()) {
      throw ConfigError("conditional of point " + std::to_string(i) + " has wrong length");
    }
    CheckSimplexRow(conditionals[i], "conditional of point " + std::to_string(i));
    if (costs[i].size() != cost_bounds.size()) {
      throw ConfigError("cost table of point " + std::to_string(i) + " has wrong expert count");
    }
    for (std::size_t j = 0; j < cost_bounds.size(); ++j) {
      if (costs[i][j].size() != labels.size()) {
        throw ConfigError("cost row has wrong label count");
      }
      for (double c : costs[i][j]) {
        if (!(c >= 0.0) || !std::isfinite(c)) throw ConfigError("costs must be non-negative");
        if (c > cost_bounds[j] + 1e-12) {
          throw ConfigError("cost " + std::to_string(c) + " exceeds bound of expert " +
                            std::to_string(j + 1));
        }
      }
    }
  }
  if (loss.bound() + 1e-12 < loss(label_min(), label_max())) {
    throw ConfigError("loss bound does not cover the label range");
  }
}

std::vector<double> TightCostBounds(const FiniteInstance& instance) {
  std::vector<double> out(instance.costs.empty() ? 0 : instance.costs[0].size(), 0.0);
  for (const auto& point : instance.costs) {
    for (std::size_t j = 0; j < point.size() && j < out.size(); ++j) {
      for (double c : point[j]) out[j] = std::max(out[j], c);
    }
  }
  return out;
}

FiniteInstance GenerateInstance(std::uint64_t seed, const GeneratorOptions& options) {
  if (options.point_counts.empty() || options.label_counts.empty() ||
      options.expert_counts.empty()) {
    throw ConfigError("generator size lists must not be empty");
  }
  if (!(options.cost_bound_scale >= 1.0)) throw ConfigError("cost_bound_scale must be >= 1");
  Rng rng(seed);
  auto pick = [&](const std::vector<std::size_t>& v) { return v[rng.Below(v.size())]; };
  const std::size_t m = pick(options.point_counts);
  const std::size_t k = pick(options.label_counts);
  const std::size_t n_e = pick(options.expert_counts);
  if (m == 0 || k == 0 || n_e == 0) throw ConfigError("generator sizes must be positive");
  FiniteInstance inst;
  for (;;) {
    inst.labels.clear();
    for (std::size_t t = 0; t < k; ++t) inst.labels.push_back(rng.Uniform(-2.0, 2.0));
    std::sort(inst.labels.begin(), inst.labels.end());
    if (std::adjacent_find(inst.labels.begin(), inst.labels.end()) == inst.labels.end()) break;
  }
  inst.weights = rng.Dirichlet(m, 1.0);
  for (std::size_t i = 0; i < m; ++i) inst.conditionals.push_back(rng.Dirichlet(k, 1.0));
  inst.costs.assign(m, std::vector<std::vector<double>>(n_e, std::vector<double>(k)));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n_e; ++j) {
      const double shared = rng.Uniform(0.0, options.max_cost);
      for (std::size_t t = 0; t < k; ++t) {
        inst.costs[i][j][t] =
            options.label_independent_costs ? shared : rng.Uniform(0.0, options.max_cost);
      }
    }
  }
  double lo = inst.label_min();
  double hi = inst.label_max();
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  inst.loss = RegressionLoss::ForLabelRange(options.loss_kind, lo, hi, options.loss_exponent);
  inst.cost_bounds = TightCostBounds(inst);
  for (double& c : inst.cost_bounds) c *= options.cost_bound_scale;
  return inst;
}

double ConditionalLoss(const FiniteInstance& instance, std::size_t point, double value) {
  double s = 0.0;
  for (std::size_t k = 0; k < instance.num_labels(); ++k) {
    s += instance.conditionals[point][k] * instance.loss(value, instance.labels[k]);
  }
  return s;
}

double ConditionalCost(const FiniteInstance& instance, std::size_t point, std::size_t expert) {
  if (expert < 1 || expert > instance.num_experts()) {
    throw StructuralError("expert index out of range");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < instance.num_labels(); ++k) {
    s += instance.conditionals[point][k] * instance.costs[point][expert - 1][k];
  }
  return s;
}

RegressionInfimum NumericConditionalRegression(const FiniteInstance& instance, std::size_t point,
                                               double tolerance) {
  auto [x, v] = GoldenSection([&](double h) { return ConditionalLoss(instance, point, h); },
                              instance.label_min(), instance.label_max(), tolerance);
  return {v, x};
}

RegressionInfimum BayesConditionalRegression(const FiniteInstance& instance, std::size_t point) {
  const auto& p = instance.conditionals.at(point);
  const auto& loss = instance.loss;
  if (loss.kind() == LossKind::kSquared) {
    double mean = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) mean += p[k] * instance.labels[k];
    double var = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double d = instance.labels[k] - mean;
      var += p[k] * d * d;
    }
    return {var, mean};
  }
  if (loss.exponent() == 1.0) {
    RegressionInfimum best{std::numeric_limits<double>::infinity(), instance.labels[0]};
    for (double y : instance.labels) {
      const double v = ConditionalLoss(instance, point, y);
      if (v < best.value) best = {v, y};
    }
    return best;
  }
  return NumericConditionalRegression(instance, point, 1e-10);
}

double ConditionalSurrogateInfimum(std::span<const double> weights, const Surrogate& surrogate) {
  CheckWeights(weights);
  if (surrogate.is_comp_sum()) return EntropyTimesMass(weights);
  if (weights.size() != 2) throw StructuralError("a margin surrogate takes two weights");
  return MarginInfimum(weights[0], weights[1], surrogate.margin());
}

double NumericSurrogateInfimum(std::span<const double> weights, const Surrogate& surrogate,
                               std::size_t starts, std::uint64_t seed) {
  CheckWeights(weights);
  if (!surrogate.is_comp_sum()) {
    if (weights.size() != 2) throw StructuralError("a margin surrogate takes two weights");
    const MarginLoss& phi = surrogate.margin();
    return GoldenSection(
               [&](double u) { return weights[0] * phi(u) + weights[1] * phi(-u); }, -60.0,
               60.0, 1e-12)
        .second;
  }
  if (weights.empty()) throw StructuralError("no weights");
  double s = 0.0;
  for (double w : weights) s += w;
  if (s == 0.0) return 0.0;
  const auto k = static_cast<Eigen::Index>(weights.size());
  const std::size_t pinned = static_cast<std::size_t>(
      std::max_element(weights.begin(), weights.end()) - weights.begin());
  Rng rng(seed);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t start = 0; start < std::max<std::size_t>(1, starts); ++start) {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(k);
    if (start > 0) {
      for (Eigen::Index j = 0; j < k; ++j) r(j) = rng.Uniform(-5.0, 5.0);
    }
    best = std::min(best, NewtonCompSum(weights, r, pinned));
  }
  return best;
}

RiskReport EvaluateEstimationErrors(const FiniteInstance& instance, const Candidate& candidate,
                                    const Surrogate& surrogate) {
  instance.Validate();
  const std::size_t n_e = instance.num_experts();
  const bool margin = !surrogate.is_comp_sum();
  if (margin && n_e != 1) throw StructuralError("margin surrogates need exactly one expert");
  CheckCandidateShape(instance, candidate, margin ? 1 : n_e + 1);

  RiskReport rep;
  std::vector<double> costs(n_e);
  for (std::size_t i = 0; i < instance.num_points(); ++i) {
    PointRisk pr;
    pr.weight = instance.weights[i];
    const double h = candidate.predictor[i];
    const auto& scores = candidate.scores[i];
    pr.predictor_risk = ConditionalLoss(instance, i, h);
    pr.regression_infimum = BayesConditionalRegression(instance, i).value;
    for (std::size_t j = 1; j <= n_e; ++j) pr.expected_costs.push_back(ConditionalCost(instance, i, j));

    for (std::size_t k = 0; k < instance.num_labels(); ++k) {
      const double p = instance.conditionals[i][k];
      const double l = instance.loss(h, instance.labels[k]);
      for (std::size_t j = 0; j < n_e; ++j) costs[j] = instance.costs[i][j][k];
      double def = 0.0;
      double sur = 0.0;
      double two = 0.0;
      if (margin) {
        def = SingleExpertDeferralLoss(l, costs[0], scores[0]);
        sur = SingleExpertSurrogate(l, costs[0], scores[0], surrogate.margin());
        two = sur;
      } else {
        const DeferralTerms terms{l, costs};
        def = DeferralLoss(scores, terms);
        sur = SingleStageSurrogate(scores, terms, surrogate);
        two = TwoStageSurrogate(scores, terms, surrogate);
      }
      pr.deferral_risk += p * def;
      pr.fixed_deferral_risk += p * def;
      pr.surrogate_risk += p * sur;
      pr.fixed_surrogate_risk += p * two;
    }

    const double min_cost = *std::min_element(pr.expected_costs.begin(), pr.expected_costs.end());
    pr.best_deferral_risk = std::min(pr.regression_infimum, min_cost);
    pr.best_fixed_deferral_risk = std::min(pr.predictor_risk, min_cost);
    if (margin) {
      const double c = pr.expected_costs[0];
      pr.best_surrogate_risk = MarginInfimum(c, pr.regression_infimum, surrogate.margin());
      pr.best_fixed_surrogate_risk = MarginInfimum(c, pr.predictor_risk, surrogate.margin());
    } else {
      // The conditional surrogate infimum is non-decreasing in the
      // predictor risk, so the joint infimum sits at the regression
      // infimum.
      const auto w_best = SurrogateWeightsFor(pr.regression_infimum, pr.expected_costs);
      pr.best_surrogate_risk = EntropyTimesMass(w_best) -
                               static_cast<double>(n_e - 1) * pr.regression_infimum;
      const auto w_fixed = SurrogateWeightsFor(pr.predictor_risk, pr.expected_costs);
      pr.best_fixed_surrogate_risk = EntropyTimesMass(w_fixed);
    }

    const double w = pr.weight;
    rep.deferral_error += w * pr.deferral_risk;
    rep.surrogate_error += w * pr.surrogate_risk;
    rep.regression_error += w * pr.predictor_risk;
    rep.best_regression_error += w * pr.regression_infimum;
    rep.fixed_deferral_error += w * pr.fixed_deferral_risk;
    rep.best_fixed_deferral_error += w * pr.best_fixed_deferral_risk;
    rep.fixed_surrogate_error += w * pr.fixed_surrogate_risk;
    rep.best_fixed_surrogate_error += w * pr.best_fixed_surrogate_risk;
    rep.best_surrogate_error += w * pr.best_surrogate_risk;
    rep.points.push_back(std::move(pr));
  }
  double pointwise_best = 0.0;
  for (const auto& pr : rep.points) pointwise_best += pr.weight * pr.best_deferral_risk;
  rep.best_deferral_error = EnumerateBestDeferralRisk(instance);
  rep.deferral_gap = rep.best_deferral_error - pointwise_best;
  rep.surrogate_gap = 0.0;
  return rep;
}

double EnumerateBestDeferralRisk(const FiniteInstance& instance) {
  const std::size_t m = instance.num_points();
  const std::size_t options = instance.num_experts() + 1;
  // risk[i][d]
  std::vector<std::vector<double>> risk(m, std::vector<double>(options));
  for (std::size_t i = 0; i < m; ++i) {
    risk[i][0] = BayesConditionalRegression(instance, i).value;
    for (std::size_t d = 1; d < options; ++d) risk[i][d] = ConditionalCost(instance, i, d);
  }
  std::size_t total = 1;
  for (std::size_t i = 0; i < m; ++i) {
    if (total > (std::size_t{1} << 40) / options) {
      throw ConfigError("instance too large for exhaustive enumeration");
    }
    total *= options;
  }
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> assign(m, 0);
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    double value = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      assign[i] = c % options;
      c /= options;
      value += instance.weights[i] * risk[i][assign[i]];
    }
    best = std::min(best, value);
  }
  return best;
}

Candidate OptimalCandidate(const FiniteInstance& instance) {
  Candidate cand;
  const std::size_t n_e = instance.num_experts();
  for (std::size_t i = 0; i < instance.num_points(); ++i) {
    const RegressionInfimum inf = BayesConditionalRegression(instance, i);
    cand.predictor.push_back(inf.minimizer);
    std::vector<double> ec;
    for (std::size_t j = 1; j <= n_e; ++j) ec.push_back(ConditionalCost(instance, i, j));
    std::vector<double> scores;
    for (double w : SurrogateWeightsFor(inf.value, ec)) {
      scores.push_back(w > 0.0 ? std::log(w) : kZeroWeightScore);
    }
    cand.scores.push_back(std::move(scores));
  }
  return cand;
}

Candidate OptimalSingleExpertCandidate(const FiniteInstance& instance, const MarginLoss& phi) {
  if (instance.num_experts() != 1) throw StructuralError("single-expert candidate needs n_e = 1");
  Candidate cand;
  for (std::size_t i = 0; i < instance.num_points(); ++i) {
    const RegressionInfimum inf = BayesConditionalRegression(instance, i);
    const double a = inf.value;
    const double c = ConditionalCost(instance, i, 1);
    double u = 0.0;
    if (a > 0.0 || c > 0.0) {
      const double ratio = a > 0.0 ? c / a : std::numeric_limits<double>::infinity();
      const double sign = c > a ? 1.0 : -1.0;
      switch (phi.kind()) {
        case MarginKind::kExp:
          u = 0.5 * std::log(ratio);
          break;
        case MarginKind::kLog:
          u = std::log(ratio);
          break;
        case MarginKind::kQuad:
          u = (c - a) / (a + c);
          break;
        case MarginKind::kHinge:
          u = sign;
          break;
        case MarginKind::kSigmoid:
          u = sign * kMarginScoreClamp;
          break;
        case MarginKind::kRhoMargin:
          u = sign * phi.parameter();
          break;
      }
      u = std::clamp(u, -kMarginScoreClamp, kMarginScoreClamp);
    }
    cand.predictor.push_back(inf.minimizer);
    cand.scores.push_back({u});
  }
  return cand;
}

Candidate RandomCandidate(const FiniteInstance& instance, std::uint64_t seed) {
  Rng rng(seed);
  Candidate cand;
  for (std::size_t i = 0; i < instance.num_points(); ++i) {
    const bool optimal = rng.Uniform() < 0.25;
    const double uniform = rng.Uniform(instance.label_min(), instance.label_max());
    cand.predictor.push_back(optimal ? BayesConditionalRegression(instance, i).minimizer
                                     : uniform);
    std::vector<double> scores;
    for (std::size_t j = 0; j <= instance.num_experts(); ++j) {
      scores.push_back(rng.Uniform(-4.0, 4.0));
    }
    cand.scores.push_back(std::move(scores));
  }
  return cand;
}

Candidate RandomSingleExpertCandidate(const FiniteInstance& instance, std::uint64_t seed) {
  Rng rng(seed);
  Candidate cand;
  for (std::size_t i = 0; i < instance.num_points(); ++i) {
    const bool optimal = rng.Uniform() < 0.25;
    const double uniform = rng.Uniform(instance.label_min(), instance.label_max());
    cand.predictor.push_back(optimal ? BayesConditionalRegression(instance, i).minimizer
                                     : uniform);
    cand.scores.push_back({rng.Uniform(-4.0, 4.0)});
  }
  return cand;
}

double GammaBarSingleStage(double t, std::size_t num_experts, double loss_bound,
                           double cost_bound_sum, const BoundOptions& options) {
  t = std::max(t, 0.0);
  const double root = std::sqrt(2.0 * static_cast<double>(num_experts)) *
                      std::sqrt(loss_bound + cost_bound_sum) * std::sqrt(t);
  return options.gamma_scale * std::max(t, root);
}

double GammaBarTwoStage(double t, std::size_t num_experts, double loss_bound,
                        double cost_bound_sum, const BoundOptions& options) {
  t = std::max(t, 0.0);
  return options.gamma_scale * std::sqrt(2.0 * static_cast<double>(num_experts)) *
         std::sqrt(loss_bound + cost_bound_sum) * std::sqrt(t);
}

double GammaBarSingleExpert(MarginKind kind, double t, double loss_bound, double cost_bound,
                            bool two_stage, const BoundOptions& options) {
  t = std::max(t, 0.0);
  const double beta = Coefficient(kind, options);
  if (beta == 0.0) return options.gamma_scale * t;
  const double root = beta * std::sqrt(loss_bound + cost_bound) * std::sqrt(t);
  return options.gamma_scale * (two_stage ? root : std::max(t, root));
}

BoundCheck CheckSingleStageBound(const FiniteInstance& instance, const Candidate& candidate,
                                 const BoundOptions& options) {
  const RiskReport r = EvaluateEstimationErrors(instance, candidate, Surrogate::CompSumLogistic());
  const double t = r.SurrogateEstimation();
  const double rhs = GammaBarSingleStage(t, instance.num_experts(), instance.loss_bound(),
                                         SumOf(instance.cost_bounds), options);
  return Finish("single_stage", r.DeferralEstimation(), t, 0.0, rhs, options);
}

TwoStageChecks CheckTwoStageBounds(const FiniteInstance& instance, const Candidate& candidate,
                                   const BoundOptions& options) {
  const RiskReport r = EvaluateEstimationErrors(instance, candidate, Surrogate::CompSumLogistic());
  const double t = r.FixedSurrogateEstimation();
  const double gamma = GammaBarTwoStage(t, instance.num_experts(), instance.loss_bound(),
                                        SumOf(instance.cost_bounds), options);
  const double extra = r.RegressionEstimation();
  return {Finish("two_stage_fixed", r.FixedDeferralEstimation(), t, 0.0, gamma, options),
          Finish("two_stage", r.DeferralEstimation(), t, extra, extra + gamma, options)};
}

SingleExpertChecks CheckSingleExpertBounds(const FiniteInstance& instance,
                                           const Candidate& candidate, const MarginLoss& phi,
                                           const BoundOptions& options) {
  const RiskReport r = EvaluateEstimationErrors(instance, candidate, Surrogate::Margin(phi));
  const std::string kind(MarginKindName(phi.kind()));
  const double lbar = instance.loss_bound();
  const double cbar = instance.cost_bounds[0];
  const double t1 = r.SurrogateEstimation();
  const double t2 = r.FixedSurrogateEstimation();
  const double extra = r.RegressionEstimation();
  return {Finish("single_expert/" + kind, r.DeferralEstimation(), t1, 0.0,
                 GammaBarSingleExpert(phi.kind(), t1, lbar, cbar, false, options), options),
          Finish("single_expert_two_stage/" + kind, r.DeferralEstimation(), t2, extra,
                 extra + GammaBarSingleExpert(phi.kind(), t2, lbar, cbar, true, options),
                 options)};
}

RegretReduction CompSumRegretReduction(std::span<const double> p,
                                       std::span<const double> scores) {
  if (p.size() != scores.size() || p.empty()) {
    throw StructuralError("probabilities and scores must have equal, non-zero length");
  }
  const std::size_t d = ArgmaxDecision(scores);
  const double pmax = *std::max_element(p.begin(), p.end());
  double surrogate = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) surrogate += p[j] * CompSumLogistic(scores, j);
  }
  const double excess = std::max(0.0, surrogate - EntropyTimesMass(p));
  return {pmax - p[d], std::sqrt(2.0 * excess)};
}

RestrictedReport CheckRestrictedClass(const FiniteInstance& instance,
                                      const HypothesisClass& hypotheses,
                                      const BoundOptions& options) {
  if (hypotheses.predictors.empty() || hypotheses.scorers.empty()) {
    throw ConfigError("hypothesis class needs at least one predictor and one scorer");
  }
  const Surrogate log_loss = Surrogate::CompSumLogistic();
  std::vector<RiskReport> reports;
  for (const auto& h : hypotheses.predictors) {
    for (const auto& r : hypotheses.scorers) {
      reports.push_back(EvaluateEstimationErrors(instance, Candidate{h, r}, log_loss));
    }
  }
  RestrictedReport out;
  out.best_deferral_error = std::numeric_limits<double>::infinity();
  out.best_surrogate_error = std::numeric_limits<double>::infinity();
  for (const auto& r : reports) {
    out.best_deferral_error = std::min(out.best_deferral_error, r.deferral_error);
    out.best_surrogate_error = std::min(out.best_surrogate_error, r.surrogate_error);
  }
  double pointwise_def = 0.0;
  double pointwise_sur = 0.0;
  for (const auto& pr : reports.front().points) {
    pointwise_def += pr.weight * pr.best_deferral_risk;
    pointwise_sur += pr.weight * pr.best_surrogate_risk;
  }
  out.deferral_gap = out.best_deferral_error - pointwise_def;
  out.surrogate_gap = out.best_surrogate_error - pointwise_sur;
  for (const auto& r : reports) {
    const double lhs = r.deferral_error - out.best_deferral_error + out.deferral_gap;
    const double t = r.surrogate_error - out.best_surrogate_error + out.surrogate_gap;
    const double rhs = GammaBarSingleStage(t, instance.num_experts(), instance.loss_bound(),
                                           SumOf(instance.cost_bounds), options);
    out.checks.push_back(Finish("restricted_single_stage", lhs, t, 0.0, rhs, options));
  }
  return out;
}

bool SweepResult::AllHold() const {
  return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.holds; });
}

SweepResult RunSweep(const SweepConfig& config) {
  if (!config.single_stage && !config.two_stage && !config.single_expert) {
    throw ConfigError("select at least one check");
  }
  if (config.num_instances == 0) throw ConfigError("num_instances must be >= 1");
  auto add = [](std::vector<Verdict>& out, const BoundCheck& c, std::size_t instance,
                std::uint64_t seed, std::size_t candidate) {
    out.push_back({c.name, instance, seed, candidate, c.lhs, c.t, c.rhs, c.slack, c.holds});
  };
  auto run_instance = [&](std::size_t i) {
    std::vector<Verdict> out;
    if (config.single_stage || config.two_stage) {
      const std::uint64_t seed = DeriveSeed(config.seed, "instance/" + std::to_string(i));
      const FiniteInstance inst = GenerateInstance(seed, config.generator);
      std::vector<Candidate> cands;
      for (std::size_t c = 0; c < config.candidates_per_instance; ++c) {
        cands.push_back(RandomCandidate(inst, DeriveSeed(seed, "candidate/" + std::to_string(c))));
      }
      if (config.include_optimal) cands.push_back(OptimalCandidate(inst));
      for (std::size_t c = 0; c < cands.size(); ++c) {
        if (config.single_stage) add(out, CheckSingleStageBound(inst, cands[c], config.bounds), i, seed, c);
        if (config.two_stage) {
          const TwoStageChecks two = CheckTwoStageBounds(inst, cands[c], config.bounds);
          add(out, two.fixed_predictor, i, seed, c);
          add(out, two.full, i, seed, c);
        }
      }
    }
    if (config.single_expert) {
      const std::uint64_t seed =
          DeriveSeed(config.seed, "single_expert/instance/" + std::to_string(i));
      GeneratorOptions gen = config.generator;
      gen.expert_counts = {1};
      const FiniteInstance inst = GenerateInstance(seed, gen);
      std::vector<Candidate> cands;
      for (std::size_t c = 0; c < config.candidates_per_instance; ++c) {
        cands.push_back(
            RandomSingleExpertCandidate(inst, DeriveSeed(seed, "candidate/" + std::to_string(c))));
      }
      for (MarginKind kind : kAllMarginKinds) {
        const MarginLoss phi = MarginLoss::OfKind(kind);
        std::vector<Candidate> all = cands;
        if (config.include_optimal) all.push_back(OptimalSingleExpertCandidate(inst, phi));
        for (std::size_t c = 0; c < all.size(); ++c) {
          const SingleExpertChecks se = CheckSingleExpertBounds(inst, all[c], phi, config.bounds);
          add(out, se.single_stage, i, seed, c);
          add(out, se.two_stage, i, seed, c);
        }
      }
    }
    return out;
  };

  std::vector<std::vector<Verdict>> per_instance(config.num_instances);
  std::vector<std::exception_ptr> errors(config.num_instances);
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, config.num_instances));
  auto worker = [&](std::size_t w) {
    for (std::size_t i = w; i < config.num_instances; i += workers) {
      try {
        per_instance[i] = run_instance(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  SweepResult result;
  for (auto& v : per_instance) {
    result.verdicts.insert(result.verdicts.end(), v.begin(), v.end());
  }
  std::map<std::string, std::vector<double>> slacks;
  std::map<std::string, std::size_t> violations;
  for (const auto& v : result.verdicts) {
    slacks[v.check].push_back(v.slack);
    if (!v.holds) ++violations[v.check];
  }
  for (auto& [name, s] : slacks) {
    std::sort(s.begin(), s.end());
    CheckSummary summary;
    summary.check = name;
    summary.count = s.size();
    summary.violations = violations[name];
    summary.min_slack = s.front();
    summary.median_slack = s[s.size() / 2];
    result.summary.push_back(summary);
  }
  return result;
}

std::string VerdictsToJsonLines(const std::vector<Verdict>& verdicts) {
  std::string out;
  for (const auto& v : verdicts) {
    nlohmann::ordered_json j;
    j["check"] = v.check;
    j["instance"] = v.instance;
    j["instance_seed"] = v.instance_seed;
    j["candidate"] = v.candidate;
    j["lhs"] = v.lhs;
    j["t"] = v.t;
    j["rhs"] = v.rhs;
    j["slack"] = v.slack;
    j["holds"] = v.holds;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string SummaryToText(const SweepResult& result) {
  std::size_t width = 5;
  for (const auto& s : result.summary) width = std::max(width, s.check.size());
  std::ostringstream os;
  os << std::left;
  os.width(static_cast<std::streamsize>(width + 2));
  os << "check" << "  checks  violations      min_slack   median_slack\n";
  for (const auto& s : result.summary) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-*s  %6zu  %10zu  %13.6e  %13.6e\n",
                  static_cast<int>(width), s.check.c_str(), s.count, s.violations,
                  s.min_slack, s.median_slack);
    os << line;
  }
  return os.str();
}

}  // namespace deferral

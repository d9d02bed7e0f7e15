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

#include "deferral/optim.h"

#include <algorithm>
#include <cmath>

#include "deferral/errors.h"

namespace deferral {
namespace {

void RequireFinite(const Eigen::VectorXd& v, const char* what) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v(i))) {
      throw NonFiniteError(std::string("non-finite ") + what + " at index " +
                               std::to_string(i),
                           static_cast<std::size_t>(i));
    }
  }
}

}  // namespace

AdamState::AdamState(Eigen::Index num_params, const AdamConfig& config)
    : config_(config),
      m_(Eigen::VectorXd::Zero(num_params)),
      v_(Eigen::VectorXd::Zero(num_params)) {
  if (!(config.lr > 0.0)) throw ConfigError("Adam learning rate must be positive");
  if (!(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(config.epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
}

void AdamState::Step(Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw StructuralError("Adam state, params and grads must have equal length");
  }
  RequireFinite(grads, "gradient");
  RequireFinite(params, "parameter");
  const auto& c = config_;
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = grads(i);
    m_(i) = c.beta1 * m_(i) + (1.0 - c.beta1) * g;
    v_(i) = c.beta2 * v_(i) + (1.0 - c.beta2) * g * g;
    const double m_hat = m_(i) / correction1;
    const double v_hat = v_(i) / correction2;
    params(i) -= c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

void SgdStep(double lr, Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
  if (params.size() != grads.size()) {
    throw StructuralError("params and grads must have equal length");
  }
  if (!std::isfinite(lr)) throw NonFiniteError("non-finite learning rate", 0);
  RequireFinite(grads, "gradient");
  RequireFinite(params, "parameter");
  params -= lr * grads;
}

double CheckGradient(const std::function<double(const Eigen::VectorXd&)>& loss_fn,
                     const Eigen::VectorXd& params, const Eigen::VectorXd& analytic,
                     double step) {
  if (params.size() != analytic.size()) {
    throw StructuralError("analytic gradient length differs from params");
  }
  Eigen::VectorXd probe = params;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    probe(i) = params(i) + step;
    const double plus = loss_fn(probe);
    probe(i) = params(i) - step;
    const double minus = loss_fn(probe);
    probe(i) = params(i);
    const double numeric = (plus - minus) / (2.0 * step);
    const double err =
        std::abs(numeric - analytic(i)) / std::max(1e-8, std::abs(analytic(i)));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace deferral

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

#ifndef DEFERRAL_OPTIM_H_
#define DEFERRAL_OPTIM_H_

#include <cstdint>
#include <functional>

#include <Eigen/Dense>

namespace deferral {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a flat parameter vector.
class AdamState {
 public:
  AdamState(Eigen::Index num_params, const AdamConfig& config);

  std::uint64_t step() const { return step_; }
  const AdamConfig& config() const { return config_; }
  const Eigen::VectorXd& first_moment() const { return m_; }
  const Eigen::VectorXd& second_moment() const { return v_; }

  // One update. Non-finite params or grads throw NonFiniteError and leave
  // both the state and params untouched.
  void Step(Eigen::VectorXd& params, const Eigen::VectorXd& grads);

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
};

inline void AdamStep(AdamState& state, Eigen::VectorXd& params,
                     const Eigen::VectorXd& grads) {
  state.Step(params, grads);
}

// params -= lr * grads.
void SgdStep(double lr, Eigen::VectorXd& params, const Eigen::VectorXd& grads);

// Central differences per coordinate; returns
//   max_i |numeric_i - analytic_i| / max(1e-8, |analytic_i|).
double CheckGradient(const std::function<double(const Eigen::VectorXd&)>& loss_fn,
                     const Eigen::VectorXd& params,
                     const Eigen::VectorXd& analytic, double step = 1e-5);

}  // namespace deferral

#endif  // DEFERRAL_OPTIM_H_

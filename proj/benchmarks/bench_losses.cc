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


#include <vector>

#include <benchmark/benchmark.h>

#include "deferral/loss_core.h"
#include "deferral/models.h"
#include "deferral/rng.h"
#include "deferral/theory.h"

namespace deferral {
namespace {

void BM_SingleStageSurrogate(benchmark::State& state) {
  const auto n_e = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<double> scores(n_e + 1);
  std::vector<double> costs(n_e);
  for (double& s : scores) s = rng.Uniform(-2.0, 2.0);
  for (double& c : costs) c = rng.Uniform(0.0, 2.0);
  const DeferralTerms t{0.7, costs};
  const Surrogate s = Surrogate::CompSumLogistic();
  for (auto _ : state) benchmark::DoNotOptimize(SingleStageSurrogate(scores, t, s));
}
BENCHMARK(BM_SingleStageSurrogate)->Arg(1)->Arg(2)->Arg(3);

void BM_GradSingleStage(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  Rng rng(2);
  Eigen::MatrixXd x(n, 8);
  Eigen::VectorXd y(n);
  Eigen::MatrixXd costs(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < 8; ++j) x(i, j) = rng.Normal();
    for (Eigen::Index j = 0; j < 3; ++j) costs(i, j) = rng.Uniform();
    y(i) = rng.Normal();
  }
  const BatchView batch{x, y, costs};
  const LinearModel h = LinearModel::Init(8, 1, 3);
  const LinearModel r = LinearModel::Init(8, 4, 4);
  const RegressionLoss loss = RegressionLoss::Squared(1e6);
  const Surrogate s = Surrogate::CompSumLogistic();
  for (auto _ : state) benchmark::DoNotOptimize(GradSingleStage(h, r, loss, s, batch));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_GradSingleStage)->Arg(256)->Arg(1024);

void BM_MlpForward(benchmark::State& state) {
  Rng rng(5);
  Eigen::MatrixXd x(256, 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.Normal();
  const MlpModel m = MlpModel::Init(8, {64, 64, 64}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(m.ForwardBatch(x));
}
BENCHMARK(BM_MlpForward);

void BM_SweepInstance(benchmark::State& state) {
  SweepConfig cfg;
  cfg.num_instances = 1;
  cfg.candidates_per_instance = 20;
  for (auto _ : state) benchmark::DoNotOptimize(RunSweep(cfg));
}
BENCHMARK(BM_SweepInstance);

}  // namespace
}  // namespace deferral

BENCHMARK_MAIN();

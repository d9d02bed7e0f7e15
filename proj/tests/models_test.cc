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


#include "deferral/models.h"

#include <cmath>
#include <functional>
#include <limits>

#include <gtest/gtest.h>

#include "deferral/errors.h"
#include "deferral/rng.h"

namespace deferral {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd RandomMatrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.Normal();
  }
  return m;
}

// Jitters hidden biases until every hidden preactivation on x is at least
// 1e-4 away from the ReLU kink.
MlpModel AwayFromKinks(MlpModel m, const MatrixXd& x, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    double closest = std::numeric_limits<double>::infinity();
    MatrixXd a = x;
    for (std::size_t l = 0; l + 1 < m.layers().size(); ++l) {
      const DenseLayer& layer = m.layers()[l];
      const MatrixXd z = (a * layer.weights.transpose()).rowwise() + layer.bias.transpose();
      closest = std::min(closest, z.cwiseAbs().minCoeff());
      a = z.cwiseMax(0.0);
    }
    if (closest >= 1e-4) return m;
    for (std::size_t l = 0; l + 1 < m.layers().size(); ++l) {
      for (Eigen::Index i = 0; i < m.layers()[l].bias.size(); ++i) {
        m.mutable_layers()[l].bias(i) += 0.1 * rng.Normal();
      }
    }
  }
  return m;
}

// Largest relative error between an analytic gradient and central
// differences of f around params, with a floor of 1 on the denominator.
template <typename Net>
double MaxRelError(Net net, const VectorXd& analytic, const std::function<double(const Net&)>& f) {
  const VectorXd p = net.Flatten();
  double worst = 0.0;
  const double h = 1e-6;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    VectorXd up = p;
    VectorXd down = p;
    up(k) += h;
    down(k) -= h;
    net.Unflatten(up);
    const double fu = f(net);
    net.Unflatten(down);
    const double fd = f(net);
    const double numeric = (fu - fd) / (2.0 * h);
    worst = std::max(worst, std::abs(numeric - analytic(k)) /
                                std::max(1.0, std::max(std::abs(numeric), std::abs(analytic(k)))));
  }
  return worst;
}

TEST(LinearModelTest, ForwardIsAffine) {
  MatrixXd w(2, 3);
  w << 1, 2, 3, -1, 0, 0.5;
  VectorXd b(2);
  b << 0.5, -1;
  const LinearModel m(w, b);
  const std::vector<double> x = {1.0, -1.0, 2.0};
  const VectorXd out = m.Forward(x);
  EXPECT_DOUBLE_EQ(out(0), 1 - 2 + 6 + 0.5);
  EXPECT_DOUBLE_EQ(out(1), -1 + 0 + 1 - 1);
  MatrixXd batch(1, 3);
  batch << 1.0, -1.0, 2.0;
  EXPECT_EQ(m.ForwardBatch(batch).row(0).transpose(), out);
  const std::vector<double> bad = {1.0};
  EXPECT_THROW(m.Forward(bad), StructuralError);
}

TEST(LinearModelTest, InitIsUniformWithFanInScale) {
  const Eigen::Index fan_in = 50;
  const LinearModel m = LinearModel::Init(fan_in, 200, 9);
  const MatrixXd& w = m.layers().front().weights;
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  EXPECT_LE(w.cwiseAbs().maxCoeff(), a);
  const double mean = w.mean();
  const double std = std::sqrt((w.array() - mean).square().mean());
  // U(-a, a) has standard deviation a / sqrt(3).
  EXPECT_NEAR(std, a / std::sqrt(3.0), 0.05 * a / std::sqrt(3.0));
  EXPECT_TRUE(m.layers().front().bias.isZero());
  EXPECT_EQ(LinearModel::Init(fan_in, 200, 9), m);
  EXPECT_FALSE(LinearModel::Init(fan_in, 200, 10) == m);
}

TEST(MlpModelTest, ForwardMatchesManualRelu) {
  Rng rng(3);
  const MlpModel m = MlpModel::Init(4, {5, 3}, 21);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> x(4);
    for (double& v : x) v = rng.Normal();
    VectorXd a = Eigen::Map<VectorXd>(x.data(), 4);
    const auto& ls = m.layers();
    a = (ls[0].weights * a + ls[0].bias).cwiseMax(0.0);
    a = (ls[1].weights * a + ls[1].bias).cwiseMax(0.0);
    const double expected = (ls[2].weights * a + ls[2].bias)(0);
    EXPECT_NEAR(m.Forward(x), expected, 1e-12);
  }
  EXPECT_EQ(m.depth(), 2u);
  EXPECT_EQ(m.num_parameters(), static_cast<std::size_t>(5 * 4 + 5 + 3 * 5 + 3 + 3 + 1));
}

TEST(MlpModelTest, RejectsInvalidShapes) {
  EXPECT_THROW(MlpModel::Init(3, {}, 1), ConfigError);
  EXPECT_THROW(MlpModel::Init(3, {2, 2, 2, 2}, 1), ConfigError);
  EXPECT_THROW(MlpModel::Init(3, {0}, 1), ConfigError);
  std::vector<DenseLayer> linear_only = {
      {MatrixXd::Zero(1, 3), VectorXd::Zero(1), Activation::kIdentity}};
  EXPECT_THROW(MlpModel{linear_only}, ConfigError);
  std::vector<DenseLayer> broken = {
      {MatrixXd::Zero(4, 3), VectorXd::Zero(4), Activation::kRelu},
      {MatrixXd::Zero(1, 5), VectorXd::Zero(1), Activation::kIdentity}};
  EXPECT_ANY_THROW(MlpModel{broken});
}

TEST(DenseNetworkTest, FlattenRoundTripAndHash) {
  MlpModel m = MlpModel::Init(3, {4}, 5);
  const VectorXd p = m.Flatten();
  EXPECT_EQ(static_cast<std::size_t>(p.size()), m.num_parameters());
  const std::uint64_t h0 = m.Hash();
  VectorXd q = p;
  q(0) += 1e-12;
  m.Unflatten(q);
  EXPECT_NE(m.Hash(), h0);
  m.Unflatten(p);
  EXPECT_EQ(m.Hash(), h0);
  EXPECT_THROW(m.Unflatten(VectorXd::Zero(2)), StructuralError);
  EXPECT_TRUE(m.AllFinite());
}

TEST(GradRegressionTest, MatchesFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const MatrixXd x = RandomMatrix(rng, 17, 3);
    const VectorXd y = RandomMatrix(rng, 17, 1).col(0);
    for (const RegressionLoss& loss : {RegressionLoss::Squared(1e6), RegressionLoss::Power(3.0, 1e6)}) {
      const MlpModel m = AwayFromKinks(MlpModel::Init(3, {6, 4}, 100 + trial), x, rng);
      const GradientBundle g = GradRegression(m, loss, x, y);
      EXPECT_NEAR(g.loss, RegressionObjective(m, loss, x, y), 1e-12);
      const double err = MaxRelError<MlpModel>(m, g.Flatten(), [&](const MlpModel& net) {
        return RegressionObjective(net, loss, x, y);
      });
      EXPECT_LT(err, 1e-6);
    }
  }
}

class DeferralGradTest : public ::testing::TestWithParam<int> {};

TEST_P(DeferralGradTest, SingleAndTwoStageMatchFiniteDifferences) {
  const std::size_t n_e = static_cast<std::size_t>(GetParam());
  Rng rng(40 + n_e);
  const RegressionLoss loss = RegressionLoss::Squared(1e6);
  const Surrogate s = Surrogate::CompSumLogistic();
  for (int trial = 0; trial < 4; ++trial) {
    const MatrixXd x = RandomMatrix(rng, 23, 4);
    const VectorXd y = RandomMatrix(rng, 23, 1).col(0);
    const MatrixXd costs = RandomMatrix(rng, 23, static_cast<Eigen::Index>(n_e)).cwiseAbs();
    const BatchView batch{x, y, costs};
    const LinearModel h = LinearModel::Init(4, 1, rng.NextU64());
    const LinearModel r = LinearModel::Init(4, static_cast<Eigen::Index>(n_e + 1), rng.NextU64());
    const auto [gh, gr] = GradSingleStage(h, r, loss, s, batch);
    EXPECT_NEAR(gh.loss, SingleStageObjective(h, r, loss, s, batch), 1e-10);
    EXPECT_LT(MaxRelError<LinearModel>(h, gh.Flatten(),
                                       [&](const LinearModel& hh) {
                                         return SingleStageObjective(hh, r, loss, s, batch);
                                       }),
              1e-6);
    EXPECT_LT(MaxRelError<LinearModel>(r, gr.Flatten(),
                                       [&](const LinearModel& rr) {
                                         return SingleStageObjective(h, rr, loss, s, batch);
                                       }),
              1e-6);
    const MlpModel fixed = MlpModel::Init(4, {5}, rng.NextU64());
    const GradientBundle g2 = GradTwoStage(r, fixed, loss, s, batch);
    EXPECT_NEAR(g2.loss, TwoStageObjective(r, fixed, loss, s, batch), 1e-10);
    EXPECT_LT(MaxRelError<LinearModel>(r, g2.Flatten(),
                                       [&](const LinearModel& rr) {
                                         return TwoStageObjective(rr, fixed, loss, s, batch);
                                       }),
              1e-6);
  }
}

INSTANTIATE_TEST_SUITE_P(ExpertCounts, DeferralGradTest, ::testing::Values(1, 2, 3));

TEST(DeferralGradTest, MarginSurrogateMatchesFiniteDifferences) {
  Rng rng(77);
  const RegressionLoss loss = RegressionLoss::Squared(1e6);
  for (MarginKind kind : {MarginKind::kExp, MarginKind::kLog, MarginKind::kQuad,
                          MarginKind::kSigmoid}) {
    const Surrogate s = Surrogate::Margin(MarginLoss::OfKind(kind));
    const MatrixXd x = RandomMatrix(rng, 15, 3, 0.5);
    const VectorXd y = RandomMatrix(rng, 15, 1).col(0);
    const MatrixXd costs = RandomMatrix(rng, 15, 1).cwiseAbs();
    const BatchView batch{x, y, costs};
    const LinearModel h = LinearModel::Init(3, 1, 5);
    const LinearModel r = LinearModel::Init(3, 2, 6);
    const auto [gh, gr] = GradSingleStage(h, r, loss, s, batch);
    EXPECT_LT(MaxRelError<LinearModel>(h, gh.Flatten(),
                                       [&](const LinearModel& hh) {
                                         return SingleStageObjective(hh, r, loss, s, batch);
                                       }),
              1e-6)
        << MarginKindName(kind);
    EXPECT_LT(MaxRelError<LinearModel>(r, gr.Flatten(),
                                       [&](const LinearModel& rr) {
                                         return SingleStageObjective(h, rr, loss, s, batch);
                                       }),
              1e-6)
        << MarginKindName(kind);
  }
}

TEST(DeferralGradTest, ChunkingAndWorkersDoNotChangeBits) {
  Rng rng(8);
  const MatrixXd x = RandomMatrix(rng, 101, 3);
  const VectorXd y = RandomMatrix(rng, 101, 1).col(0);
  const MatrixXd costs = RandomMatrix(rng, 101, 2).cwiseAbs();
  const BatchView batch{x, y, costs};
  const LinearModel h = LinearModel::Init(3, 1, 1);
  const LinearModel r = LinearModel::Init(3, 3, 2);
  const RegressionLoss loss = RegressionLoss::Squared(1e6);
  const Surrogate s = Surrogate::CompSumLogistic();
  const auto serial = GradSingleStage(h, r, loss, s, batch, GradOptions{16, 1});
  const auto threaded = GradSingleStage(h, r, loss, s, batch, GradOptions{16, 4});
  EXPECT_EQ(serial.first.Flatten(), threaded.first.Flatten());
  EXPECT_EQ(serial.second.Flatten(), threaded.second.Flatten());
}

TEST(DeferralGradTest, NonFiniteSampleIsNamed) {
  MatrixXd x = MatrixXd::Ones(5, 2);
  VectorXd y = VectorXd::Zero(5);
  y(3) = std::numeric_limits<double>::quiet_NaN();
  const MatrixXd costs = MatrixXd::Ones(5, 1);
  const BatchView batch{x, y, costs};
  const LinearModel h = LinearModel::Init(2, 1, 1);
  const LinearModel r = LinearModel::Init(2, 2, 2);
  try {
    GradSingleStage(h, r, RegressionLoss::Squared(10.0), Surrogate::CompSumLogistic(), batch);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.index(), 3u);
  }
}

TEST(DeferralGradTest, ShapeMismatchIsStructural) {
  const MatrixXd x = MatrixXd::Ones(4, 2);
  const VectorXd y = VectorXd::Zero(4);
  const MatrixXd costs = MatrixXd::Ones(4, 2);
  const BatchView batch{x, y, costs};
  const LinearModel h = LinearModel::Init(2, 1, 1);
  const LinearModel r = LinearModel::Init(2, 2, 2);
  EXPECT_THROW(GradSingleStage(h, r, RegressionLoss::Squared(10.0), Surrogate::CompSumLogistic(),
                               batch),
               StructuralError);
}

}  // namespace
}  // namespace deferral

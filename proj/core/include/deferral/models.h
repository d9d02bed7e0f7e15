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

// Linear models for the predictor h and the deferral scorer r, ReLU MLPs
// for the experts, and hand-derived gradients of the deferral surrogates
// with respect to their parameters.
//
// Batches are row-major in the sense that row i of a feature matrix is one
// sample. Batch gradients are computed over fixed-size chunks whose partial
// sums are added in chunk order, so the result does not depend on how many
// worker threads evaluated the chunks.

#ifndef DEFERRAL_MODELS_H_
#define DEFERRAL_MODELS_H_

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "deferral/loss_core.h"

namespace deferral {

enum class Activation : std::uint8_t { kIdentity = 0, kRelu = 1 };

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
  Activation activation = Activation::kIdentity;
};

// Shared storage and parameter plumbing for LinearModel and MlpModel.
class DenseNetwork {
 public:
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  Eigen::Index in_dim() const { return layers_.front().weights.cols(); }
  Eigen::Index out_dim() const { return layers_.back().weights.rows(); }
  std::size_t num_parameters() const;

  // Layer by layer, weights row-major then bias.
  Eigen::VectorXd Flatten() const;
  void Unflatten(const Eigen::VectorXd& params);

  // n x out_dim outputs for an n x in_dim batch.
  Eigen::MatrixXd ForwardBatch(const Eigen::MatrixXd& x) const;

  // FNV-1a over shapes, activations and parameter bytes.
  std::uint64_t Hash() const;

  bool AllFinite() const;

  friend bool operator==(const DenseNetwork& a, const DenseNetwork& b);

 protected:
  DenseNetwork() = default;
  explicit DenseNetwork(std::vector<DenseLayer> layers);

  std::vector<DenseLayer> layers_;
};

// x -> W x + b.
class LinearModel : public DenseNetwork {
 public:
  // Zero weights and bias.
  LinearModel(Eigen::Index in_dim, Eigen::Index out_dim);
  LinearModel(Eigen::MatrixXd weights, Eigen::VectorXd bias);

  // Weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)), zero bias.
  static LinearModel Init(Eigen::Index in_dim, Eigen::Index out_dim,
                          std::uint64_t seed);

  Eigen::VectorXd Forward(Features x) const;
};

// ReLU hidden layers, identity scalar output.
class MlpModel : public DenseNetwork {
 public:
  static constexpr std::size_t kMaxHiddenLayers = 3;

  // Layers must chain (layer k+1 input = layer k output), every hidden
  // layer ReLU, final layer identity with one output.
  explicit MlpModel(std::vector<DenseLayer> layers);

  static MlpModel Init(Eigen::Index in_dim,
                       const std::vector<Eigen::Index>& hidden_widths,
                       std::uint64_t seed);

  std::size_t depth() const { return layers_.size() - 1; }
  double Forward(Features x) const;
};

// Gradient tensors mirroring a network's layers plus the batch-mean loss.
struct GradientBundle {
  struct Layer {
    Eigen::MatrixXd weights;
    Eigen::VectorXd bias;
  };
  std::vector<Layer> layers;
  double loss = 0.0;

  static GradientBundle ZerosLike(const DenseNetwork& net);
  Eigen::VectorXd Flatten() const;
  bool AllFinite() const;
};

// Batch view: features n x d, targets n, precomputed expert costs n x n_e
// (costs may be empty for plain regression).
struct BatchView {
  const Eigen::MatrixXd& features;
  const Eigen::VectorXd& targets;
  const Eigen::MatrixXd& costs;
};

struct GradOptions {
  std::size_t chunk_rows = 64;
  std::size_t workers = 1;
};

// Gradient of the batch mean of L(net(x), y).
GradientBundle GradRegression(const DenseNetwork& model,
                              const RegressionLoss& loss,
                              const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& targets,
                              const GradOptions& options = {});

// Gradients of the batch mean of the single-stage surrogate with respect to
// h's and r's parameters. Throws NonFiniteError naming the sample index if
// any per-sample value or gradient is not finite.
std::pair<GradientBundle, GradientBundle> GradSingleStage(
    const LinearModel& h, const LinearModel& r, const RegressionLoss& loss,
    const Surrogate& surrogate, const BatchView& batch,
    const GradOptions& options = {});

// Gradient of the batch mean of the two-stage surrogate with respect to r;
// fixed_h only supplies predictions.
GradientBundle GradTwoStage(const LinearModel& r, const DenseNetwork& fixed_h,
                            const RegressionLoss& loss,
                            const Surrogate& surrogate, const BatchView& batch,
                            const GradOptions& options = {});

// Batch-mean surrogate values without gradients (used for logging and by
// finite-difference checks).
double SingleStageObjective(const LinearModel& h, const LinearModel& r,
                            const RegressionLoss& loss,
                            const Surrogate& surrogate, const BatchView& batch);
double TwoStageObjective(const LinearModel& r, const DenseNetwork& fixed_h,
                         const RegressionLoss& loss, const Surrogate& surrogate,
                         const BatchView& batch);
double RegressionObjective(const DenseNetwork& model, const RegressionLoss& loss,
                           const Eigen::MatrixXd& features,
                           const Eigen::VectorXd& targets);

}  // namespace deferral

#endif  // DEFERRAL_MODELS_H_

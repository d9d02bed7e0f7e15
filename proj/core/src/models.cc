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

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <thread>

#include "deferral/errors.h"
#include "deferral/rng.h"

namespace deferral {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void InitLayer(DenseLayer& layer, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weights.cols()));
  // Row-major fill order so the draw sequence matches the checkpoint layout.
  for (Index i = 0; i < layer.weights.rows(); ++i) {
    for (Index j = 0; j < layer.weights.cols(); ++j) {
      layer.weights(i, j) = rng.Uniform(-bound, bound);
    }
  }
  layer.bias.setZero();
}

struct ForwardCache {
  // activations[0] is the input chunk; activations[k] is the output of
  // layer k-1 after its activation. pre[k] is layer k's pre-activation.
  std::vector<MatrixXd> activations;
  std::vector<MatrixXd> pre;

  const MatrixXd& output() const { return activations.back(); }
};

ForwardCache ForwardWithCache(const DenseNetwork& net, const MatrixXd& x) {
  ForwardCache cache;
  const auto& layers = net.layers();
  cache.activations.reserve(layers.size() + 1);
  cache.pre.reserve(layers.size());
  cache.activations.push_back(x);
  for (const DenseLayer& layer : layers) {
    MatrixXd z = cache.activations.back() * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    cache.pre.push_back(z);
    if (layer.activation == Activation::kRelu) z = z.cwiseMax(0.0);
    cache.activations.push_back(std::move(z));
  }
  return cache;
}

// Accumulates the parameter gradient for output gradient d_out into grad.
void Backward(const DenseNetwork& net, const ForwardCache& cache,
              MatrixXd d_out, GradientBundle& grad) {
  const auto& layers = net.layers();
  MatrixXd delta = std::move(d_out);
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (layers[k].activation == Activation::kRelu) {
      // ReLU subgradient at exactly 0 is 0.
      delta = delta.cwiseProduct(
          (cache.pre[k].array() > 0.0).cast<double>().matrix());
    }
    grad.layers[k].weights.noalias() += delta.transpose() * cache.activations[k];
    grad.layers[k].bias += delta.colwise().sum().transpose();
    if (k > 0) delta = delta * layers[k].weights;
  }
}

MatrixXd Rows(const MatrixXd& m, Index begin, Index count) {
  return m.middleRows(begin, count);
}

// Runs fn over fixed-size row chunks (possibly on several threads) and sums
// the per-chunk results in chunk order.
template <typename Result>
Result ChunkedReduce(Index n, const GradOptions& options,
                     const std::function<Result(Index, Index)>& fn,
                     const std::function<void(Result&, const Result&)>& add) {
  const Index chunk = static_cast<Index>(std::max<std::size_t>(options.chunk_rows, 1));
  const Index num_chunks = std::max<Index>((n + chunk - 1) / chunk, 1);
  std::vector<Result> partial(static_cast<std::size_t>(num_chunks));
  auto run = [&](Index c) {
    const Index begin = c * chunk;
    const Index count = std::min(chunk, n - begin);
    partial[static_cast<std::size_t>(c)] = fn(begin, std::max<Index>(count, 0));
  };
  const std::size_t workers =
      std::min<std::size_t>(std::max<std::size_t>(options.workers, 1),
                            static_cast<std::size_t>(num_chunks));
  if (workers <= 1) {
    for (Index c = 0; c < num_chunks; ++c) run(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (Index c = static_cast<Index>(w); c < num_chunks;
               c += static_cast<Index>(workers)) {
            run(c);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  Result total = std::move(partial.front());
  for (std::size_t c = 1; c < partial.size(); ++c) add(total, partial[c]);
  return total;
}

void AddInto(GradientBundle& a, const GradientBundle& b) {
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    a.layers[k].weights += b.layers[k].weights;
    a.layers[k].bias += b.layers[k].bias;
  }
  a.loss += b.loss;
}

void ScaleBundle(GradientBundle& g, double s) {
  for (auto& layer : g.layers) {
    layer.weights *= s;
    layer.bias *= s;
  }
  g.loss *= s;
}

void CheckBatch(const BatchView& batch, Index n_scores, bool need_costs) {
  const Index n = batch.features.rows();
  if (batch.targets.size() != n) throw StructuralError("targets do not match features");
  if (need_costs) {
    if (batch.costs.rows() != n) throw StructuralError("costs do not match features");
    if (batch.costs.cols() + 1 != n_scores) {
      throw StructuralError("scorer has " + std::to_string(n_scores) +
                            " outputs but costs have " +
                            std::to_string(batch.costs.cols()) + " experts");
    }
  }
}

void CheckFinite(double v, Index sample) {
  if (!std::isfinite(v)) {
    throw NonFiniteError("non-finite loss or gradient at sample " +
                         std::to_string(sample),
                         static_cast<std::size_t>(sample));
  }
}

// Per-chunk surrogate evaluation shared by the single- and two-stage
// gradients. Fills d_h (n x 1) and d_r (n x n_scores) and returns the
// chunk's summed single-stage or two-stage loss.
double SurrogateChunk(const MatrixXd& h_out, const MatrixXd& r_out,
                      const RegressionLoss& loss, const Surrogate& surrogate,
                      const BatchView& batch, Index begin, bool two_stage,
                      MatrixXd* d_h, MatrixXd& d_r) {
  const Index rows = r_out.rows();
  const Index n_scores = r_out.cols();
  const Index n_e = n_scores - 1;
  d_r.resize(rows, n_scores);
  if (d_h != nullptr) d_h->resize(rows, 1);
  std::vector<double> scores(static_cast<std::size_t>(n_scores));
  std::vector<double> costs(static_cast<std::size_t>(n_e));
  std::vector<double> score_grad(static_cast<std::size_t>(n_scores));
  double total = 0.0;
  for (Index i = 0; i < rows; ++i) {
    const Index sample = begin + i;
    for (Index j = 0; j < n_scores; ++j) scores[static_cast<std::size_t>(j)] = r_out(i, j);
    for (Index j = 0; j < n_e; ++j) {
      costs[static_cast<std::size_t>(j)] = batch.costs(sample, j);
    }
    const double pred = h_out(i, 0);
    const double y = batch.targets(sample);
    const DeferralTerms terms{loss(pred, y), costs};
    double d_pred_loss = 0.0;
    double value = SingleStageSurrogateWithGrad(scores, terms, surrogate,
                                                score_grad, &d_pred_loss);
    if (two_stage) value += static_cast<double>(n_e - 1) * terms.predictor_loss;
    CheckFinite(value, sample);
    total += value;
    for (Index j = 0; j < n_scores; ++j) {
      const double g = score_grad[static_cast<std::size_t>(j)];
      CheckFinite(g, sample);
      d_r(i, j) = g;
    }
    if (d_h != nullptr) {
      const double g = d_pred_loss * loss.Derivative(pred, y);
      CheckFinite(g, sample);
      (*d_h)(i, 0) = g;
    }
  }
  return total;
}

}  // namespace

// ---------------------------------------------------------------------------
// DenseNetwork

DenseNetwork::DenseNetwork(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ConfigError("network needs at least one layer");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const DenseLayer& l = layers_[k];
    if (l.weights.rows() != l.bias.size()) {
      throw StructuralError("layer " + std::to_string(k) + " bias size mismatch");
    }
    if (k > 0 && l.weights.cols() != layers_[k - 1].weights.rows()) {
      throw StructuralError("layer " + std::to_string(k) +
                            " input does not match previous output");
    }
  }
}

std::size_t DenseNetwork::num_parameters() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  }
  return n;
}

Eigen::VectorXd DenseNetwork::Flatten() const {
  VectorXd out(static_cast<Index>(num_parameters()));
  Index pos = 0;
  for (const auto& l : layers_) {
    for (Index i = 0; i < l.weights.rows(); ++i) {
      for (Index j = 0; j < l.weights.cols(); ++j) out(pos++) = l.weights(i, j);
    }
    for (Index i = 0; i < l.bias.size(); ++i) out(pos++) = l.bias(i);
  }
  return out;
}

void DenseNetwork::Unflatten(const Eigen::VectorXd& params) {
  if (params.size() != static_cast<Index>(num_parameters())) {
    throw StructuralError("parameter vector has wrong length");
  }
  Index pos = 0;
  for (auto& l : layers_) {
    for (Index i = 0; i < l.weights.rows(); ++i) {
      for (Index j = 0; j < l.weights.cols(); ++j) l.weights(i, j) = params(pos++);
    }
    for (Index i = 0; i < l.bias.size(); ++i) l.bias(i) = params(pos++);
  }
}

Eigen::MatrixXd DenseNetwork::ForwardBatch(const Eigen::MatrixXd& x) const {
  if (x.cols() != in_dim()) {
    throw StructuralError("input has " + std::to_string(x.cols()) +
                          " features, model expects " + std::to_string(in_dim()));
  }
  MatrixXd a = x;
  for (const DenseLayer& layer : layers_) {
    MatrixXd z = a * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    if (layer.activation == Activation::kRelu) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

std::uint64_t DenseNetwork::Hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& l : layers_) {
    const std::int64_t shape[2] = {l.weights.rows(), l.weights.cols()};
    h = Fnv1a64(shape, sizeof(shape), h);
    const auto act = static_cast<std::uint8_t>(l.activation);
    h = Fnv1a64(&act, 1, h);
  }
  const VectorXd flat = Flatten();
  return Fnv1a64(flat.data(), static_cast<std::size_t>(flat.size()) * sizeof(double), h);
}

bool DenseNetwork::AllFinite() const {
  for (const auto& l : layers_) {
    if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

bool operator==(const DenseNetwork& a, const DenseNetwork& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t k = 0; k < a.layers_.size(); ++k) {
    const auto& la = a.layers_[k];
    const auto& lb = b.layers_[k];
    if (la.activation != lb.activation) return false;
    if (la.weights.rows() != lb.weights.rows() || la.weights.cols() != lb.weights.cols()) {
      return false;
    }
    if (la.weights != lb.weights || la.bias != lb.bias) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// LinearModel / MlpModel

LinearModel::LinearModel(Eigen::Index in_dim, Eigen::Index out_dim)
    : LinearModel(MatrixXd::Zero(out_dim, in_dim), VectorXd::Zero(out_dim)) {}

LinearModel::LinearModel(Eigen::MatrixXd weights, Eigen::VectorXd bias)
    : DenseNetwork({DenseLayer{std::move(weights), std::move(bias), Activation::kIdentity}}) {}

LinearModel LinearModel::Init(Eigen::Index in_dim, Eigen::Index out_dim,
                              std::uint64_t seed) {
  LinearModel model(in_dim, out_dim);
  Rng rng(seed);
  InitLayer(model.layers_.front(), rng);
  return model;
}

Eigen::VectorXd LinearModel::Forward(Features x) const {
  const DenseLayer& l = layers_.front();
  if (static_cast<Index>(x.size()) != l.weights.cols()) {
    throw StructuralError("input has " + std::to_string(x.size()) +
                          " features, model expects " + std::to_string(l.weights.cols()));
  }
  const Eigen::Map<const VectorXd> v(x.data(), static_cast<Index>(x.size()));
  return l.weights * v + l.bias;
}

MlpModel::MlpModel(std::vector<DenseLayer> layers) : DenseNetwork(std::move(layers)) {
  if (layers_.size() < 2 || layers_.size() > kMaxHiddenLayers + 1) {
    throw ConfigError("MLP needs between 1 and 3 hidden layers");
  }
  for (std::size_t k = 0; k + 1 < layers_.size(); ++k) {
    if (layers_[k].activation != Activation::kRelu) {
      throw ConfigError("MLP hidden layers must use ReLU");
    }
  }
  if (layers_.back().activation != Activation::kIdentity || layers_.back().weights.rows() != 1) {
    throw ConfigError("MLP output layer must be a single identity unit");
  }
}

MlpModel MlpModel::Init(Eigen::Index in_dim,
                        const std::vector<Eigen::Index>& hidden_widths,
                        std::uint64_t seed) {
  if (hidden_widths.empty() || hidden_widths.size() > kMaxHiddenLayers) {
    throw ConfigError("MLP needs between 1 and 3 hidden layers");
  }
  std::vector<DenseLayer> layers;
  Index prev = in_dim;
  for (Index w : hidden_widths) {
    if (w < 1) throw ConfigError("hidden width must be positive");
    layers.push_back({MatrixXd::Zero(w, prev), VectorXd::Zero(w), Activation::kRelu});
    prev = w;
  }
  layers.push_back({MatrixXd::Zero(1, prev), VectorXd::Zero(1), Activation::kIdentity});
  Rng rng(seed);
  for (auto& l : layers) InitLayer(l, rng);
  return MlpModel(std::move(layers));
}

double MlpModel::Forward(Features x) const {
  if (static_cast<Index>(x.size()) != in_dim()) {
    throw StructuralError("input has " + std::to_string(x.size()) +
                          " features, model expects " + std::to_string(in_dim()));
  }
  VectorXd a = Eigen::Map<const VectorXd>(x.data(), static_cast<Index>(x.size()));
  for (const DenseLayer& layer : layers_) {
    VectorXd z = layer.weights * a + layer.bias;
    if (layer.activation == Activation::kRelu) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a(0);
}

// ---------------------------------------------------------------------------
// GradientBundle

GradientBundle GradientBundle::ZerosLike(const DenseNetwork& net) {
  GradientBundle g;
  for (const auto& l : net.layers()) {
    g.layers.push_back({MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                        VectorXd::Zero(l.bias.size())});
  }
  return g;
}

Eigen::VectorXd GradientBundle::Flatten() const {
  Index total = 0;
  for (const auto& l : layers) total += l.weights.size() + l.bias.size();
  VectorXd out(total);
  Index pos = 0;
  for (const auto& l : layers) {
    for (Index i = 0; i < l.weights.rows(); ++i) {
      for (Index j = 0; j < l.weights.cols(); ++j) out(pos++) = l.weights(i, j);
    }
    for (Index i = 0; i < l.bias.size(); ++i) out(pos++) = l.bias(i);
  }
  return out;
}

bool GradientBundle::AllFinite() const {
  if (!std::isfinite(loss)) return false;
  for (const auto& l : layers) {
    if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Gradients

GradientBundle GradRegression(const DenseNetwork& model, const RegressionLoss& loss,
                              const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& targets,
                              const GradOptions& options) {
  const Index n = features.rows();
  if (targets.size() != n) throw StructuralError("targets do not match features");
  if (n == 0) throw DataError("empty batch");
  std::function<GradientBundle(Index, Index)> fn = [&](Index begin, Index count) {
    GradientBundle g = GradientBundle::ZerosLike(model);
    if (count == 0) return g;
    const ForwardCache cache = ForwardWithCache(model, Rows(features, begin, count));
    const MatrixXd& out = cache.output();
    MatrixXd d_out(count, 1);
    for (Index i = 0; i < count; ++i) {
      const double y = targets(begin + i);
      const double value = loss(out(i, 0), y);
      CheckFinite(value, begin + i);
      g.loss += value;
      d_out(i, 0) = loss.Derivative(out(i, 0), y);
      CheckFinite(d_out(i, 0), begin + i);
    }
    Backward(model, cache, std::move(d_out), g);
    return g;
  };
  std::function<void(GradientBundle&, const GradientBundle&)> add = AddInto;
  GradientBundle total = ChunkedReduce<GradientBundle>(n, options, fn, add);
  ScaleBundle(total, 1.0 / static_cast<double>(n));
  return total;
}

std::pair<GradientBundle, GradientBundle> GradSingleStage(
    const LinearModel& h, const LinearModel& r, const RegressionLoss& loss,
    const Surrogate& surrogate, const BatchView& batch, const GradOptions& options) {
  const Index n = batch.features.rows();
  CheckBatch(batch, r.out_dim(), true);
  if (n == 0) throw DataError("empty batch");
  if (h.out_dim() != 1) throw StructuralError("predictor must have one output");
  using Pair = std::pair<GradientBundle, GradientBundle>;
  std::function<Pair(Index, Index)> fn = [&](Index begin, Index count) {
    Pair g{GradientBundle::ZerosLike(h), GradientBundle::ZerosLike(r)};
    if (count == 0) return g;
    const MatrixXd x = Rows(batch.features, begin, count);
    const ForwardCache h_cache = ForwardWithCache(h, x);
    const ForwardCache r_cache = ForwardWithCache(r, x);
    MatrixXd d_h;
    MatrixXd d_r;
    const double total = SurrogateChunk(h_cache.output(), r_cache.output(), loss,
                                        surrogate, batch, begin, false, &d_h, d_r);
    g.first.loss = total;
    g.second.loss = total;
    Backward(h, h_cache, std::move(d_h), g.first);
    Backward(r, r_cache, std::move(d_r), g.second);
    return g;
  };
  std::function<void(Pair&, const Pair&)> add = [](Pair& a, const Pair& b) {
    AddInto(a.first, b.first);
    AddInto(a.second, b.second);
  };
  Pair total = ChunkedReduce<Pair>(n, options, fn, add);
  const double inv = 1.0 / static_cast<double>(n);
  ScaleBundle(total.first, inv);
  ScaleBundle(total.second, inv);
  return total;
}

GradientBundle GradTwoStage(const LinearModel& r, const DenseNetwork& fixed_h,
                            const RegressionLoss& loss, const Surrogate& surrogate,
                            const BatchView& batch, const GradOptions& options) {
  const Index n = batch.features.rows();
  CheckBatch(batch, r.out_dim(), true);
  if (n == 0) throw DataError("empty batch");
  if (fixed_h.out_dim() != 1) throw StructuralError("predictor must have one output");
  std::function<GradientBundle(Index, Index)> fn = [&](Index begin, Index count) {
    GradientBundle g = GradientBundle::ZerosLike(r);
    if (count == 0) return g;
    const MatrixXd x = Rows(batch.features, begin, count);
    const MatrixXd h_out = fixed_h.ForwardBatch(x);
    const ForwardCache r_cache = ForwardWithCache(r, x);
    MatrixXd d_r;
    g.loss = SurrogateChunk(h_out, r_cache.output(), loss, surrogate, batch, begin,
                            true, nullptr, d_r);
    Backward(r, r_cache, std::move(d_r), g);
    return g;
  };
  std::function<void(GradientBundle&, const GradientBundle&)> add = AddInto;
  GradientBundle total = ChunkedReduce<GradientBundle>(n, options, fn, add);
  ScaleBundle(total, 1.0 / static_cast<double>(n));
  return total;
}

double SingleStageObjective(const LinearModel& h, const LinearModel& r,
                            const RegressionLoss& loss, const Surrogate& surrogate,
                            const BatchView& batch) {
  CheckBatch(batch, r.out_dim(), true);
  const MatrixXd h_out = h.ForwardBatch(batch.features);
  const MatrixXd r_out = r.ForwardBatch(batch.features);
  const Index n_e = batch.costs.cols();
  std::vector<double> scores(static_cast<std::size_t>(n_e + 1));
  std::vector<double> costs(static_cast<std::size_t>(n_e));
  double total = 0.0;
  for (Index i = 0; i < batch.features.rows(); ++i) {
    for (Index j = 0; j <= n_e; ++j) scores[static_cast<std::size_t>(j)] = r_out(i, j);
    for (Index j = 0; j < n_e; ++j) costs[static_cast<std::size_t>(j)] = batch.costs(i, j);
    total += SingleStageSurrogate(scores, {loss(h_out(i, 0), batch.targets(i)), costs},
                                  surrogate);
  }
  return total / static_cast<double>(batch.features.rows());
}

double TwoStageObjective(const LinearModel& r, const DenseNetwork& fixed_h,
                         const RegressionLoss& loss, const Surrogate& surrogate,
                         const BatchView& batch) {
  CheckBatch(batch, r.out_dim(), true);
  const MatrixXd h_out = fixed_h.ForwardBatch(batch.features);
  const MatrixXd r_out = r.ForwardBatch(batch.features);
  const Index n_e = batch.costs.cols();
  std::vector<double> scores(static_cast<std::size_t>(n_e + 1));
  std::vector<double> costs(static_cast<std::size_t>(n_e));
  double total = 0.0;
  for (Index i = 0; i < batch.features.rows(); ++i) {
    for (Index j = 0; j <= n_e; ++j) scores[static_cast<std::size_t>(j)] = r_out(i, j);
    for (Index j = 0; j < n_e; ++j) costs[static_cast<std::size_t>(j)] = batch.costs(i, j);
    total += TwoStageSurrogate(scores, {loss(h_out(i, 0), batch.targets(i)), costs},
                               surrogate);
  }
  return total / static_cast<double>(batch.features.rows());
}

double RegressionObjective(const DenseNetwork& model, const RegressionLoss& loss,
                           const Eigen::MatrixXd& features,
                           const Eigen::VectorXd& targets) {
  const MatrixXd out = model.ForwardBatch(features);
  double total = 0.0;
  for (Index i = 0; i < features.rows(); ++i) total += loss(out(i, 0), targets(i));
  return total / static_cast<double>(features.rows());
}

}  // namespace deferral

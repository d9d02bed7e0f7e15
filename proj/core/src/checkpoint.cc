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

#include "deferral/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "deferral/errors.h"
#include "deferral/rng.h"

namespace deferral {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'D', 'F', 'R', 'C', 'K', 'P', 'T', '\0'};

void PutU32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

void PutF64(std::string& out, double v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void Take(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint is truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t U32() {
    std::uint32_t v = 0;
    Take(&v, sizeof(v));
    return v;
  }
  double F64() {
    double v = 0;
    Take(&v, sizeof(v));
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::vector<DenseLayer> ParseLayers(const std::string& bytes, ModelKind expected) {
  if (bytes.size() < sizeof(kMagic) + 12 + 8) throw DataError("checkpoint is truncated");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (Fnv1a64(bytes.data(), body) != stored) throw DataError("checkpoint checksum mismatch");

  Reader in(bytes);
  char magic[8];
  in.Take(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a deferral checkpoint (bad magic)");
  }
  const std::uint32_t version = in.U32();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto kind = static_cast<ModelKind>(in.U32());
  if (kind != expected) throw DataError("checkpoint holds a different model kind");
  const std::uint32_t count = in.U32();
  if (count == 0 || count > 16) throw DataError("implausible layer count in checkpoint");
  std::vector<DenseLayer> layers;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t rows = in.U32();
    const std::uint32_t cols = in.U32();
    const std::uint32_t act = in.U32();
    if (act > 1) throw DataError("unknown activation in checkpoint");
    if (static_cast<std::uint64_t>(rows) * cols * 8 > body) {
      throw DataError("layer shape exceeds checkpoint size");
    }
    DenseLayer layer{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows),
                     static_cast<Activation>(act)};
    for (std::uint32_t i = 0; i < rows; ++i) {
      for (std::uint32_t j = 0; j < cols; ++j) layer.weights(i, j) = in.F64();
    }
    for (std::uint32_t i = 0; i < rows; ++i) layer.bias(i) = in.F64();
    layers.push_back(std::move(layer));
  }
  if (in.pos() != body) throw DataError("trailing bytes in checkpoint");
  return layers;
}

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void WriteFile(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint " + path.string());
}

}  // namespace

std::string SerializeModel(const DenseNetwork& model, ModelKind kind) {
  std::string out(kMagic, sizeof(kMagic));
  PutU32(out, kCheckpointVersion);
  PutU32(out, static_cast<std::uint32_t>(kind));
  PutU32(out, static_cast<std::uint32_t>(model.layers().size()));
  for (const DenseLayer& l : model.layers()) {
    PutU32(out, static_cast<std::uint32_t>(l.weights.rows()));
    PutU32(out, static_cast<std::uint32_t>(l.weights.cols()));
    PutU32(out, static_cast<std::uint32_t>(l.activation));
    for (Eigen::Index i = 0; i < l.weights.rows(); ++i) {
      for (Eigen::Index j = 0; j < l.weights.cols(); ++j) PutF64(out, l.weights(i, j));
    }
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) PutF64(out, l.bias(i));
  }
  const std::uint64_t sum = Fnv1a64(out.data(), out.size());
  out.append(reinterpret_cast<const char*>(&sum), sizeof(sum));
  return out;
}

LinearModel DeserializeLinear(const std::string& bytes) {
  auto layers = ParseLayers(bytes, ModelKind::kLinear);
  if (layers.size() != 1 || layers[0].activation != Activation::kIdentity) {
    throw DataError("linear checkpoint must hold one identity layer");
  }
  return LinearModel(std::move(layers[0].weights), std::move(layers[0].bias));
}

MlpModel DeserializeMlp(const std::string& bytes) {
  try {
    return MlpModel(ParseLayers(bytes, ModelKind::kMlp));
  } catch (const ConfigError& e) {
    throw DataError(std::string("invalid MLP checkpoint: ") + e.what());
  }
}

void SaveCheckpoint(const std::filesystem::path& path, const LinearModel& model) {
  WriteFile(path, SerializeModel(model, ModelKind::kLinear));
}

void SaveCheckpoint(const std::filesystem::path& path, const MlpModel& model) {
  WriteFile(path, SerializeModel(model, ModelKind::kMlp));
}

LinearModel LoadLinearCheckpoint(const std::filesystem::path& path) {
  const std::string bytes = ReadFile(path);
  try {
    return DeserializeLinear(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

MlpModel LoadMlpCheckpoint(const std::filesystem::path& path) {
  const std::string bytes = ReadFile(path);
  try {
    return DeserializeMlp(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace deferral

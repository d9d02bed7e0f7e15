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

// Model checkpoint container, format version 1. All integers are unsigned
// little-endian, all reals IEEE-754 binary64 little-endian.
//
//   offset  bytes  field
//   0       8      magic "DFRCKPT\0"
//   8       4      format version (1)
//   12      4      model kind (1 = linear, 2 = mlp)
//   16      4      layer count L
//   then for each of the L layers:
//           4      rows (output width)
//           4      cols (input width)
//           4      activation (0 = identity, 1 = relu)
//           8*rows*cols  weights, row-major
//           8*rows       bias
//   last 8 bytes:  FNV-1a 64 of every preceding byte
//
// Readers reject unknown versions, bad magic, truncated files and checksum
// mismatches. Files written for the same parameters are byte-identical.

#ifndef DEFERRAL_CHECKPOINT_H_
#define DEFERRAL_CHECKPOINT_H_

#include <cstdint>
#include <filesystem>
#include <string>

#include "deferral/models.h"

namespace deferral {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind : std::uint32_t { kLinear = 1, kMlp = 2 };

std::string SerializeModel(const DenseNetwork& model, ModelKind kind);
// Throws DataError on malformed input or if the stored kind differs.
LinearModel DeserializeLinear(const std::string& bytes);
MlpModel DeserializeMlp(const std::string& bytes);

void SaveCheckpoint(const std::filesystem::path& path, const LinearModel& model);
void SaveCheckpoint(const std::filesystem::path& path, const MlpModel& model);
LinearModel LoadLinearCheckpoint(const std::filesystem::path& path);
MlpModel LoadMlpCheckpoint(const std::filesystem::path& path);

}  // namespace deferral

#endif  // DEFERRAL_CHECKPOINT_H_

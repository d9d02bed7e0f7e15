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

#ifndef DEFERRAL_DATA_IO_H_
#define DEFERRAL_DATA_IO_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace deferral {

struct StandardizationStats {
  Eigen::VectorXd feature_mean;
  Eigen::VectorXd feature_std;
  double target_mean = 0.0;
  double target_std = 1.0;
};

struct Dataset {
  Eigen::MatrixXd features;  // n x d
  Eigen::VectorXd targets;   // n
  std::vector<std::string> feature_names;
  std::string target_name;
  std::string provenance;
  // Present once the dataset has been standardized.
  std::optional<StandardizationStats> stats;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dims() const { return features.cols(); }

  Dataset Subset(const std::vector<std::size_t>& rows) const;
  // FNV-1a over the shape, feature and target bytes.
  std::uint64_t Hash() const;
};

struct CsvSchema {
  // Column holding the target: by header name when non-empty, otherwise by
  // index (negative counts from the end, -1 = last column).
  std::string target_column;
  int target_index = -1;
  // "," / ";" / "\t" etc.; the word "whitespace" splits on runs of blanks.
  std::string delimiter = ",";
  bool has_header = true;
  std::vector<std::string> drop_columns;
};

// Throws DataError naming the 1-based line (and column) of any malformed or
// non-finite cell, and on inconsistent column counts.
Dataset ParseCsv(std::string_view text, const CsvSchema& schema,
                 std::string provenance = "inline");
Dataset LoadCsv(const std::filesystem::path& path, const CsvSchema& schema);

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train, val, test;
  std::vector<std::size_t> train_rows, val_rows, test_rows;
};

// Seeded permutation then contiguous slicing: floor(train * n),
// floor(val * n), remainder. Requires n >= 5.
Splits Split(const Dataset& data, const SplitSpec& spec);

// Means and standard deviations (population, n denominator) of the given
// split; constant columns get std = 1.
StandardizationStats ComputeStats(const Dataset& train);
Dataset ApplyStandardization(const Dataset& data, const StandardizationStats& stats);
Dataset Destandardize(const Dataset& data);
inline double DestandardizeTarget(double value, const StandardizationStats& s) {
  return value * s.target_std + s.target_mean;
}

// Standardizes all three splits with statistics from the training split.
Splits StandardizeSplits(const Splits& raw);

enum class SynthKind { kLinear, kPiecewise, kHeteroscedastic };
SynthKind ParseSynthKind(std::string_view name);

struct SyntheticData {
  Dataset data;
  Eigen::VectorXd coefficients;  // d
  Eigen::VectorXd noiseless;     // n, target before noise
};

// Features ~ N(0, 1); coefficients ~ N(0, 1).
//   linear:          y = x.b + noise * e
//   piecewise:       y = sum_j b_j * (x_j > 0 ? x_j : -0.5 x_j) + noise * e
//   heteroscedastic: y = x.b + noise * (0.5 + |x_0|) * e
SyntheticData SynthRegression(Eigen::Index n, Eigen::Index d, double noise,
                              std::uint64_t seed, SynthKind kind);

// Lowercase hex SHA-256 of a file's bytes.
std::string Sha256File(const std::filesystem::path& path);

struct ManifestEntry {
  std::string name;
  std::filesystem::path path;
  CsvSchema schema;
  std::string sha256;  // empty: not verified
  std::optional<Eigen::Index> expected_rows;
  std::optional<Eigen::Index> expected_features;
};

// JSON manifest: {"datasets": [{"name", "path", "target_column" |
// "target_index", "delimiter", "has_header", "drop_columns", "sha256",
// "rows", "features"}]}. Relative paths resolve against the manifest's
// directory. Unknown keys are rejected.
std::vector<ManifestEntry> LoadManifest(const std::filesystem::path& path);
const ManifestEntry& FindEntry(const std::vector<ManifestEntry>& entries,
                               std::string_view name);
// Verifies checksum and shape when the entry declares them.
Dataset LoadFromManifest(const ManifestEntry& entry);

}  // namespace deferral

#endif  // DEFERRAL_DATA_IO_H_

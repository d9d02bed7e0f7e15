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

#include "deferral/data_io.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "deferral/errors.h"
#include "deferral/rng.h"
#include "json.hpp"

namespace deferral {
namespace {

using Eigen::Index;

std::string_view Trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
    s = s.substr(1, s.size() - 2);
  }
  return s;
}

std::vector<std::string_view> SplitLine(std::string_view line, const std::string& delim) {
  std::vector<std::string_view> cells;
  if (delim == "whitespace") {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
      if (i >= line.size()) break;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
      cells.push_back(line.substr(i, j - i));
      i = j;
    }
    return cells;
  }
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      cells.push_back(Trim(line.substr(start)));
      break;
    }
    cells.push_back(Trim(line.substr(start, pos - start)));
    start = pos + delim.size();
  }
  return cells;
}

bool ParseDouble(std::string_view cell, double& out) {
  if (cell.empty()) return false;
  if (cell.front() == '+') cell.remove_prefix(1);
  const auto* end = cell.data() + cell.size();
  const auto res = std::from_chars(cell.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

std::string Hex(const unsigned char* bytes, std::size_t n) {
  std::ostringstream os;
  for (std::size_t i = 0; i < n; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(bytes[i]);
  }
  return os.str();
}

}  // namespace

Dataset Dataset::Subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.features.resize(static_cast<Index>(rows.size()), features.cols());
  out.targets.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Index>(rows[i]);
    if (r >= features.rows()) throw StructuralError("subset row out of range");
    out.features.row(static_cast<Index>(i)) = features.row(r);
    out.targets(static_cast<Index>(i)) = targets(r);
  }
  out.feature_names = feature_names;
  out.target_name = target_name;
  out.provenance = provenance;
  out.stats = stats;
  return out;
}

std::uint64_t Dataset::Hash() const {
  const std::int64_t shape[2] = {features.rows(), features.cols()};
  std::uint64_t h = Fnv1a64(shape, sizeof(shape));
  // Column-major storage; hash in that order.
  h = Fnv1a64(features.data(), static_cast<std::size_t>(features.size()) * sizeof(double), h);
  return Fnv1a64(targets.data(), static_cast<std::size_t>(targets.size()) * sizeof(double), h);
}

Dataset ParseCsv(std::string_view text, const CsvSchema& schema, std::string provenance) {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  std::size_t expected_cols = 0;
  std::size_t start = 0;
  bool header_pending = schema.has_header;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (Trim(line).empty()) {
      if (end >= text.size()) break;
      continue;
    }
    auto cells = SplitLine(line, schema.delimiter);
    if (header_pending) {
      for (auto c : cells) header.emplace_back(Trim(c));
      expected_cols = cells.size();
      header_pending = false;
      continue;
    }
    if (expected_cols == 0) expected_cols = cells.size();
    if (cells.size() != expected_cols) {
      throw DataError(provenance + ": line " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " columns, expected " +
                      std::to_string(expected_cols));
    }
    std::vector<double> values(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      double v = 0.0;
      if (!ParseDouble(Trim(cells[c]), v) || !std::isfinite(v)) {
        const std::string col = header.empty() ? std::to_string(c + 1) : header[c];
        throw DataError(provenance + ": line " + std::to_string(line_no) + ", column " +
                        col + ": '" + std::string(Trim(cells[c])) +
                        "' is not a finite number");
      }
      values[c] = v;
    }
    rows.push_back(std::move(values));
    if (end >= text.size()) break;
  }
  if (rows.empty()) throw DataError(provenance + ": no data rows");

  const std::size_t ncols = expected_cols;
  if (header.empty()) {
    for (std::size_t c = 0; c < ncols; ++c) header.push_back("col" + std::to_string(c));
  }
  std::size_t target = 0;
  if (!schema.target_column.empty()) {
    auto it = std::find(header.begin(), header.end(), schema.target_column);
    if (it == header.end()) {
      throw DataError(provenance + ": target column '" + schema.target_column +
                      "' not found in header");
    }
    target = static_cast<std::size_t>(it - header.begin());
  } else {
    const long idx = schema.target_index < 0
                         ? static_cast<long>(ncols) + schema.target_index
                         : schema.target_index;
    if (idx < 0 || idx >= static_cast<long>(ncols)) {
      throw DataError(provenance + ": target index out of range");
    }
    target = static_cast<std::size_t>(idx);
  }
  std::set<std::size_t> dropped;
  for (const auto& name : schema.drop_columns) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw DataError(provenance + ": drop column '" + name + "' not found");
    }
    dropped.insert(static_cast<std::size_t>(it - header.begin()));
  }
  if (dropped.count(target)) throw DataError(provenance + ": target column is dropped");

  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < ncols; ++c) {
    if (c != target && !dropped.count(c)) feature_cols.push_back(c);
  }
  if (feature_cols.empty()) throw DataError(provenance + ": no feature columns");

  Dataset data;
  data.provenance = std::move(provenance);
  data.target_name = header[target];
  for (auto c : feature_cols) data.feature_names.push_back(header[c]);
  data.features.resize(static_cast<Index>(rows.size()), static_cast<Index>(feature_cols.size()));
  data.targets.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < feature_cols.size(); ++k) {
      data.features(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][feature_cols[k]];
    }
    data.targets(static_cast<Index>(i)) = rows[i][target];
  }
  return data;
}

Dataset LoadCsv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open dataset file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return ParseCsv(text, schema, path.string());
}

Splits Split(const Dataset& data, const SplitSpec& spec) {
  const double sum = spec.train + spec.val + spec.test;
  if (std::abs(sum - 1.0) > 1e-9 || spec.train <= 0 || spec.val < 0 || spec.test < 0) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  const auto n = static_cast<std::size_t>(data.size());
  if (n < 5) throw DataError("need at least 5 rows to split, got " + std::to_string(n));
  Rng rng(spec.seed);
  const std::vector<std::size_t> perm = rng.Permutation(n);
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(n)));
  Splits out;
  out.train_rows.assign(perm.begin(), perm.begin() + static_cast<long>(n_train));
  out.val_rows.assign(perm.begin() + static_cast<long>(n_train),
                      perm.begin() + static_cast<long>(n_train + n_val));
  out.test_rows.assign(perm.begin() + static_cast<long>(n_train + n_val), perm.end());
  out.train = data.Subset(out.train_rows);
  out.val = data.Subset(out.val_rows);
  out.test = data.Subset(out.test_rows);
  return out;
}

StandardizationStats ComputeStats(const Dataset& train) {
  const Index n = train.size();
  if (n == 0) throw DataError("cannot standardize an empty split");
  StandardizationStats s;
  s.feature_mean = train.features.colwise().mean().transpose();
  s.feature_std.resize(train.dims());
  for (Index c = 0; c < train.dims(); ++c) {
    const double var =
        (train.features.col(c).array() - s.feature_mean(c)).square().sum() / static_cast<double>(n);
    const double sd = std::sqrt(var);
    s.feature_std(c) = sd > 1e-12 ? sd : 1.0;
  }
  s.target_mean = train.targets.mean();
  const double tvar = (train.targets.array() - s.target_mean).square().sum() / static_cast<double>(n);
  s.target_std = std::sqrt(tvar) > 1e-12 ? std::sqrt(tvar) : 1.0;
  return s;
}

Dataset ApplyStandardization(const Dataset& data, const StandardizationStats& stats) {
  if (data.stats) throw DataError("dataset is already standardized");
  if (stats.feature_mean.size() != data.dims()) {
    throw StructuralError("standardization stats do not match feature count");
  }
  Dataset out = data;
  for (Index c = 0; c < data.dims(); ++c) {
    out.features.col(c) =
        (data.features.col(c).array() - stats.feature_mean(c)) / stats.feature_std(c);
  }
  out.targets = (data.targets.array() - stats.target_mean) / stats.target_std;
  out.stats = stats;
  return out;
}

Dataset Destandardize(const Dataset& data) {
  if (!data.stats) throw DataError("dataset is not standardized");
  const auto& s = *data.stats;
  Dataset out = data;
  for (Index c = 0; c < data.dims(); ++c) {
    out.features.col(c) = data.features.col(c).array() * s.feature_std(c) + s.feature_mean(c);
  }
  out.targets = data.targets.array() * s.target_std + s.target_mean;
  out.stats.reset();
  return out;
}

Splits StandardizeSplits(const Splits& raw) {
  const StandardizationStats stats = ComputeStats(raw.train);
  Splits out;
  out.train = ApplyStandardization(raw.train, stats);
  out.val = ApplyStandardization(raw.val, stats);
  out.test = ApplyStandardization(raw.test, stats);
  out.train_rows = raw.train_rows;
  out.val_rows = raw.val_rows;
  out.test_rows = raw.test_rows;
  return out;
}

SynthKind ParseSynthKind(std::string_view name) {
  if (name == "linear") return SynthKind::kLinear;
  if (name == "piecewise") return SynthKind::kPiecewise;
  if (name == "heteroscedastic") return SynthKind::kHeteroscedastic;
  throw ConfigError("unknown synthetic kind '" + std::string(name) + "'");
}

SyntheticData SynthRegression(Eigen::Index n, Eigen::Index d, double noise,
                              std::uint64_t seed, SynthKind kind) {
  if (n < 1 || d < 1) throw ConfigError("synthetic data needs n >= 1 and d >= 1");
  if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
  Rng rng(seed);
  SyntheticData out;
  out.coefficients.resize(d);
  for (Index j = 0; j < d; ++j) out.coefficients(j) = rng.Normal();
  out.data.features.resize(n, d);
  out.data.targets.resize(n);
  out.noiseless.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) out.data.features(i, j) = rng.Normal();
  }
  for (Index i = 0; i < n; ++i) {
    double clean = 0.0;
    double scale = noise;
    for (Index j = 0; j < d; ++j) {
      const double x = out.data.features(i, j);
      if (kind == SynthKind::kPiecewise) {
        clean += out.coefficients(j) * (x > 0 ? x : -0.5 * x);
      } else {
        clean += out.coefficients(j) * x;
      }
    }
    if (kind == SynthKind::kHeteroscedastic) {
      scale = noise * (0.5 + std::abs(out.data.features(i, 0)));
    }
    out.noiseless(i) = clean;
    out.data.targets(i) = clean + scale * rng.Normal();
  }
  for (Index j = 0; j < d; ++j) out.data.feature_names.push_back("x" + std::to_string(j));
  out.data.target_name = "y";
  out.data.provenance = "synthetic";
  return out;
}

std::string Sha256File(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("OpenSSL SHA-256 initialisation failed");
  }
  char buf[1 << 15];
  while (f) {
    f.read(buf, sizeof(buf));
    if (f.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(f.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  return Hex(digest, len);
}

std::vector<ManifestEntry> LoadManifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("datasets") || !doc["datasets"].is_array()) {
    throw ConfigError("manifest needs a top-level \"datasets\" array");
  }
  static const std::set<std::string> kKeys = {
      "name",      "path",     "target_column", "target_index", "delimiter",
      "has_header", "drop_columns", "sha256",   "rows",         "features",
      "notes"};
  std::vector<ManifestEntry> out;
  const auto base = path.parent_path();
  try {
    for (const auto& item : doc["datasets"]) {
      for (const auto& [key, value] : item.items()) {
        if (!kKeys.count(key)) throw ConfigError("manifest: unknown key '" + key + "'");
      }
      ManifestEntry e;
      e.name = item.at("name").get<std::string>();
      std::filesystem::path p = item.at("path").get<std::string>();
      e.path = p.is_absolute() ? p : base / p;
      e.schema.target_column = item.value("target_column", std::string());
      e.schema.target_index = item.value("target_index", -1);
      e.schema.delimiter = item.value("delimiter", std::string(","));
      e.schema.has_header = item.value("has_header", true);
      e.schema.drop_columns = item.value("drop_columns", std::vector<std::string>{});
      e.sha256 = item.value("sha256", std::string());
      if (item.contains("rows")) e.expected_rows = item["rows"].get<Index>();
      if (item.contains("features")) e.expected_features = item["features"].get<Index>();
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  return out;
}

const ManifestEntry& FindEntry(const std::vector<ManifestEntry>& entries,
                               std::string_view name) {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw ConfigError("dataset '" + std::string(name) + "' is not in the manifest");
}

Dataset LoadFromManifest(const ManifestEntry& entry) {
  if (!std::filesystem::exists(entry.path)) {
    throw DataError("dataset file missing: " + entry.path.string());
  }
  if (!entry.sha256.empty()) {
    const std::string actual = Sha256File(entry.path);
    if (actual != entry.sha256) {
      throw DataError("checksum mismatch for " + entry.path.string() + ": expected " +
                      entry.sha256 + ", got " + actual);
    }
  }
  Dataset data = LoadCsv(entry.path, entry.schema);
  data.provenance = entry.name;
  if (entry.expected_rows && data.size() != *entry.expected_rows) {
    throw DataError(entry.path.string() + ": expected " + std::to_string(*entry.expected_rows) +
                    " rows, found " + std::to_string(data.size()));
  }
  if (entry.expected_features && data.dims() != *entry.expected_features) {
    throw DataError(entry.path.string() + ": expected " +
                    std::to_string(*entry.expected_features) + " features, found " +
                    std::to_string(data.dims()));
  }
  return data;
}

}  // namespace deferral

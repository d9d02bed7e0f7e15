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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "deferral/errors.h"

namespace deferral {
namespace {

namespace fs = std::filesystem;

fs::path TempDir() {
  const fs::path dir =
      fs::temp_directory_path() /
      ("deferral_data_" +
       std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void Write(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

TEST(ParseCsvTest, HeaderAndNamedTarget) {
  CsvSchema schema;
  schema.target_column = "y";
  const Dataset d = ParseCsv("a,y,b\n1,2,3\n\n4,5,6\n", schema);
  ASSERT_EQ(d.size(), 2);
  ASSERT_EQ(d.dims(), 2);
  EXPECT_EQ(d.feature_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(d.target_name, "y");
  EXPECT_DOUBLE_EQ(d.features(1, 1), 6.0);
  EXPECT_DOUBLE_EQ(d.targets(0), 2.0);
}

TEST(ParseCsvTest, WhitespaceDelimiterWithoutHeader) {
  CsvSchema schema;
  schema.delimiter = "whitespace";
  schema.has_header = false;
  const Dataset d = ParseCsv("800\t0  0.3048 71.3\t0.00266337 126.201\n1000 0 0.3048 71.3 0.00266337 125.201\n", schema);
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.dims(), 5);
  EXPECT_DOUBLE_EQ(d.targets(1), 125.201);
}

TEST(ParseCsvTest, QuotesIndexAndDroppedColumns) {
  CsvSchema schema;
  schema.target_index = 0;
  schema.drop_columns = {"skip"};
  const Dataset d = ParseCsv("\"t\",\"skip\",\"x\"\n\"1.5\",9,2\n", schema);
  EXPECT_EQ(d.dims(), 1);
  EXPECT_DOUBLE_EQ(d.targets(0), 1.5);
  EXPECT_DOUBLE_EQ(d.features(0, 0), 2.0);
}

TEST(ParseCsvTest, ErrorsNameLineAndColumn) {
  CsvSchema schema;
  try {
    ParseCsv("a,b\n1,2\n3,oops\n", schema, "file.csv");
    FAIL();
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("file.csv"), std::string::npos);
    EXPECT_NE(what.find("line 3"), std::string::npos);
    EXPECT_NE(what.find("b"), std::string::npos);
  }
  EXPECT_THROW(ParseCsv("a,b\n1,2,3\n", schema), DataError);
  EXPECT_THROW(ParseCsv("a,b\n", schema), DataError);
  schema.target_column = "zz";
  EXPECT_THROW(ParseCsv("a,b\n1,2\n", schema), DataError);
}

TEST(SplitTest, DisjointCoverWithFloorSizes) {
  const Dataset d = SynthRegression(103, 2, 0.1, 1, SynthKind::kLinear).data;
  const Splits s = Split(d, SplitSpec{0.6, 0.2, 0.2, 5});
  EXPECT_EQ(s.train.size(), 61);
  EXPECT_EQ(s.val.size(), 20);
  EXPECT_EQ(s.test.size(), 22);
  std::set<std::size_t> all;
  for (const auto* rows : {&s.train_rows, &s.val_rows, &s.test_rows}) all.insert(rows->begin(), rows->end());
  EXPECT_EQ(all.size(), 103u);
  EXPECT_EQ(s.train.features.row(0), d.features.row(static_cast<Eigen::Index>(s.train_rows[0])));
  const Splits again = Split(d, SplitSpec{0.6, 0.2, 0.2, 5});
  EXPECT_EQ(again.test_rows, s.test_rows);
  const Splits other = Split(d, SplitSpec{0.6, 0.2, 0.2, 6});
  EXPECT_NE(other.test_rows, s.test_rows);
  EXPECT_THROW(Split(d, SplitSpec{0.5, 0.2, 0.2, 0}), ConfigError);
  EXPECT_THROW(Split(d.Subset({0, 1, 2}), SplitSpec{}), DataError);
}

TEST(StandardizationTest, UsesTrainStatisticsOnly) {
  Dataset train;
  train.features.resize(4, 2);
  train.features << 1, 5, 2, 5, 3, 5, 4, 5;
  train.targets.resize(4);
  train.targets << 10, 20, 30, 40;
  const StandardizationStats st = ComputeStats(train);
  EXPECT_DOUBLE_EQ(st.feature_mean(0), 2.5);
  EXPECT_NEAR(st.feature_std(0), std::sqrt(1.25), 1e-15);
  EXPECT_DOUBLE_EQ(st.feature_std(1), 1.0);  // constant column
  EXPECT_DOUBLE_EQ(st.target_mean, 25.0);
  EXPECT_NEAR(st.target_std, std::sqrt(125.0), 1e-12);
  const Dataset z = ApplyStandardization(train, st);
  EXPECT_NEAR(z.targets.mean(), 0.0, 1e-15);
  EXPECT_THROW(ApplyStandardization(z, st), DataError);
  const Dataset back = Destandardize(z);
  EXPECT_TRUE(back.features.isApprox(train.features, 1e-15));
  EXPECT_TRUE(back.targets.isApprox(train.targets, 1e-15));
  EXPECT_DOUBLE_EQ(DestandardizeTarget(z.targets(3), st), 40.0);
}

TEST(StandardizationTest, SplitsShareTrainStats) {
  const Dataset d = SynthRegression(50, 3, 0.2, 2, SynthKind::kLinear).data;
  const Splits s = StandardizeSplits(Split(d, SplitSpec{0.6, 0.2, 0.2, 1}));
  ASSERT_TRUE(s.train.stats && s.test.stats);
  EXPECT_EQ(s.train.stats->target_mean, s.test.stats->target_mean);
  EXPECT_NEAR(s.train.features.col(0).mean(), 0.0, 1e-12);
}

TEST(SynthRegressionTest, DeterministicAndFollowsModel) {
  const SyntheticData a = SynthRegression(400, 3, 0.0, 9, SynthKind::kLinear);
  const SyntheticData b = SynthRegression(400, 3, 0.0, 9, SynthKind::kLinear);
  EXPECT_EQ(a.data.Hash(), b.data.Hash());
  EXPECT_TRUE((a.data.features * a.coefficients).isApprox(a.data.targets, 1e-12));
  const SyntheticData pw = SynthRegression(200, 2, 0.0, 9, SynthKind::kPiecewise);
  for (Eigen::Index i = 0; i < 200; ++i) {
    double y = 0.0;
    for (Eigen::Index j = 0; j < 2; ++j) {
      const double x = pw.data.features(i, j);
      y += pw.coefficients(j) * (x > 0 ? x : -0.5 * x);
    }
    EXPECT_NEAR(pw.noiseless(i), y, 1e-12);
  }
  const SyntheticData noisy = SynthRegression(20000, 1, 0.5, 3, SynthKind::kLinear);
  const Eigen::VectorXd resid = noisy.data.targets - noisy.noiseless;
  EXPECT_NEAR(std::sqrt(resid.squaredNorm() / 20000.0), 0.5, 0.02);
  EXPECT_THROW(ParseSynthKind("cubic"), ConfigError);
}

TEST(Sha256Test, KnownDigest) {
  const fs::path dir = TempDir();
  Write(dir / "abc.txt", "abc");
  EXPECT_EQ(Sha256File(dir / "abc.txt"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(ManifestTest, LoadsVerifiesAndRejects) {
  const fs::path dir = TempDir();
  Write(dir / "d.csv", "x,y\n1,2\n3,4\n5,6\n");
  const std::string sha = Sha256File(dir / "d.csv");
  Write(dir / "m.json", R"({"datasets": [{"name": "D", "path": "d.csv", "target_column": "y",
      "sha256": ")" + sha + R"(", "rows": 3, "features": 1}]})");
  const auto entries = LoadManifest(dir / "m.json");
  const Dataset d = LoadFromManifest(FindEntry(entries, "D"));
  EXPECT_EQ(d.size(), 3);
  EXPECT_THROW(FindEntry(entries, "E"), ConfigError);

  Write(dir / "bad_sha.json", R"({"datasets": [{"name": "D", "path": "d.csv", "sha256": "00"}]})");
  try {
    LoadFromManifest(LoadManifest(dir / "bad_sha.json").front());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("d.csv"), std::string::npos);
  }
  Write(dir / "bad_rows.json", R"({"datasets": [{"name": "D", "path": "d.csv", "rows": 4}]})");
  EXPECT_THROW(LoadFromManifest(LoadManifest(dir / "bad_rows.json").front()), DataError);
  Write(dir / "unknown.json", R"({"datasets": [{"name": "D", "path": "d.csv", "colour": 1}]})");
  EXPECT_THROW(LoadManifest(dir / "unknown.json"), ConfigError);
  Write(dir / "missing.json", R"({"datasets": [{"name": "D", "path": "nope.csv"}]})");
  EXPECT_THROW(LoadFromManifest(LoadManifest(dir / "missing.json").front()), DataError);
}

TEST(DatasetTest, SubsetAndHash) {
  const Dataset d = SynthRegression(10, 2, 0.1, 1, SynthKind::kLinear).data;
  const Dataset s = d.Subset({3, 1});
  EXPECT_EQ(s.features.row(0), d.features.row(3));
  EXPECT_EQ(s.targets(1), d.targets(1));
  EXPECT_NE(s.Hash(), d.Hash());
  EXPECT_THROW(d.Subset({10}), StructuralError);
}

}  // namespace
}  // namespace deferral

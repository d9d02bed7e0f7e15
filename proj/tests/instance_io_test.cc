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


#include "deferral/instance_io.h"

#include <gtest/gtest.h>

#include "deferral/errors.h"

namespace deferral {
namespace {

const char* kMinimal = R"({
  "loss": {"kind": "squared"},
  "labels": [0.0, 2.0],
  "points": [{"weight": 1.0, "conditional": [0.5, 0.5], "costs": [[0.01, 0.01]]}]
})";

TEST(InstanceIoTest, DefaultsForBoundsAndCostBounds) {
  const InstanceFile f = ParseInstanceFile(kMinimal);
  EXPECT_EQ(f.instance.loss.kind(), LossKind::kSquared);
  EXPECT_DOUBLE_EQ(f.instance.loss_bound(), 4.0);
  ASSERT_EQ(f.instance.cost_bounds.size(), 1u);
  EXPECT_DOUBLE_EQ(f.instance.cost_bounds[0], 0.01);
  EXPECT_TRUE(f.candidates.empty());
  EXPECT_FALSE(f.hypotheses.has_value());
}

TEST(InstanceIoTest, RoundTripPreservesEverything) {
  InstanceFile f;
  f.instance = GenerateInstance(5);
  f.candidates.push_back(RandomCandidate(f.instance, 1));
  f.candidates.push_back(OptimalCandidate(f.instance));
  f.hypotheses = HypothesisClass{{f.candidates[0].predictor}, {f.candidates[0].scores}};
  const std::string text = SerializeInstanceFile(f);
  const InstanceFile g = ParseInstanceFile(text);
  EXPECT_EQ(g.instance.weights, f.instance.weights);
  EXPECT_EQ(g.instance.labels, f.instance.labels);
  EXPECT_EQ(g.instance.conditionals, f.instance.conditionals);
  EXPECT_EQ(g.instance.costs, f.instance.costs);
  EXPECT_EQ(g.instance.cost_bounds, f.instance.cost_bounds);
  EXPECT_EQ(g.instance.loss_bound(), f.instance.loss_bound());
  ASSERT_EQ(g.candidates.size(), 2u);
  EXPECT_EQ(g.candidates[1].predictor, f.candidates[1].predictor);
  EXPECT_EQ(g.candidates[1].scores, f.candidates[1].scores);
  ASSERT_TRUE(g.hypotheses.has_value());
  EXPECT_EQ(g.hypotheses->scorers, f.hypotheses->scorers);
  EXPECT_EQ(SerializeInstanceFile(g), text);
}

TEST(InstanceIoTest, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(ParseInstanceFile("{"), ConfigError);
  EXPECT_THROW(ParseInstanceFile(R"({"loss": {"kind": "squared"}, "labels": [0, 1],
      "points": [{"weight": 1, "conditional": [1, 0], "costs": [[0, 0]]}], "extra": 1})"),
               ConfigError);
  EXPECT_THROW(ParseInstanceFile(R"({"loss": {"kind": "cubic"}, "labels": [0, 1],
      "points": [{"weight": 1, "conditional": [1, 0], "costs": [[0, 0]]}]})"),
               ConfigError);
  EXPECT_THROW(ParseInstanceFile(R"({"loss": {"kind": "squared"}, "labels": [0, 1],
      "points": [{"weight": 1, "conditional": [0.7, 0.7], "costs": [[0, 0]]}]})"),
               ConfigError);
  EXPECT_THROW(ParseInstanceFile(R"({"loss": {"kind": "squared", "p": 3}, "labels": [0, 1],
      "points": [{"weight": 1, "conditional": [1, 0], "costs": [[0, 0]]}]})"),
               ConfigError);
  EXPECT_THROW(ParseInstanceFile(R"({"loss": {"kind": "squared"}, "labels": [0, 1],
      "points": [{"weight": 1, "conditional": [1, 0]}]})"),
               ConfigError);
}

TEST(InstanceIoTest, MissingFileIsConfigError) {
  EXPECT_THROW(LoadInstanceFile("/nonexistent/instance.json"), ConfigError);
}

}  // namespace
}  // namespace deferral

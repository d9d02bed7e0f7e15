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


// JSON files describing finite instances for the bound verifier.
//
// {
//   "loss": {"kind": "squared", "p": 2, "bound": 16},   // bound optional
//   "labels": [-1, 1],
//   "points": [{"weight": 1, "conditional": [0.5, 0.5],
//               "costs": [[0.1, 0.1]]}],                 // expert x label
//   "cost_bounds": [0.1],                                 // optional
//   "candidates": [{"predictor": [0], "scores": [[0, 1]]}],  // optional
//   "hypotheses": {"predictors": [[0]], "scorers": [[[0, 1]]]}  // optional
// }
//
// Unknown keys are rejected. A missing loss bound is (y_max - y_min)^p and
// missing cost bounds are the largest cost of each expert.

#ifndef DEFERRAL_INSTANCE_IO_H_
#define DEFERRAL_INSTANCE_IO_H_

#include <optional>
#include <string>
#include <vector>

#include "deferral/theory.h"

namespace deferral {

struct InstanceFile {
  FiniteInstance instance;
  std::vector<Candidate> candidates;
  std::optional<HypothesisClass> hypotheses;
};

// Throws ConfigError on malformed or invalid content.
InstanceFile ParseInstanceFile(const std::string& text);
std::string SerializeInstanceFile(const InstanceFile& file);
InstanceFile LoadInstanceFile(const std::string& path);

}  // namespace deferral

#endif  // DEFERRAL_INSTANCE_IO_H_

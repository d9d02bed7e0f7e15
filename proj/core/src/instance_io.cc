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

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "deferral/errors.h"
#include "json.hpp"

namespace deferral {
namespace {

using nlohmann::json;

void RejectUnknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

const json& Required(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + " is missing '" + key + "'");
  return j.at(key);
}

double Number(const json& j, const std::string& where) {
  if (!j.is_number()) throw ConfigError(where + " must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ConfigError(where + " must be finite");
  return v;
}

std::vector<double> Vector(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be an array");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(Number(j[i], where + "[" + std::to_string(i) + "]"));
  }
  return out;
}

std::vector<std::vector<double>> Matrix(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be an array");
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(Vector(j[i], where + "[" + std::to_string(i) + "]"));
  }
  return out;
}

RegressionLoss ParseLoss(const json& j, double y_min, double y_max) {
  RejectUnknown(j, {"kind", "p", "bound"}, "loss");
  const json& kind_json = Required(j, "kind", "loss");
  if (!kind_json.is_string()) throw ConfigError("loss.kind must be a string");
  const LossKind kind = ParseLossKind(kind_json.get<std::string>());
  double p = kind == LossKind::kSquared ? 2.0 : 1.0;
  if (j.contains("p")) {
    p = Number(j["p"], "loss.p");
    if (kind != LossKind::kPower && p != (kind == LossKind::kSquared ? 2.0 : 1.0)) {
      throw ConfigError("loss.p contradicts loss.kind");
    }
  }
  if (kind == LossKind::kPower && !(p >= 1.0)) throw ConfigError("loss.p must be >= 1");
  double bound = 0.0;
  if (j.contains("bound")) {
    bound = Number(j["bound"], "loss.bound");
  } else {
    bound = y_max > y_min ? std::pow(y_max - y_min, p) : 1.0;
  }
  switch (kind) {
    case LossKind::kSquared:
      return RegressionLoss::Squared(bound);
    case LossKind::kAbsolute:
      return RegressionLoss::Absolute(bound);
    case LossKind::kPower:
      break;
  }
  return RegressionLoss::Power(p, bound);
}

json LossJson(const RegressionLoss& loss) {
  return json{{"kind", std::string(LossKindName(loss.kind()))},
              {"p", loss.exponent()},
              {"bound", loss.bound()}};
}

}  // namespace

InstanceFile ParseInstanceFile(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("instance file is not valid JSON: ") + e.what());
  }
  RejectUnknown(root, {"loss", "labels", "points", "cost_bounds", "candidates", "hypotheses"},
                "instance file");
  InstanceFile out;
  FiniteInstance& inst = out.instance;
  inst.labels = Vector(Required(root, "labels", "instance file"), "labels");
  if (inst.labels.empty()) throw ConfigError("labels must not be empty");

  const json& points = Required(root, "points", "instance file");
  if (!points.is_array() || points.empty()) throw ConfigError("points must be a non-empty array");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::string where = "points[" + std::to_string(i) + "]";
    RejectUnknown(points[i], {"weight", "conditional", "costs"}, where);
    inst.weights.push_back(Number(Required(points[i], "weight", where), where + ".weight"));
    inst.conditionals.push_back(
        Vector(Required(points[i], "conditional", where), where + ".conditional"));
    inst.costs.push_back(Matrix(Required(points[i], "costs", where), where + ".costs"));
  }

  inst.loss = ParseLoss(Required(root, "loss", "instance file"), inst.label_min(),
                        inst.label_max());
  if (root.contains("cost_bounds")) {
    inst.cost_bounds = Vector(root["cost_bounds"], "cost_bounds");
  } else {
    inst.cost_bounds = TightCostBounds(inst);
  }
  inst.Validate();

  if (root.contains("candidates")) {
    const json& cands = root["candidates"];
    if (!cands.is_array()) throw ConfigError("candidates must be an array");
    for (std::size_t c = 0; c < cands.size(); ++c) {
      const std::string where = "candidates[" + std::to_string(c) + "]";
      RejectUnknown(cands[c], {"predictor", "scores"}, where);
      Candidate cand;
      cand.predictor = Vector(Required(cands[c], "predictor", where), where + ".predictor");
      cand.scores = Matrix(Required(cands[c], "scores", where), where + ".scores");
      out.candidates.push_back(std::move(cand));
    }
  }
  if (root.contains("hypotheses")) {
    const json& hyp = root["hypotheses"];
    RejectUnknown(hyp, {"predictors", "scorers"}, "hypotheses");
    HypothesisClass cls;
    cls.predictors = Matrix(Required(hyp, "predictors", "hypotheses"), "hypotheses.predictors");
    const json& scorers = Required(hyp, "scorers", "hypotheses");
    if (!scorers.is_array()) throw ConfigError("hypotheses.scorers must be an array");
    for (std::size_t s = 0; s < scorers.size(); ++s) {
      cls.scorers.push_back(
          Matrix(scorers[s], "hypotheses.scorers[" + std::to_string(s) + "]"));
    }
    out.hypotheses = std::move(cls);
  }
  return out;
}

std::string SerializeInstanceFile(const InstanceFile& file) {
  const FiniteInstance& inst = file.instance;
  nlohmann::ordered_json root;
  root["loss"] = LossJson(inst.loss);
  root["labels"] = inst.labels;
  root["points"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < inst.num_points(); ++i) {
    nlohmann::ordered_json p;
    p["weight"] = inst.weights[i];
    p["conditional"] = inst.conditionals[i];
    p["costs"] = inst.costs[i];
    root["points"].push_back(p);
  }
  root["cost_bounds"] = inst.cost_bounds;
  if (!file.candidates.empty()) {
    root["candidates"] = nlohmann::ordered_json::array();
    for (const auto& c : file.candidates) {
      root["candidates"].push_back({{"predictor", c.predictor}, {"scores", c.scores}});
    }
  }
  if (file.hypotheses) {
    root["hypotheses"] = {{"predictors", file.hypotheses->predictors},
                          {"scorers", file.hypotheses->scorers}};
  }
  return root.dump(2) + "\n";
}

InstanceFile LoadInstanceFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open instance file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return ParseInstanceFile(os.str());
}

}  // namespace deferral

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


#include "deferral_cli/cli.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "deferral/checkpoint.h"
#include "deferral/errors.h"
#include "deferral/instance_io.h"
#include "deferral/rng.h"
#include "json.hpp"

namespace deferral::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

constexpr const char* kCompSum = "comp_sum_logistic";

void RejectUnknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void Read(const json& j, const std::string& key, T& target, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

fs::path ResolvePath(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

Method ParseMethod(const std::string& s) {
  if (s == "single") return Method::kSingleStage;
  if (s == "two") return Method::kTwoStage;
  throw ConfigError("method must be 'single' or 'two', got '" + s + "'");
}

ConstantMode ParseConstants(const std::string& s) {
  if (s == "printed") return ConstantMode::kPrinted;
  if (s == "derived") return ConstantMode::kDerived;
  throw ConfigError("constants must be 'printed' or 'derived', got '" + s + "'");
}

void ParseTrainSection(const json& j, TrainConfig& t, const std::string& where) {
  RejectUnknown(j, {"batch_size", "epochs", "lr_grid", "log_every", "loss", "loss_exponent",
                    "adam", "chunk_rows"},
                where);
  Read(j, "batch_size", t.batch_size, where);
  Read(j, "epochs", t.epochs, where);
  Read(j, "lr_grid", t.lr_grid, where);
  Read(j, "log_every", t.log_every, where);
  std::string loss(LossKindName(t.loss_kind));
  Read(j, "loss", loss, where);
  t.loss_kind = ParseLossKind(loss);
  Read(j, "loss_exponent", t.loss_exponent, where);
  if (t.loss_kind == LossKind::kSquared) t.loss_exponent = 2.0;
  if (t.loss_kind == LossKind::kAbsolute) t.loss_exponent = 1.0;
  Read(j, "chunk_rows", t.grad.chunk_rows, where);
  if (j.contains("adam")) {
    const json& a = j["adam"];
    RejectUnknown(a, {"beta1", "beta2", "epsilon"}, where + ".adam");
    Read(a, "beta1", t.adam.beta1, where + ".adam");
    Read(a, "beta2", t.adam.beta2, where + ".adam");
    Read(a, "epsilon", t.adam.epsilon, where + ".adam");
  }
}

ordered_json TrainJson(const TrainConfig& t) {
  ordered_json j;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["lr_grid"] = t.lr_grid;
  j["log_every"] = t.log_every;
  j["loss"] = std::string(LossKindName(t.loss_kind));
  j["loss_exponent"] = t.loss_exponent;
  j["adam"] = {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}};
  j["chunk_rows"] = t.grad.chunk_rows;
  return j;
}

void WriteText(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw ConfigError("failed writing '" + path.string() + "'");
}

std::string Hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

fs::path ExpertDir(const RunConfig& c, const CommandOptions& o) {
  return c.expert_dir.empty() ? o.output / "experts" : c.expert_dir;
}

fs::path ModelDir(const RunConfig& c, const CommandOptions& o) {
  return c.model_dir.empty() ? o.output / "models" : c.model_dir;
}

fs::path ExpertPath(const fs::path& dir, std::size_t depth) {
  return dir / ("expert_depth" + std::to_string(depth) + ".ckpt");
}

// Config copies with every derived seed and the worker count filled in.
TrainConfig DeferralTrainConfig(const RunConfig& c, std::uint64_t seed, std::size_t workers,
                                std::size_t num_experts, bool base_cost) {
  TrainConfig t = c.train;
  t.seed = DeriveSeed(seed, "deferral");
  t.workers = workers;
  t.surrogate = MakeSurrogate(c);
  if (c.base_costs.size() < num_experts) {
    throw ConfigError("base_costs needs at least " + std::to_string(num_experts) + " entries");
  }
  t.base_costs.assign(c.base_costs.begin(),
                      c.base_costs.begin() + static_cast<std::ptrdiff_t>(num_experts));
  if (!base_cost) std::fill(t.base_costs.begin(), t.base_costs.end(), 0.0);
  t.Validate();
  return t;
}

ExpertConfig ExpertTrainConfig(const RunConfig& c, std::uint64_t seed, std::size_t workers) {
  ExpertConfig e = c.experts;
  e.train.seed = DeriveSeed(seed, "experts");
  e.train.workers = workers;
  e.train.Validate();
  return e;
}

std::vector<MlpModel> LoadExperts(const RunConfig& c, const CommandOptions& o,
                                  std::size_t count, Eigen::Index dims) {
  if (c.experts.depths.size() < count) {
    throw ConfigError("num_experts exceeds the configured expert depths");
  }
  std::vector<MlpModel> experts;
  for (std::size_t k = 0; k < count; ++k) {
    const fs::path p = ExpertPath(ExpertDir(c, o), c.experts.depths[k]);
    if (!fs::exists(p)) throw DataError("missing expert checkpoint '" + p.string() + "'");
    MlpModel m = LoadMlpCheckpoint(p);
    if (m.in_dim() != dims) {
      throw DataError("expert checkpoint '" + p.string() + "' expects " +
                      std::to_string(m.in_dim()) + " features");
    }
    experts.push_back(std::move(m));
  }
  return experts;
}

Eigen::MatrixXd PredictAll(const std::vector<MlpModel>& experts, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(experts.size()));
  for (std::size_t k = 0; k < experts.size(); ++k) {
    out.col(static_cast<Eigen::Index>(k)) = experts[k].ForwardBatch(x).col(0);
  }
  return out;
}

std::size_t ExpertCountFor(const RunConfig& c) {
  const bool margin = MakeSurrogate(c).is_comp_sum() == false;
  if (margin && c.num_experts != 1) {
    throw ConfigError("margin surrogates support exactly one expert");
  }
  if (c.num_experts == 0) throw ConfigError("num_experts must be >= 1");
  return c.num_experts;
}

void RecordRun(const RunConfig& c, const CommandOptions& o) {
  WriteText(o.output / "resolved_config.json", ResolvedConfigJson(c));
}

}  // namespace

int ExitCodeFor(const std::exception& e) {
  if (dynamic_cast<const DivergenceError*>(&e)) return kExitDivergence;
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  if (dynamic_cast<const CLI::Error*>(&e)) return kExitConfig;
  return kExitOther;
}

RunConfig ParseRunConfig(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RejectUnknown(root, {"seed", "dataset", "split", "train", "surrogate", "surrogate_parameter",
                       "experts", "num_experts", "base_costs", "method", "expert_dir",
                       "model_dir", "verify", "table"},
                "config");
  RunConfig c;
  Read(root, "seed", c.seed, "config");
  if (root.contains("dataset")) {
    const json& d = root["dataset"];
    RejectUnknown(d, {"manifest", "name", "synthetic"}, "dataset");
    std::string manifest;
    Read(d, "manifest", manifest, "dataset");
    c.dataset.manifest = ResolvePath(manifest, base_dir);
    Read(d, "name", c.dataset.name, "dataset");
    if (d.contains("synthetic")) {
      if (!manifest.empty()) throw ConfigError("dataset takes a manifest or synthetic, not both");
      const json& s = d["synthetic"];
      RejectUnknown(s, {"kind", "rows", "features", "noise", "seed"}, "dataset.synthetic");
      Read(s, "kind", c.dataset.synth_kind, "dataset.synthetic");
      Read(s, "rows", c.dataset.synth_rows, "dataset.synthetic");
      Read(s, "features", c.dataset.synth_features, "dataset.synthetic");
      Read(s, "noise", c.dataset.synth_noise, "dataset.synthetic");
      Read(s, "seed", c.dataset.synth_seed, "dataset.synthetic");
    }
    if (!manifest.empty() && c.dataset.name.empty()) {
      throw ConfigError("dataset.name is required with a manifest");
    }
  }
  ParseSynthKind(c.dataset.synth_kind);
  if (root.contains("split")) {
    const json& s = root["split"];
    RejectUnknown(s, {"train", "val", "test"}, "split");
    Read(s, "train", c.split.train, "split");
    Read(s, "val", c.split.val, "split");
    Read(s, "test", c.split.test, "split");
  }
  if (root.contains("train")) ParseTrainSection(root["train"], c.train, "train");
  c.train.Validate();
  Read(root, "surrogate", c.surrogate, "config");
  Read(root, "surrogate_parameter", c.surrogate_parameter, "config");
  MakeSurrogate(c);

  c.experts.train = c.train;
  if (root.contains("experts")) {
    const json& e = root["experts"];
    RejectUnknown(e, {"depths", "hidden_width", "epochs", "lr_grid", "batch_size"}, "experts");
    Read(e, "depths", c.experts.depths, "experts");
    Read(e, "hidden_width", c.experts.hidden_width, "experts");
    Read(e, "epochs", c.experts.train.epochs, "experts");
    Read(e, "lr_grid", c.experts.train.lr_grid, "experts");
    Read(e, "batch_size", c.experts.train.batch_size, "experts");
  }
  if (c.experts.depths.empty()) throw ConfigError("experts.depths must not be empty");
  for (std::size_t d : c.experts.depths) {
    if (d < 1 || d > MlpModel::kMaxHiddenLayers) {
      throw ConfigError("expert depths must lie in 1..3");
    }
  }
  if (c.experts.hidden_width < 1) throw ConfigError("experts.hidden_width must be >= 1");
  c.experts.train.Validate();

  Read(root, "num_experts", c.num_experts, "config");
  Read(root, "base_costs", c.base_costs, "config");
  for (double a : c.base_costs) {
    if (!(a >= 0.0)) throw ConfigError("base_costs must be non-negative");
  }
  std::string method = MethodName(c.method);
  Read(root, "method", method, "config");
  c.method = ParseMethod(method);
  std::string dir;
  Read(root, "expert_dir", dir, "config");
  c.expert_dir = ResolvePath(dir, base_dir);
  dir.clear();
  Read(root, "model_dir", dir, "config");
  c.model_dir = ResolvePath(dir, base_dir);

  if (root.contains("verify")) {
    const json& v = root["verify"];
    RejectUnknown(v, {"n_instances", "candidates_per_instance", "checks", "constants",
                      "include_optimal", "tolerance", "generator", "instance_files"},
                  "verify");
    VerifyConfig& vc = c.verify;
    Read(v, "n_instances", vc.num_instances, "verify");
    Read(v, "candidates_per_instance", vc.candidates_per_instance, "verify");
    Read(v, "checks", vc.checks, "verify");
    for (const auto& check : vc.checks) {
      if (check != "single_stage" && check != "two_stage" && check != "single_expert") {
        throw ConfigError("unknown check '" + check + "'");
      }
    }
    std::string constants = "printed";
    Read(v, "constants", constants, "verify");
    vc.constants = ParseConstants(constants);
    Read(v, "include_optimal", vc.include_optimal, "verify");
    Read(v, "tolerance", vc.tolerance, "verify");
    if (!(vc.tolerance >= 0.0)) throw ConfigError("verify.tolerance must be >= 0");
    if (v.contains("generator")) {
      const json& g = v["generator"];
      RejectUnknown(g, {"point_counts", "label_counts", "expert_counts", "max_cost", "loss",
                        "loss_exponent", "label_independent_costs", "cost_bound_scale"},
                    "verify.generator");
      GeneratorOptions& go = vc.generator;
      Read(g, "point_counts", go.point_counts, "verify.generator");
      Read(g, "label_counts", go.label_counts, "verify.generator");
      Read(g, "expert_counts", go.expert_counts, "verify.generator");
      Read(g, "max_cost", go.max_cost, "verify.generator");
      std::string loss(LossKindName(go.loss_kind));
      Read(g, "loss", loss, "verify.generator");
      go.loss_kind = ParseLossKind(loss);
      Read(g, "loss_exponent", go.loss_exponent, "verify.generator");
      Read(g, "label_independent_costs", go.label_independent_costs, "verify.generator");
      Read(g, "cost_bound_scale", go.cost_bound_scale, "verify.generator");
    }
    std::vector<std::string> files;
    Read(v, "instance_files", files, "verify");
    for (const auto& f : files) vc.instance_files.push_back(ResolvePath(f, base_dir));
  }
  if (root.contains("table")) {
    const json& t = root["table"];
    RejectUnknown(t, {"datasets", "seeds", "methods", "base_cost_settings", "max_experts"},
                  "table");
    TableConfig& tc = c.table;
    Read(t, "datasets", tc.datasets, "table");
    Read(t, "seeds", tc.seeds, "table");
    if (t.contains("methods")) {
      std::vector<std::string> methods;
      Read(t, "methods", methods, "table");
      tc.methods.clear();
      for (const auto& m : methods) tc.methods.push_back(ParseMethod(m));
    }
    Read(t, "base_cost_settings", tc.base_cost_settings, "table");
    Read(t, "max_experts", tc.max_experts, "table");
    if (tc.max_experts < 1 || tc.max_experts > 3) {
      throw ConfigError("table.max_experts must lie in 1..3");
    }
    if (tc.seeds.empty() || tc.methods.empty() || tc.base_cost_settings.empty()) {
      throw ConfigError("table seeds, methods and base_cost_settings must not be empty");
    }
  }
  return c;
}

RunConfig LoadRunConfig(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return ParseRunConfig(os.str(), path.parent_path());
}

std::string ResolvedConfigJson(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  ordered_json d;
  if (c.dataset.synthetic()) {
    d["synthetic"] = {{"kind", c.dataset.synth_kind},
                      {"rows", c.dataset.synth_rows},
                      {"features", c.dataset.synth_features},
                      {"noise", c.dataset.synth_noise},
                      {"seed", c.dataset.synth_seed}};
  } else {
    d["manifest"] = c.dataset.manifest.string();
    d["name"] = c.dataset.name;
  }
  j["dataset"] = d;
  j["split"] = {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}};
  j["train"] = TrainJson(c.train);
  j["surrogate"] = c.surrogate;
  j["surrogate_parameter"] = c.surrogate_parameter;
  j["experts"] = {{"depths", c.experts.depths},
                  {"hidden_width", c.experts.hidden_width},
                  {"epochs", c.experts.train.epochs},
                  {"lr_grid", c.experts.train.lr_grid},
                  {"batch_size", c.experts.train.batch_size}};
  j["num_experts"] = c.num_experts;
  j["base_costs"] = c.base_costs;
  j["method"] = MethodName(c.method);
  j["expert_dir"] = c.expert_dir.string();
  j["model_dir"] = c.model_dir.string();
  const VerifyConfig& v = c.verify;
  std::vector<std::string> files;
  for (const auto& f : v.instance_files) files.push_back(f.string());
  j["verify"] = {
      {"n_instances", v.num_instances},
      {"candidates_per_instance", v.candidates_per_instance},
      {"checks", v.checks},
      {"constants", v.constants == ConstantMode::kPrinted ? "printed" : "derived"},
      {"include_optimal", v.include_optimal},
      {"tolerance", v.tolerance},
      {"generator",
       {{"point_counts", v.generator.point_counts},
        {"label_counts", v.generator.label_counts},
        {"expert_counts", v.generator.expert_counts},
        {"max_cost", v.generator.max_cost},
        {"loss", std::string(LossKindName(v.generator.loss_kind))},
        {"loss_exponent", v.generator.loss_exponent},
        {"label_independent_costs", v.generator.label_independent_costs},
        {"cost_bound_scale", v.generator.cost_bound_scale}}},
      {"instance_files", files}};
  std::vector<std::string> methods;
  for (Method m : c.table.methods) methods.push_back(MethodName(m));
  j["table"] = {{"datasets", c.table.datasets},
                {"seeds", c.table.seeds},
                {"methods", methods},
                {"base_cost_settings", c.table.base_cost_settings},
                {"max_experts", c.table.max_experts}};
  return j.dump(2) + "\n";
}

std::string ConfigDigest(const RunConfig& config) {
  const std::string s = ResolvedConfigJson(config);
  return Hex(Fnv1a64(s.data(), s.size()));
}

Surrogate MakeSurrogate(const RunConfig& c) {
  if (c.surrogate == kCompSum) return Surrogate::CompSumLogistic();
  const MarginKind kind = ParseMarginKind(c.surrogate);
  if (kind == MarginKind::kSigmoid) return Surrogate::Margin(MarginLoss::Sigmoid(c.surrogate_parameter));
  if (kind == MarginKind::kRhoMargin) {
    return Surrogate::Margin(MarginLoss::RhoMargin(c.surrogate_parameter));
  }
  return Surrogate::Margin(MarginLoss::OfKind(kind));
}

Splits LoadSplits(const RunConfig& c, std::uint64_t seed) {
  Dataset data;
  if (c.dataset.synthetic()) {
    data = SynthRegression(c.dataset.synth_rows, c.dataset.synth_features, c.dataset.synth_noise,
                           c.dataset.synth_seed, ParseSynthKind(c.dataset.synth_kind))
               .data;
  } else {
    const auto entries = LoadManifest(c.dataset.manifest);
    data = LoadFromManifest(FindEntry(entries, c.dataset.name));
  }
  SplitSpec spec = c.split;
  spec.seed = DeriveSeed(seed, "split");
  return StandardizeSplits(Split(data, spec));
}

int CmdTrainExperts(const RunConfig& c, const CommandOptions& o, std::ostream& out) {
  RecordRun(c, o);
  const Splits s = LoadSplits(c, c.seed);
  const ExpertPool pool = TrainExperts(s.train, s.val, ExpertTrainConfig(c, c.seed, o.parallel));
  const fs::path dir = ExpertDir(c, o);
  fs::create_directories(dir);
  ordered_json summary = ordered_json::array();
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const fs::path p = ExpertPath(dir, c.experts.depths[k]);
    SaveCheckpoint(p, pool.experts[k]);
    summary.push_back({{"depth", c.experts.depths[k]},
                       {"checkpoint", p.filename().string()},
                       {"lr", pool.chosen_lr[k]},
                       {"val_mse", pool.val_mse[k]},
                       {"param_hash", Hex(pool.hashes[k])}});
    out << "expert depth " << c.experts.depths[k] << ": val_mse " << pool.val_mse[k] << " (lr "
        << pool.chosen_lr[k] << ") -> " << p.string() << "\n";
  }
  ordered_json record;
  record["config_digest"] = ConfigDigest(c);
  record["seed"] = c.seed;
  record["experts"] = summary;
  WriteText(dir / "experts.json", record.dump(2) + "\n");
  WriteText(o.output / "experts_log.jsonl", LogToJsonLines(pool.log));
  return kExitOk;
}

int CmdTrain(const RunConfig& c, const CommandOptions& o, std::ostream& out) {
  RecordRun(c, o);
  const std::size_t n_e = ExpertCountFor(c);
  const Splits s = LoadSplits(c, c.seed);
  const auto experts = LoadExperts(c, o, n_e, s.train.dims());
  std::vector<std::uint64_t> before;
  for (const auto& e : experts) before.push_back(e.Hash());
  const Eigen::MatrixXd e_train = PredictAll(experts, s.train.features);
  const Eigen::MatrixXd e_val = PredictAll(experts, s.val.features);
  const Eigen::MatrixXd e_test = PredictAll(experts, s.test.features);
  const TrainConfig t = DeferralTrainConfig(c, c.seed, o.parallel, n_e, true);
  const DeferralModels m = c.method == Method::kSingleStage
                               ? TrainSingleStage(s.train, s.val, e_train, e_val, t)
                               : TrainTwoStage(s.train, s.val, e_train, e_val, t);
  for (std::size_t k = 0; k < experts.size(); ++k) {
    if (experts[k].Hash() != before[k]) throw StructuralError("expert parameters changed");
  }
  const fs::path dir = ModelDir(c, o);
  fs::create_directories(dir);
  SaveCheckpoint(dir / "predictor.ckpt", m.predictor);
  SaveCheckpoint(dir / "scorer.ckpt", m.scorer);
  WriteText(o.output / "train_log.jsonl", LogToJsonLines(m.log));
  SystemReport report =
      EvaluateSystem(m.predictor, m.scorer, e_test, s.test, c.method == Method::kTwoStage);
  report.seed = c.seed;
  report.config_digest = ConfigDigest(c);
  const std::string json_report = ReportToJson(report);
  WriteText(o.output / "report.json", json_report + "\n");
  ordered_json sel;
  sel["method"] = MethodName(c.method);
  sel["lr"] = m.lr;
  ordered_json cands = ordered_json::array();
  for (const auto& cand : m.candidates) cands.push_back({{"lr", cand.lr}, {"val_system_mse", cand.val_metric}});
  sel["candidates"] = cands;
  if (m.stage1_lr) sel["stage1_lr"] = *m.stage1_lr;
  WriteText(o.output / "selection.json", sel.dump(2) + "\n");
  out << json_report << "\n";
  return kExitOk;
}

int CmdEvaluate(const RunConfig& c, const CommandOptions& o, std::ostream& out) {
  RecordRun(c, o);
  const std::size_t n_e = ExpertCountFor(c);
  const Splits s = LoadSplits(c, c.seed);
  const auto experts = LoadExperts(c, o, n_e, s.test.dims());
  const fs::path dir = ModelDir(c, o);
  for (const char* name : {"predictor.ckpt", "scorer.ckpt"}) {
    if (!fs::exists(dir / name)) throw DataError("missing checkpoint '" + (dir / name).string() + "'");
  }
  const LinearModel predictor = LoadLinearCheckpoint(dir / "predictor.ckpt");
  const LinearModel scorer = LoadLinearCheckpoint(dir / "scorer.ckpt");
  if (predictor.in_dim() != s.test.dims() || scorer.in_dim() != s.test.dims()) {
    throw DataError("model checkpoints do not match the dataset width");
  }
  SystemReport report = EvaluateSystem(predictor, scorer, PredictAll(experts, s.test.features),
                                       s.test, true);
  report.seed = c.seed;
  report.config_digest = ConfigDigest(c);
  const std::string json_report = ReportToJson(report);
  WriteText(o.output / "evaluation.json", json_report + "\n");
  out << json_report << "\n";
  return kExitOk;
}

int CmdVerifyBounds(const RunConfig& c, const CommandOptions& o, std::ostream& out,
                    std::ostream& err) {
  RecordRun(c, o);
  const VerifyConfig& v = c.verify;
  BoundOptions bounds;
  bounds.constants = v.constants;
  bounds.gamma_scale = o.gamma_scale;
  bounds.tolerance = v.tolerance;
  if (!(o.gamma_scale > 0.0)) throw ConfigError("--gamma-scale must be positive");

  std::vector<Verdict> verdicts;
  std::string summary;
  if (v.num_instances > 0) {
    SweepConfig sweep;
    sweep.num_instances = v.num_instances;
    sweep.candidates_per_instance = v.candidates_per_instance;
    sweep.seed = c.seed;
    auto has = [&](const char* name) {
      return std::find(v.checks.begin(), v.checks.end(), name) != v.checks.end();
    };
    sweep.single_stage = has("single_stage");
    sweep.two_stage = has("two_stage");
    sweep.single_expert = has("single_expert");
    sweep.include_optimal = v.include_optimal;
    sweep.generator = v.generator;
    sweep.bounds = bounds;
    sweep.workers = o.parallel;
    if (sweep.candidates_per_instance == 0 && !sweep.include_optimal) {
      throw ConfigError("no candidates: set candidates_per_instance or include_optimal");
    }
    SweepResult result = RunSweep(sweep);
    summary = SummaryToText(result);
    verdicts = std::move(result.verdicts);
  }
  for (std::size_t f = 0; f < v.instance_files.size(); ++f) {
    const InstanceFile file = LoadInstanceFile(v.instance_files[f]);
    const FiniteInstance& inst = file.instance;
    auto add = [&](const BoundCheck& b, std::size_t cand) {
      verdicts.push_back({"file/" + b.name, f, 0, cand, b.lhs, b.t, b.rhs, b.slack, b.holds});
    };
    for (std::size_t k = 0; k < file.candidates.size(); ++k) {
      const Candidate& cand = file.candidates[k];
      const bool scalar = !cand.scores.empty() && cand.scores[0].size() == 1;
      if (scalar) {
        for (MarginKind kind : kAllMarginKinds) {
          const auto se = CheckSingleExpertBounds(inst, cand, MarginLoss::OfKind(kind), bounds);
          add(se.single_stage, k);
          add(se.two_stage, k);
        }
      } else {
        add(CheckSingleStageBound(inst, cand, bounds), k);
        const auto two = CheckTwoStageBounds(inst, cand, bounds);
        add(two.fixed_predictor, k);
        add(two.full, k);
      }
    }
    if (file.hypotheses) {
      const RestrictedReport r = CheckRestrictedClass(inst, *file.hypotheses, bounds);
      for (std::size_t k = 0; k < r.checks.size(); ++k) add(r.checks[k], k);
    }
  }
  WriteText(o.output / "verdicts.jsonl", VerdictsToJsonLines(verdicts));
  if (!v.instance_files.empty()) {
    SweepResult all;
    all.verdicts = verdicts;
    std::map<std::string, std::vector<double>> slack;
    std::map<std::string, std::size_t> bad;
    for (const auto& vd : verdicts) {
      slack[vd.check].push_back(vd.slack);
      if (!vd.holds) ++bad[vd.check];
    }
    for (auto& [name, s] : slack) {
      std::sort(s.begin(), s.end());
      all.summary.push_back({name, s.size(), bad[name], s.front(), s[s.size() / 2]});
    }
    summary = SummaryToText(all);
  }
  WriteText(o.output / "summary.txt", summary);
  out << summary;
  std::size_t violations = 0;
  for (const auto& vd : verdicts) {
    if (vd.holds) continue;
    if (violations < 20) {
      err << "violation: " << vd.check << " instance " << vd.instance << " (seed "
          << vd.instance_seed << ") candidate " << vd.candidate << " slack " << vd.slack << "\n";
    }
    ++violations;
  }
  if (violations > 0) {
    err << violations << " of " << verdicts.size() << " checks violated\n";
    return kExitViolation;
  }
  out << "all " << verdicts.size() << " checks hold\n";
  return kExitOk;
}

int CmdReproduceTable1(const RunConfig& c, const CommandOptions& o, std::ostream& out,
                       std::ostream& err) {
  RecordRun(c, o);
  if (c.surrogate != kCompSum) throw ConfigError("the table uses the comp-sum surrogate");
  const TableConfig& tc = c.table;
  std::vector<TableRun> runs;
  std::vector<std::string> missing;
  std::vector<ManifestEntry> entries;
  if (!c.dataset.synthetic()) entries = LoadManifest(c.dataset.manifest);
  std::string runs_jsonl;
  for (const std::string& name : tc.datasets) {
    RunConfig dc = c;
    if (!c.dataset.synthetic()) {
      dc.dataset.name = name;
      try {
        const ManifestEntry& entry = FindEntry(entries, name);
        LoadFromManifest(entry);
      } catch (const DataError& e) {
        err << "dataset " << name << " unavailable: " << e.what() << "\n";
        missing.push_back(name);
        continue;
      }
    }
    for (std::uint64_t seed : tc.seeds) {
      err << "[table] " << name << " seed " << seed << ": experts\n";
      const Splits s = LoadSplits(dc, seed);
      const ExpertPool pool = TrainExperts(s.train, s.val, ExpertTrainConfig(dc, seed, o.parallel));
      if (pool.size() < tc.max_experts) throw ConfigError("table.max_experts exceeds expert depths");
      const Eigen::MatrixXd all_train = pool.Predict(s.train.features, tc.max_experts);
      const Eigen::MatrixXd all_val = pool.Predict(s.val.features, tc.max_experts);
      const Eigen::MatrixXd all_test = pool.Predict(s.test.features, tc.max_experts);
      std::optional<RegressionFit> stage1;
      for (Method method : tc.methods) {
        if (method == Method::kTwoStage && !stage1) {
          stage1 = TrainLinearRegression(
              s.train, s.val, DeferralTrainConfig(dc, seed, o.parallel, 1, false));
        }
        for (bool base_cost : tc.base_cost_settings) {
          for (std::size_t n_e = 1; n_e <= tc.max_experts; ++n_e) {
            err << "[table] " << name << " seed " << seed << ": " << MethodName(method)
                << (base_cost ? " cost " : " no-cost ") << n_e << " expert(s)\n";
            const auto cols = static_cast<Eigen::Index>(n_e);
            const Eigen::MatrixXd e_train = all_train.leftCols(cols);
            const Eigen::MatrixXd e_val = all_val.leftCols(cols);
            const Eigen::MatrixXd e_test = all_test.leftCols(cols);
            const TrainConfig t = DeferralTrainConfig(dc, seed, o.parallel, n_e, base_cost);
            const DeferralModels m =
                method == Method::kSingleStage
                    ? TrainSingleStage(s.train, s.val, e_train, e_val, t)
                    : TrainScorer(stage1->model, s.train, s.val, e_train, e_val, t);
            const SystemReport rep = EvaluateSystem(m.predictor, m.scorer, e_test, s.test,
                                                    method == Method::kTwoStage);
            TableRun run{name, method, base_cost, n_e, seed, rep.system_mse, rep.base_model_mse};
            runs.push_back(run);
            ordered_json j;
            j["dataset"] = name;
            j["method"] = MethodName(method);
            j["base_cost"] = base_cost;
            j["num_experts"] = n_e;
            j["seed"] = seed;
            j["system_mse"] = rep.system_mse;
            j["base_model_mse"] = rep.base_model_mse ? ordered_json(*rep.base_model_mse) : nullptr;
            j["deferral_ratios"] = rep.deferral_ratios;
            j["lr"] = m.lr;
            runs_jsonl += j.dump() + "\n";
          }
        }
      }
      pool.VerifyFrozen();
    }
  }
  WriteText(o.output / "table_runs.jsonl", runs_jsonl);
  if (runs.empty()) {
    throw DataError("no dataset available; missing: " + std::to_string(missing.size()));
  }
  const ComparisonTable table = AssembleTable(runs);
  std::string text = table.RenderText();
  for (const auto& name : missing) text += "MISSING: " + name + " (no data; rows omitted)\n";
  WriteText(o.output / "table1.txt", text);
  ordered_json tj;
  tj["rows"] = ordered_json::parse(table.ToJson());
  tj["missing"] = missing;
  tj["config_digest"] = ConfigDigest(c);
  WriteText(o.output / "table1.json", tj.dump(2) + "\n");
  out << text;
  return kExitOk;
}

int Main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Regression with deferral to multiple experts"};
  app.require_subcommand(1);
  std::string config_path;
  std::string output = "out";
  std::optional<std::uint64_t> seed;
  std::size_t parallel = 1;
  double gamma_scale = 1.0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON run config")->required();
    sub->add_option("-o,--output", output, "output directory");
    sub->add_option("-s,--seed", seed, "override the config seed");
    sub->add_option("-p,--parallel", parallel, "worker threads")->check(CLI::PositiveNumber);
  };
  CLI::App* train_experts = app.add_subcommand("train-experts", "pretrain the expert pool");
  CLI::App* train = app.add_subcommand("train", "train predictor and deferral scorer");
  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate saved checkpoints");
  CLI::App* verify = app.add_subcommand("verify-bounds", "certify the excess-error bounds");
  CLI::App* table = app.add_subcommand("reproduce-table1", "System MSE comparison table");
  for (CLI::App* sub : {train_experts, train, evaluate, verify, table}) add_common(sub);
  verify->add_option("--gamma-scale", gamma_scale, "multiply every bound function");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }
  try {
    RunConfig config = LoadRunConfig(config_path);
    if (seed) config.seed = *seed;
    CommandOptions options;
    options.output = output;
    options.parallel = parallel;
    options.gamma_scale = gamma_scale;
    if (train_experts->parsed()) return CmdTrainExperts(config, options, out);
    if (train->parsed()) return CmdTrain(config, options, out);
    if (evaluate->parsed()) return CmdEvaluate(config, options, out);
    if (verify->parsed()) return CmdVerifyBounds(config, options, out, err);
    return CmdReproduceTable1(config, options, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return ExitCodeFor(e);
  }
}

}  // namespace deferral::cli

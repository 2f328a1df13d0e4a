// Copyright 2026 The brakelab Authors
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

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "brakelab/data/dataset.hpp"
#include "brakelab/eval/eval.hpp"
#include "brakelab/model/dynamics.hpp"
#include "brakelab/policy/sac.hpp"
#include "json.hpp"

namespace brakelab::pipeline {

enum class Stage { kCollect, kTrainModel, kTrainPolicy, kEvaluate, kGapReport, kAll };
enum class Scale { kDesk, kPaper };

Stage parse_stage(const std::string& s);
std::string stage_name(Stage s);
Scale parse_scale(const std::string& s);
std::string scale_name(Scale s);

// Bad arguments or configuration.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A stage's input (dataset, model or policy) does not exist.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  Stage stage = Stage::kAll;
  Scale scale = Scale::kDesk;
  std::uint64_t seed = 7;
  int jobs = 1;
  std::filesystem::path out = "brakelab_out";
  std::filesystem::path data;    // default <out>/data
  std::filesystem::path model;   // default <out>/model
  std::filesystem::path policy;  // default <out>/policy/policy.bin

  data::CorpusConfig corpus;
  model::ModelConfig model_cfg;
  model::TrainConfig train;
  policy::SacConfig sac;
  int repeats = 5;

  // Network sizes, epochs and roll-out lengths for the scale.
  static RunConfig defaults(Scale scale, std::uint64_t seed);
  // Merges a JSON object shaped like the snapshot written by `run`.
  void apply_overrides(const nlohmann::ordered_json& j);
  // Fills unset paths below `out` and derives per-stage seeds.
  void resolve();
  void validate() const;
};

void to_json(nlohmann::ordered_json& j, const RunConfig& c);

struct StageResult {
  std::string stage;
  double seconds = 0.0;
};

// Runs the configured stage (or all of them in order). Writes the resolved
// configuration to <out>/config.json and wall-clock times to
// <out>/timings.json.
std::vector<StageResult> run(const RunConfig& cfg, std::ostream& log);

void run_collect(const RunConfig& cfg, std::ostream& log);
void run_train_model(const RunConfig& cfg, std::ostream& log);
void run_train_policy(const RunConfig& cfg, std::ostream& log);
void run_evaluate(const RunConfig& cfg, std::ostream& log);
void run_gap_report(const RunConfig& cfg, std::ostream& log);

// Scenario set used by the gap report: in-distribution roads plus the
// out-of-distribution matrix.
std::vector<sim::ScenarioSpec> gap_scenarios();

}  // namespace brakelab::pipeline

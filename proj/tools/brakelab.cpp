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

// Pipeline driver: collect, train-model, train-policy, evaluate, gap-report.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "brakelab/pipeline/pipeline.hpp"

namespace {

constexpr int kUsageExit = 2;

}  // namespace

int main(int argc, char** argv) {
  using namespace brakelab;
  CLI::App app{"Braking-control laboratory: data, dynamics model, policy, evaluation"};
  std::string stage = "all";
  std::string scale = "desk";
  std::uint64_t seed = 7;
  int jobs = 1;
  std::string out = "brakelab_out", data, model, policy, config;
  app.add_option("--stage", stage, "collect | train-model | train-policy | evaluate | gap-report | all")
      ->capture_default_str();
  app.add_option("--seed", seed, "Master seed")->capture_default_str();
  app.add_option("--scale", scale, "desk | paper")->capture_default_str();
  app.add_option("--data", data, "Dataset directory (default <out>/data)");
  app.add_option("--model", model, "Dynamics model directory (default <out>/model)");
  app.add_option("--policy", policy, "Policy checkpoint (default <out>/policy/policy.bin)");
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_option("--jobs", jobs, "Worker threads for collection and evaluation")->capture_default_str();
  app.add_option("--config", config, "JSON file with hyper-parameter overrides");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageExit;
  }

  try {
    auto cfg = pipeline::RunConfig::defaults(pipeline::parse_scale(scale), seed);
    cfg.stage = pipeline::parse_stage(stage);
    cfg.jobs = jobs;
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw pipeline::UsageError("cannot read config file " + config);
      nlohmann::ordered_json j;
      try {
        j = nlohmann::ordered_json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw pipeline::UsageError("config file " + config + ": " + e.what());
      }
      cfg.apply_overrides(j);
    }
    cfg.out = out;
    cfg.data = data;
    cfg.model = model;
    cfg.policy = policy;
    cfg.resolve();
    pipeline::run(cfg, std::cout);
  } catch (const pipeline::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageExit;
  } catch (const pipeline::MissingArtifact& e) {
    std::cerr << "missing input: " << e.what() << '\n';
    return kUsageExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

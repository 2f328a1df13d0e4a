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

#include <filesystem>
#include <string>
#include <vector>

#include "brakelab/sim/vehicle.hpp"
#include "json.hpp"

namespace brakelab::sim {

enum class Category { kInDistribution, kOutOfDistribution };

struct ScenarioSpec {
  std::string name;
  Category category = Category::kInDistribution;
  FrictionTriple base_triple = kDryAsphalt;
  std::vector<SurfaceSegment> surface_segments;
  double braking_speed_kmh = 40.0;
  DriverProfile driver;

  void validate() const;
  SurfaceMap surface() const;
  // True when some wheel path crosses anything other than high adhesion.
  bool low_or_split_adhesion() const;
  ScenarioSpec mirrored() const;
};

void to_json(nlohmann::ordered_json& j, const ScenarioSpec& s);
void from_json(const nlohmann::ordered_json& j, ScenarioSpec& s);

ScenarioSpec load_scenario(const std::filesystem::path& path);
void save_scenario(const ScenarioSpec& s, const std::filesystem::path& path);

// Straight-line corpus roads at the collection speed.
ScenarioSpec high_adhesion_straight(double speed_kmh = 40.0);
ScenarioSpec low_adhesion_straight(double speed_kmh = 40.0);
ScenarioSpec split_friction_straight(double speed_kmh = 40.0);

std::vector<ScenarioSpec> in_distribution_scenarios();
// Seven harder roads at their test speeds.
std::vector<ScenarioSpec> out_of_distribution_scenarios();

// Simulator positioned `offset_m` along the road, free rolling at the
// scenario speed.
Simulator make_simulator(const ScenarioSpec& s, const VehicleParams& params, double offset_m = 0.0,
                         const HcuParams& hcu = {});

}  // namespace brakelab::sim

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

#include "brakelab/sim/scenario.hpp"

#include <fstream>
#include <stdexcept>

namespace brakelab::sim {

namespace {

using json = nlohmann::ordered_json;

constexpr double kRoadEnd = 1.0e5;
constexpr double kCurveSteer = 1.2;  // hand-wheel rad

const char* side_name(Side s) {
  switch (s) {
    case Side::kLeft:
      return "left";
    case Side::kRight:
      return "right";
    case Side::kBoth:
      return "both";
  }
  return "both";
}

Side parse_side(const std::string& s) {
  if (s == "left") return Side::kLeft;
  if (s == "right") return Side::kRight;
  if (s == "both") return Side::kBoth;
  throw std::invalid_argument("unknown surface side '" + s + "'");
}

json triple_json(const FrictionTriple& t) { return json::array({t.c1, t.c2, t.c3}); }

FrictionTriple parse_triple(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("friction triple must be [c1,c2,c3]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

ScenarioSpec base(std::string name, Category cat, double speed, FrictionTriple road) {
  ScenarioSpec s;
  s.name = std::move(name);
  s.category = cat;
  s.base_triple = road;
  s.braking_speed_kmh = speed;
  return s;
}

ScenarioSpec split(std::string name, Category cat, double speed) {
  ScenarioSpec s = base(std::move(name), cat, speed, kDryAsphalt);
  s.surface_segments.push_back({-kRoadEnd, kRoadEnd, Side::kRight, kWetPlastic});
  return s;
}

ScenarioSpec transition(std::string name, double speed, FrictionTriple first, FrictionTriple second) {
  ScenarioSpec s = base(std::move(name), Category::kOutOfDistribution, speed, first);
  s.surface_segments.push_back({10.0, kRoadEnd, Side::kBoth, second});
  return s;
}

ScenarioSpec curve(ScenarioSpec s) {
  s.driver.steering.type = SteeringProfile::Type::kConstant;
  s.driver.steering.value_rad = kCurveSteer;
  return s;
}

}  // namespace

void ScenarioSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("scenario without a name");
  if (!(braking_speed_kmh > 0.0)) throw std::invalid_argument("scenario " + name + ": braking speed must be positive");
  if (driver.onset_s < 0.0) throw std::invalid_argument("scenario " + name + ": negative brake onset");
  sim::validate(base_triple);
  for (const auto& seg : surface_segments) {
    sim::validate(seg.triple);
    if (!(seg.to_m > seg.from_m)) throw std::invalid_argument("scenario " + name + ": empty surface segment");
  }
}

SurfaceMap ScenarioSpec::surface() const {
  SurfaceMap m(base_triple);
  for (const auto& seg : surface_segments) m.add(seg);
  return m;
}

bool ScenarioSpec::low_or_split_adhesion() const {
  const double high = peak_mu(kDryAsphalt);
  if (peak_mu(base_triple) < 0.5 * high) return true;
  for (const auto& seg : surface_segments) {
    if (peak_mu(seg.triple) < 0.5 * high) return true;
  }
  return false;
}

ScenarioSpec ScenarioSpec::mirrored() const {
  ScenarioSpec m = *this;
  m.name = name + "_mirrored";
  for (auto& seg : m.surface_segments) {
    if (seg.side == Side::kLeft) {
      seg.side = Side::kRight;
    } else if (seg.side == Side::kRight) {
      seg.side = Side::kLeft;
    }
  }
  m.driver.steering.value_rad = -driver.steering.value_rad;
  return m;
}

void to_json(json& j, const ScenarioSpec& s) {
  j = json::object();
  j["name"] = s.name;
  j["category"] = s.category == Category::kInDistribution ? "in-distribution" : "out-of-distribution";
  j["base_triple"] = triple_json(s.base_triple);
  j["surface_segments"] = json::array();
  for (const auto& seg : s.surface_segments) {
    j["surface_segments"].push_back(
        {{"from_m", seg.from_m}, {"to_m", seg.to_m}, {"side", side_name(seg.side)}, {"triple", triple_json(seg.triple)}});
  }
  j["braking_speed_kmh"] = s.braking_speed_kmh;
  const auto& st = s.driver.steering;
  json steering = {{"type", st.type == SteeringProfile::Type::kConstant ? "constant" : "ramp"},
                   {"value_rad", st.value_rad}};
  if (st.type == SteeringProfile::Type::kRamp) {
    steering["rate_rad_s"] = st.rate_rad_per_s;
    steering["start_s"] = st.start_s;
  }
  j["steering"] = steering;
  j["driver"] = {{"brake_force_N", s.driver.brake_force_N}, {"onset_s", s.driver.onset_s}};
}

void from_json(const json& j, ScenarioSpec& s) {
  s = ScenarioSpec{};
  s.name = j.at("name").get<std::string>();
  const auto cat = j.value("category", std::string("in-distribution"));
  if (cat == "in-distribution") {
    s.category = Category::kInDistribution;
  } else if (cat == "out-of-distribution") {
    s.category = Category::kOutOfDistribution;
  } else {
    throw std::invalid_argument("scenario " + s.name + ": unknown category '" + cat + "'");
  }
  if (j.contains("base_triple")) s.base_triple = parse_triple(j.at("base_triple"));
  for (const auto& seg : j.value("surface_segments", json::array())) {
    s.surface_segments.push_back({seg.at("from_m").get<double>(), seg.at("to_m").get<double>(),
                                  parse_side(seg.value("side", std::string("both"))), parse_triple(seg.at("triple"))});
  }
  s.braking_speed_kmh = j.at("braking_speed_kmh").get<double>();
  if (j.contains("steering")) {
    const auto& st = j.at("steering");
    const auto type = st.value("type", std::string("constant"));
    if (type == "constant") {
      s.driver.steering.type = SteeringProfile::Type::kConstant;
    } else if (type == "ramp") {
      s.driver.steering.type = SteeringProfile::Type::kRamp;
      s.driver.steering.rate_rad_per_s = st.at("rate_rad_s").get<double>();
      s.driver.steering.start_s = st.value("start_s", 0.0);
    } else {
      throw std::invalid_argument("scenario " + s.name + ": unknown steering type '" + type + "'");
    }
    s.driver.steering.value_rad = st.value("value_rad", 0.0);
  }
  if (j.contains("driver")) {
    const auto& d = j.at("driver");
    s.driver.brake_force_N = d.value("brake_force_N", s.driver.brake_force_N);
    s.driver.onset_s = d.value("onset_s", s.driver.onset_s);
  }
  s.validate();
}

ScenarioSpec load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file " + path.string());
  try {
    return json::parse(in).get<ScenarioSpec>();
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed scenario file " + path.string() + ": " + e.what());
  }
}

void save_scenario(const ScenarioSpec& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scenario file " + path.string());
  out << json(s).dump(2) << '\n';
}

ScenarioSpec high_adhesion_straight(double speed) {
  return base("high_adhesion_straight", Category::kInDistribution, speed, kDryAsphalt);
}

ScenarioSpec low_adhesion_straight(double speed) {
  return base("low_adhesion_straight", Category::kInDistribution, speed, kWetPlastic);
}

ScenarioSpec split_friction_straight(double speed) {
  return split("split_friction_straight", Category::kInDistribution, speed);
}

std::vector<ScenarioSpec> in_distribution_scenarios() {
  return {high_adhesion_straight(), low_adhesion_straight(), split_friction_straight()};
}

std::vector<ScenarioSpec> out_of_distribution_scenarios() {
  constexpr auto ood = Category::kOutOfDistribution;
  return {
      base("high_adhesion_straight", ood, 100.0, kDryAsphalt),
      base("low_adhesion_straight", ood, 55.0, kWetPlastic),
      transition("high_to_low", 45.0, kDryAsphalt, kWetPlastic),
      transition("low_to_high", 45.0, kWetPlastic, kDryAsphalt),
      split("split_friction_straight", ood, 60.0),
      curve(base("high_adhesion_curve", ood, 30.0, kDryAsphalt)),
      curve(split("split_friction_curve", ood, 30.0)),
  };
}

Simulator make_simulator(const ScenarioSpec& s, const VehicleParams& params, double offset_m, const HcuParams& hcu) {
  return Simulator(params, s.surface(), s.driver, initial_state(s.braking_speed_kmh, s.driver, params, offset_m), hcu);
}

}  // namespace brakelab::sim

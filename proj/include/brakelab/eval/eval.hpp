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

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "brakelab/mdp/mdp.hpp"
#include "brakelab/policy/sac.hpp"
#include "brakelab/sim/scenario.hpp"

namespace brakelab::eval {

// Closed-loop braking controller. Called once per 20 ms control step after
// brake onset with the stacked sensor history.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual JointAction act(const StackedState& s) = 0;
  virtual int history() const { return 1; }
};

class NoControl : public Controller {
 public:
  JointAction act(const StackedState&) override { return kAllNoControl; }
};

// Three-band rule used for data collection.
class RuleController : public Controller {
 public:
  JointAction act(const StackedState& s) override;
};

// Per-wheel latched hysteresis. `latched[i]` is true while wheel i is
// releasing pressure after exceeding the upper band.
JointAction reference_abs(const std::array<std::optional<double>, kNumWheels>& slips,
                          std::array<bool, kNumWheels>& latched);

class ReferenceAbs : public Controller {
 public:
  JointAction act(const StackedState& s) override;

 private:
  std::array<bool, kNumWheels> latched_{};
};

// Learned policy, acting greedily (per-wheel argmax).
class LearnedController : public Controller {
 public:
  explicit LearnedController(std::shared_ptr<const policy::Policy> p) : policy_(std::move(p)) {}
  JointAction act(const StackedState& s) override { return policy::greedy_action(*policy_, s); }
  int history() const override { return policy_->encoder().h; }

 private:
  std::shared_ptr<const policy::Policy> policy_;
};

struct ControllerSpec {
  std::string name;
  std::function<std::unique_ptr<Controller>()> make;
};

ControllerSpec no_control();
ControllerSpec rule_controller();
ControllerSpec reference_abs_controller();
ControllerSpec learned_controller(std::shared_ptr<const policy::Policy> p, const std::string& name = "learned");

struct TrialConfig {
  sim::VehicleParams params;
  double friction_scale = 1.0;
  sim::SensorNoise noise{0.1, 0.05, 0.002, 0.02};
  double offset_range_m = 2.0;
  double max_time_s = 30.0;
  RewardConfig reward;  // v_eps
  double lockup_slip = 0.95;
  int lockup_steps = 5;
  double lockup_margin_kmh = 5.0;
};

struct Traces {
  std::vector<double> t;
  std::vector<double> v;
  std::array<std::vector<double>, kNumWheels> w;
  std::array<std::vector<double>, kNumWheels> p;
  std::vector<double> yaw_rate;
  std::array<std::vector<double>, kNumWheels> slip;  // NaN at or below the guard speed
};

struct Metrics {
  bool failed = false;
  std::string error;
  double distance_m = 0.0;
  double deviation_deg = 0.0;      // terminal heading error
  double max_deviation_deg = 0.0;  // largest heading error after onset
  bool lockup = false;
  int onset_index = 0;
  Traces traces;
};

// One closed-loop run from the scenario's braking speed to standstill. The
// seed draws the start offset and the sensor noise.
Metrics run_trial(const ControllerSpec& controller, const sim::ScenarioSpec& scenario, std::uint64_t seed,
                  const TrialConfig& cfg = {});

// True when some wheel holds slip >= threshold for `steps` consecutive
// samples while v > v_min.
bool detect_lockup(const Traces& tr, double v_min_kmh, double threshold, int steps);

struct ResultRow {
  std::string controller;
  std::string scenario;
  double speed_kmh = 0.0;
  double dist_mean_m = 0.0;
  double dist_std_m = 0.0;
  double dev_mean_deg = 0.0;
  double dev_std_deg = 0.0;
  int lockups = 0;
  int trials = 0;  // successful
  int failed = 0;
  std::vector<std::string> errors;
};

struct CompareConfig {
  int repeats = 5;
  std::uint64_t seed = 0;
  int jobs = 1;
  TrialConfig trial;
};

// One row per (controller, scenario), controller-major. Failed trials are
// counted per row and left out of the aggregates.
std::vector<ResultRow> compare(const std::vector<ControllerSpec>& controllers,
                               const std::vector<sim::ScenarioSpec>& scenarios, const CompareConfig& cfg = {});

void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path);

struct Perturbation {
  double mass_scale = 1.10;
  double friction_scale = 0.85;
  double brake_gain_scale = 0.90;

  static Perturbation none() { return {1.0, 1.0, 1.0}; }
  TrialConfig apply(TrialConfig base) const;
};

struct GapRow {
  std::string scenario;
  double speed_kmh = 0.0;
  ResultRow nominal;
  ResultRow perturbed;
  double dist_gap_m() const { return perturbed.dist_mean_m - nominal.dist_mean_m; }
  double dev_gap_deg() const { return perturbed.dev_mean_deg - nominal.dev_mean_deg; }
};

std::vector<GapRow> gap_report(const ControllerSpec& controller, const std::vector<sim::ScenarioSpec>& scenarios,
                               const Perturbation& perturbation, const CompareConfig& cfg = {});

void write_gap_csv(const std::vector<GapRow>& rows, const std::filesystem::path& path);

// ---- plots

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  bool dashed = false;
};

// Line chart; non-finite samples break the line.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

// Four solid wheel-speed curves and a dashed vehicle-speed curve.
std::string speed_plot_svg(const std::string& title, const Traces& tr);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace brakelab::eval

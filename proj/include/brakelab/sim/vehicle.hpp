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
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "brakelab/mdp/types.hpp"
#include "brakelab/sim/friction.hpp"

namespace brakelab::sim {

inline constexpr double kGravity = 9.80665;
inline constexpr double kPhysicsDt = 1e-3;
inline constexpr double kControlDt = 0.02;
inline constexpr int kSubsteps = 20;

enum Wheel : int { kFrontLeft = 0, kFrontRight = 1, kRearLeft = 2, kRearRight = 3 };

struct VehicleParams {
  double wheelbase_m = 2.680;
  double track_width_m = 1.600;
  double curb_mass_kg = 1630.0;
  double steering_ratio = 15.0;
  double wheel_radius_m = 0.364;
  double wheel_inertia_kgm2 = 1.2;
  double yaw_inertia_kgm2 = 2700.0;
  double brake_gain_Nm_per_MPa = 300.0;
  double cg_height_m = 0.62;
  double front_axle_fraction = 0.58;
  double master_gain_MPa_per_N = 0.034;

  void validate() const;
  double cg_to_front() const { return wheelbase_m * (1.0 - front_axle_fraction); }
  double cg_to_rear() const { return wheelbase_m * front_axle_fraction; }
};

struct HcuParams {
  double k_inc_MPa_per_s = 80.0;
  double k_dec_MPa_per_s = 120.0;
  double tau_nc_s = 0.05;
};

// One valve update of a wheel cylinder.
double hcu_step(double p, WheelAction u, double p_master, double dt, const HcuParams& hcu = {});

enum class Side { kLeft, kRight, kBoth };

struct SurfaceSegment {
  double from_m = 0.0;
  double to_m = 0.0;
  Side side = Side::kBoth;
  FrictionTriple triple;
};

// Friction layout along the travelled path. Segments cover [from_m, to_m);
// later segments take precedence; anything uncovered uses the base triple.
class SurfaceMap {
 public:
  explicit SurfaceMap(FrictionTriple base = kDryAsphalt);

  // Test hook: every wheel sees the same mu regardless of slip.
  static SurfaceMap constant_mu(double mu);

  void add(const SurfaceSegment& seg);

  struct Patch {
    FrictionTriple triple;
    double peak = 0.0;
  };
  const Patch& at(double position_m, Side side) const;

  const std::optional<double>& constant() const { return constant_; }
  const FrictionTriple& base() const { return base_.triple; }
  const std::vector<SurfaceSegment>& segments() const { return segments_; }

  SurfaceMap mirrored() const;
  // Multiplies every adhesion curve by `factor` (c1 and c3 scaled).
  SurfaceMap scaled(double factor) const;

 private:
  Patch base_;
  std::vector<SurfaceSegment> segments_;
  std::vector<Patch> patches_;
  std::optional<double> constant_;
};

struct SteeringProfile {
  enum class Type { kConstant, kRamp };
  Type type = Type::kConstant;
  double value_rad = 0.0;
  double rate_rad_per_s = 0.0;  // ramp only
  double start_s = 0.0;         // ramp only

  double at(double t) const;
};

struct DriverProfile {
  double brake_force_N = 500.0;
  double onset_s = 0.3;
  double accel_force_N = 0.0;
  SteeringProfile steering;

  double brake_force(double t) const;
  double steering_angle(double t) const { return steering.at(t); }
  bool braking(double t) const;
};

struct SimState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;   // rad
  double course = 0.0;    // direction of travel, rad
  double distance = 0.0;  // path position used for surface lookup, m
  double v_kmh = 0.0;
  std::array<double, kNumWheels> wheel_kmh{};
  std::array<double, kNumWheels> pressure{};
  double yaw_rate = 0.0;
  double pitch_rate = 0.0;
  double roll_rate = 0.0;
  double ax = 0.0;
  double ay = 0.0;
  double az = 0.0;
  double p_master = 0.0;
  std::int64_t step = 0;
  double time_s = 0.0;
};

class SimulationFault : public std::runtime_error {
 public:
  SimulationFault(const std::string& what, std::int64_t step)
      : std::runtime_error(what + " at physics step " + std::to_string(step)), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

// Free-rolling vehicle at `speed_kmh` in steady cornering for the initial
// steering angle.
SimState initial_state(double speed_kmh, const DriverProfile& driver, const VehicleParams& params,
                       double position_m = 0.0);

SimState physics_step(const SimState& state, const JointAction& actions, const DriverProfile& driver,
                      const SurfaceMap& surface, const VehicleParams& params, double dt,
                      const HcuParams& hcu = {});

struct SensorNoise {
  double speed_kmh = 0.0;
  double accel = 0.0;
  double rate = 0.0;
  double pressure = 0.0;

  bool enabled() const { return speed_kmh > 0.0 || accel > 0.0 || rate > 0.0 || pressure > 0.0; }
};

Observation sense(const SimState& state, const DriverProfile& driver);
Observation sense(const SimState& state, const DriverProfile& driver, const SensorNoise& noise,
                  std::mt19937_64& rng);

// Control-rate wrapper: one call advances kSubsteps physics steps under a
// fixed joint action.
class Simulator {
 public:
  Simulator(VehicleParams params, SurfaceMap surface, DriverProfile driver, SimState init,
            HcuParams hcu = {});

  void control_step(const JointAction& action);
  Observation observe() const { return sense(state_, driver_); }

  const SimState& state() const { return state_; }
  const VehicleParams& params() const { return params_; }
  const SurfaceMap& surface() const { return surface_; }
  const DriverProfile& driver() const { return driver_; }

 private:
  VehicleParams params_;
  SurfaceMap surface_;
  DriverProfile driver_;
  HcuParams hcu_;
  SimState state_;
};

}  // namespace brakelab::sim

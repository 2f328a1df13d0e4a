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

#include "brakelab/sim/vehicle.hpp"

#include <algorithm>
#include <cmath>

namespace brakelab::sim {

void VehicleParams::validate() const {
  const double positive[] = {wheelbase_m,        track_width_m,         curb_mass_kg,
                             steering_ratio,     wheel_radius_m,        wheel_inertia_kgm2,
                             yaw_inertia_kgm2,   brake_gain_Nm_per_MPa, cg_height_m,
                             master_gain_MPa_per_N};
  for (double v : positive) {
    if (!(v > 0.0)) throw std::invalid_argument("VehicleParams: all dimensions must be positive");
  }
  if (!(front_axle_fraction > 0.0 && front_axle_fraction < 1.0)) {
    throw std::invalid_argument("VehicleParams: front_axle_fraction must lie in (0,1)");
  }
}

double hcu_step(double p, WheelAction u, double p_master, double dt, const HcuParams& hcu) {
  switch (u) {
    case WheelAction::kHold:
      return p;
    case WheelAction::kIncrease:
      return std::min(p_master, p + hcu.k_inc_MPa_per_s * dt);
    case WheelAction::kDecrease:
      return std::max(0.0, p - hcu.k_dec_MPa_per_s * dt);
    case WheelAction::kNoControl:
      return p_master + (p - p_master) * std::exp(-dt / hcu.tau_nc_s);
  }
  return p;
}

SurfaceMap::SurfaceMap(FrictionTriple base) : base_{base, peak_mu(base)} { validate(base); }

SurfaceMap SurfaceMap::constant_mu(double mu) {
  SurfaceMap m;
  m.constant_ = mu;
  return m;
}

void SurfaceMap::add(const SurfaceSegment& seg) {
  validate(seg.triple);
  if (!(seg.to_m > seg.from_m)) throw std::invalid_argument("SurfaceMap: empty segment");
  segments_.push_back(seg);
  patches_.push_back({seg.triple, peak_mu(seg.triple)});
}

const SurfaceMap::Patch& SurfaceMap::at(double position_m, Side side) const {
  for (std::size_t i = segments_.size(); i-- > 0;) {
    const auto& s = segments_[i];
    if (position_m >= s.from_m && position_m < s.to_m && (s.side == Side::kBoth || s.side == side)) {
      return patches_[i];
    }
  }
  return base_;
}

SurfaceMap SurfaceMap::mirrored() const {
  SurfaceMap m = *this;
  for (auto& s : m.segments_) {
    if (s.side == Side::kLeft) {
      s.side = Side::kRight;
    } else if (s.side == Side::kRight) {
      s.side = Side::kLeft;
    }
  }
  return m;
}

SurfaceMap SurfaceMap::scaled(double factor) const {
  auto scale = [factor](FrictionTriple t) { return FrictionTriple{t.c1 * factor, t.c2, t.c3 * factor}; };
  SurfaceMap m(scale(base_.triple));
  for (const auto& s : segments_) m.add({s.from_m, s.to_m, s.side, scale(s.triple)});
  if (constant_) m.constant_ = *constant_ * factor;
  return m;
}

double SteeringProfile::at(double t) const {
  if (type == Type::kConstant) return value_rad;
  if (t <= start_s) return 0.0;
  const double ramped = rate_rad_per_s * (t - start_s);
  return value_rad >= 0.0 ? std::min(ramped, value_rad) : std::max(-ramped, value_rad);
}

// Onset is compared with half a physics step of slack so that control
// boundaries computed as k * dt land on the intended side.
bool DriverProfile::braking(double t) const { return t >= onset_s - 0.5 * kPhysicsDt; }

double DriverProfile::brake_force(double t) const { return braking(t) ? brake_force_N : 0.0; }

SimState initial_state(double speed_kmh, const DriverProfile& driver, const VehicleParams& params,
                       double position_m) {
  SimState s;
  s.v_kmh = speed_kmh;
  s.wheel_kmh.fill(speed_kmh);
  s.distance = position_m;
  s.x = position_m;
  const double road_angle = driver.steering_angle(0.0) / params.steering_ratio;
  s.yaw_rate = speed_kmh / 3.6 * std::tan(road_angle) / params.wheelbase_m;
  return s;
}

namespace {

struct TyreForce {
  double fx = 0.0;          // retarding, along the wheel heading
  double fy = 0.0;          // lateral, wheel frame
  double dfx_domega = 0.0;  // sensitivity of fx to wheel spin
};

// Combined-slip Burckhardt tyre: the resultant friction mu(s) * N opposes the
// slip vector (sx, sy), where sx = (v_x - omega r) / |v| and sy = v_y / |v|.
TyreForce tyre_force(double vxw, double vyw, double omega, double r, double load,
                     const SurfaceMap::Patch* patch, std::optional<double> constant) {
  const double speed = std::max(std::hypot(vxw, vyw), 0.5);
  const double sx = std::clamp((vxw - omega * r) / speed, -1.0, 1.0);
  const double sy = std::clamp(vyw / speed, -1.0, 1.0);
  const double s = std::hypot(sx, sy);
  TyreForce out;
  if (constant) {
    if (s < 1e-12) {
      out.fx = *constant * load;
    } else {
      out.fx = *constant * load * sx / s;
      out.fy = -*constant * load * sy / s;
    }
    return out;
  }
  const double sc = std::min(s, 1.0);
  const double mu = friction_mu(sc, patch->triple);
  const double slope = s < 1.0 ? friction_mu_slope(sc, patch->triple) : 0.0;
  double dfx_dsx = slope;
  if (s > 1e-9) {
    out.fx = mu * load * sx / s;
    out.fy = -mu * load * sy / s;
    dfx_dsx = slope * (sx * sx) / (s * s) + mu * (sy * sy) / (s * s * s);
  }
  if (std::fabs(vxw - omega * r) / speed >= 1.0) dfx_dsx = 0.0;
  out.dfx_domega = -dfx_dsx * load * r / speed;
  return out;
}

}  // namespace

SimState physics_step(const SimState& s, const JointAction& actions, const DriverProfile& driver,
                      const SurfaceMap& surface, const VehicleParams& P, double dt, const HcuParams& hcu) {
  if (!(dt > 0.0 && dt <= kPhysicsDt)) throw std::invalid_argument("physics_step: dt must lie in (0, 1 ms]");
  SimState n = s;
  n.step = s.step + 1;
  n.time_s = static_cast<double>(n.step) * dt;
  const bool finite_in = std::isfinite(s.v_kmh) && std::isfinite(s.heading) && std::isfinite(s.course) &&
                         std::isfinite(s.yaw_rate) && std::isfinite(s.ax) && std::isfinite(s.distance) &&
                         std::all_of(s.wheel_kmh.begin(), s.wheel_kmh.end(), [](double w) { return std::isfinite(w); }) &&
                         std::all_of(s.pressure.begin(), s.pressure.end(), [](double p) { return std::isfinite(p); });
  if (!finite_in) throw SimulationFault("non-finite vehicle state", n.step);

  const double m = P.curb_mass_kg;
  const double r = P.wheel_radius_m;
  const double a = P.cg_to_front();
  const double b = P.cg_to_rear();
  const double half_track = 0.5 * P.track_width_m;

  n.p_master = P.master_gain_MPa_per_N * driver.brake_force(s.time_s);
  for (int i = 0; i < kNumWheels; ++i) {
    const double p = std::min(s.pressure[i], n.p_master);
    n.pressure[i] = hcu_step(p, actions[i], n.p_master, dt, hcu);
  }

  const double weight = m * kGravity;
  const double transfer = m * s.ax * P.cg_height_m / P.wheelbase_m;
  const double n_front = std::max(0.0, 0.5 * (weight * P.front_axle_fraction - transfer));
  const double n_rear = std::max(0.0, 0.5 * (weight * (1.0 - P.front_axle_fraction) + transfer));
  const std::array<double, kNumWheels> load{n_front, n_front, n_rear, n_rear};

  const double v = s.v_kmh / 3.6;
  const double beta = s.course - s.heading;
  const double cb = std::cos(beta);
  const double sb = std::sin(beta);
  const double u_body = v * cb;
  const double v_body = v * sb;
  const double road_angle = driver.steering_angle(s.time_s) / P.steering_ratio;
  const double cd = std::cos(road_angle);
  const double sd = std::sin(road_angle);

  std::array<double, kNumWheels> bx{};
  std::array<double, kNumWheels> by{};
  std::array<double, kNumWheels> mz{};
  for (int i = 0; i < kNumWheels; ++i) {
    const bool front = i < 2;
    const Side side = (i % 2 == 0) ? Side::kLeft : Side::kRight;
    const double px = front ? a : -b;
    const double py = (i % 2 == 0) ? half_track : -half_track;
    const double vxc = u_body - py * s.yaw_rate;
    const double vyc = v_body + px * s.yaw_rate;
    const double vxw = front ? vxc * cd + vyc * sd : vxc;
    const double vyw = front ? -vxc * sd + vyc * cd : vyc;

    const double omega = s.wheel_kmh[i] / 3.6 / r;
    const SurfaceMap::Patch* patch = surface.constant() ? nullptr : &surface.at(s.distance + px, side);
    const TyreForce f = tyre_force(vxw, vyw, omega, r, load[i], patch, surface.constant());

    // Linearised implicit update of the stiff tyre term.
    const double torque = r * f.fx - P.brake_gain_Nm_per_MPa * n.pressure[i];
    double next = omega;
    if (omega > 0.0 || torque > 0.0) {
      next = omega + dt * torque / P.wheel_inertia_kgm2 / (1.0 - dt * r * f.dfx_domega / P.wheel_inertia_kgm2);
    }
    n.wheel_kmh[i] = std::max(0.0, next) * r * 3.6;

    if (front) {
      bx[i] = -f.fx * cd - f.fy * sd;
      by[i] = -f.fx * sd + f.fy * cd;
    } else {
      bx[i] = -f.fx;
      by[i] = f.fy;
    }
    mz[i] = px * by[i] - py * bx[i];
  }
  // Left/right pairs are summed first so mirrored inputs give exactly
  // negated lateral results.
  const double fx_body = (bx[0] + bx[1]) + (bx[2] + bx[3]);
  const double fy_body = (by[0] + by[1]) + (by[2] + by[3]);
  const double yaw_moment = (mz[0] + mz[1]) + (mz[2] + mz[3]);

  const double a_tan = (fx_body * cb + fy_body * sb) / m;
  const double a_norm = (-fx_body * sb + fy_body * cb) / m;
  if (!std::isfinite(a_tan) || !std::isfinite(a_norm) || !std::isfinite(yaw_moment)) {
    throw SimulationFault("non-finite body force", n.step);
  }

  const double v_next = std::max(0.0, v + dt * a_tan);
  n.heading = s.heading + dt * s.yaw_rate;
  n.yaw_rate = s.yaw_rate + dt * yaw_moment / P.yaw_inertia_kgm2;
  n.course = s.course + dt * a_norm / std::max(v, 0.5);
  n.x = s.x + dt * v * std::cos(s.course);
  n.y = s.y + dt * v * std::sin(s.course);
  n.distance = s.distance + dt * v;
  n.ax = a_tan;
  n.ay = a_norm;
  n.az = 0.0;
  n.pitch_rate = 0.0;
  n.roll_rate = 0.0;
  n.v_kmh = v_next * 3.6;
  if (v_next == 0.0) {
    n.wheel_kmh.fill(0.0);
    n.yaw_rate = 0.0;
    n.course = n.heading;
  }

  const bool finite = std::isfinite(n.v_kmh) && std::isfinite(n.heading) && std::isfinite(n.yaw_rate) &&
                      std::isfinite(n.course) && std::isfinite(n.ax) && std::isfinite(n.ay) &&
                      std::all_of(n.wheel_kmh.begin(), n.wheel_kmh.end(), [](double w) { return std::isfinite(w); });
  if (!finite) throw SimulationFault("non-finite vehicle state", n.step);
  return n;
}

Observation sense(const SimState& s, const DriverProfile& driver) {
  Observation o{};
  o[ch::kV] = s.v_kmh;
  for (int i = 0; i < kNumWheels; ++i) {
    o[ch::kWheel + i] = s.wheel_kmh[i];
    o[ch::kPressure + i] = s.pressure[i];
  }
  o[ch::kAccel + 0] = s.ax;
  o[ch::kAccel + 1] = s.ay;
  o[ch::kAccel + 2] = s.az;
  o[ch::kRate + 0] = s.pitch_rate;
  o[ch::kRate + 1] = s.roll_rate;
  o[ch::kRate + 2] = s.yaw_rate;
  o[ch::kBrakeForce] = driver.brake_force(s.time_s);
  o[ch::kAccelForce] = driver.accel_force_N;
  o[ch::kSteer] = driver.steering_angle(s.time_s);
  return o;
}

Observation sense(const SimState& s, const DriverProfile& driver, const SensorNoise& noise,
                  std::mt19937_64& rng) {
  Observation o = sense(s, driver);
  if (!noise.enabled()) return o;
  std::normal_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](int c, double sigma) { o[c] += sigma * unit(rng); };
  jitter(ch::kV, noise.speed_kmh);
  for (int i = 0; i < kNumWheels; ++i) jitter(ch::kWheel + i, noise.speed_kmh);
  for (int i = 0; i < 3; ++i) jitter(ch::kAccel + i, noise.accel);
  for (int i = 0; i < 3; ++i) jitter(ch::kRate + i, noise.rate);
  for (int i = 0; i < kNumWheels; ++i) jitter(ch::kPressure + i, noise.pressure);
  o[ch::kV] = std::max(0.0, o[ch::kV]);
  for (int i = 0; i < kNumWheels; ++i) o[ch::kWheel + i] = std::max(0.0, o[ch::kWheel + i]);
  return o;
}

Simulator::Simulator(VehicleParams params, SurfaceMap surface, DriverProfile driver, SimState init,
                     HcuParams hcu)
    : params_(params), surface_(std::move(surface)), driver_(driver), hcu_(hcu), state_(init) {
  params_.validate();
}

void Simulator::control_step(const JointAction& action) {
  for (int k = 0; k < kSubsteps; ++k) {
    state_ = physics_step(state_, action, driver_, surface_, params_, kPhysicsDt, hcu_);
  }
}

}  // namespace brakelab::sim

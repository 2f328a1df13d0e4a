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
#include <string_view>

namespace brakelab {

// Sensor frame layout. Speeds in km/h, accelerations in m/s^2, angular rates
// in rad/s, pressures in MPa, pedal forces in N, steering-wheel angle in rad.
namespace ch {
inline constexpr int kV = 0;
inline constexpr int kWheel = 1;  // 4 channels, FL FR RL RR
inline constexpr int kAccel = 5;  // a_x a_y a_z
inline constexpr int kRate = 8;   // pitch roll yaw
inline constexpr int kYawRate = 10;
inline constexpr int kPressure = 11;  // 4 channels
inline constexpr int kBrakeForce = 15;
inline constexpr int kAccelForce = 16;
inline constexpr int kSteer = 17;
inline constexpr int kCount = 18;
}  // namespace ch

inline constexpr int kNumWheels = 4;
inline constexpr int kNumActions = 256;

std::string_view channel_name(int c);

using Observation = std::array<double, ch::kCount>;

enum class WheelAction : std::uint8_t {
  kHold = 0,
  kIncrease = 1,
  kDecrease = 2,
  kNoControl = 3,
};

using JointAction = std::array<WheelAction, kNumWheels>;

inline constexpr JointAction kAllNoControl{WheelAction::kNoControl, WheelAction::kNoControl,
                                           WheelAction::kNoControl, WheelAction::kNoControl};

// Joint index = sum_i u_i * 4^i.
int encode(const JointAction& a);
JointAction decode(int index);

}  // namespace brakelab

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
#include <optional>
#include <span>
#include <vector>

#include "brakelab/mdp/types.hpp"
#include "brakelab/sim/vehicle.hpp"

namespace brakelab {

inline constexpr double kSlipGuardKmh = 1.0;
inline constexpr int kDefaultStack = 20;

// 1 - w/v clamped to [0,1]; empty when v is at or below the guard speed.
std::optional<double> slip_ratio(double v_kmh, double w_kmh);

std::array<std::optional<double>, kNumWheels> wheel_slips(const Observation& o);

// Channel-major history window: window(c)[k] is channel c, k frames after
// the oldest frame in the window.
class StackedState {
 public:
  StackedState() = default;
  explicit StackedState(int h) : h_(h), data_(static_cast<std::size_t>(h) * ch::kCount, 0.0) {}

  int h() const { return h_; }
  std::span<const double> window(int c) const { return {data_.data() + c * h_, static_cast<std::size_t>(h_)}; }
  std::span<double> window(int c) { return {data_.data() + c * h_, static_cast<std::size_t>(h_)}; }
  double at(int c, int k) const { return data_[static_cast<std::size_t>(c * h_ + k)]; }
  double& at(int c, int k) { return data_[static_cast<std::size_t>(c * h_ + k)]; }
  Observation frame(int k) const;
  Observation latest() const { return frame(h_ - 1); }

  // Drops the oldest frame and appends `o`.
  void push(const Observation& o);

  const std::vector<double>& data() const { return data_; }
  bool operator==(const StackedState&) const = default;

 private:
  int h_ = 0;
  std::vector<double> data_;
};

// Last h frames of `history`; shorter histories are front-padded with their
// first frame.
StackedState stack(std::span<const Observation> history, int h = kDefaultStack);

// (v / 3.6) * tan(delta / N_s) / L, in rad/s.
double expected_yaw_rate(double v_kmh, double steering_rad, const sim::VehicleParams& params);

struct RewardConfig {
  double beta_speed = 0.025;
  double beta_yaw = 0.5;
  double beta_slip = 0.2;
  double slip_low = 0.1;
  double slip_high = 0.2;
  double v_eps_kmh = 2.0;

  void validate() const;
};

struct RewardTerms {
  double speed = 0.0;
  double yaw = 0.0;
  double slip = 0.0;
  double total() const { return speed + yaw + slip; }
};

RewardTerms reward_terms(double v_kmh, double yaw_rate, const std::array<std::optional<double>, kNumWheels>& slips,
                         double expected_yaw, const RewardConfig& cfg = {});

double reward(double v_kmh, double yaw_rate, const std::array<std::optional<double>, kNumWheels>& slips,
              double expected_yaw, const RewardConfig& cfg = {});

// Terms evaluated on a next-step observation.
RewardTerms reward_terms(const Observation& next, const sim::VehicleParams& params, const RewardConfig& cfg = {});

bool terminated(double v_kmh, const RewardConfig& cfg = {});

}  // namespace brakelab

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

#include "brakelab/mdp/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace brakelab {

std::string_view channel_name(int c) {
  static constexpr std::string_view names[ch::kCount] = {
      "v",       "w_fl",    "w_fr",     "w_rl",     "w_rr",    "a_x",   "a_y",   "a_z",   "pitch_rate",
      "roll_rate", "yaw_rate", "p_fl", "p_fr", "p_rl", "p_rr", "f_brake", "f_acc", "steer"};
  if (c < 0 || c >= ch::kCount) throw std::out_of_range("channel index");
  return names[c];
}

int encode(const JointAction& a) {
  int idx = 0;
  for (int i = kNumWheels - 1; i >= 0; --i) idx = idx * 4 + static_cast<int>(a[i]);
  return idx;
}

JointAction decode(int index) {
  if (index < 0 || index >= kNumActions) throw std::out_of_range("joint action index " + std::to_string(index));
  JointAction a{};
  for (int i = 0; i < kNumWheels; ++i) {
    a[i] = static_cast<WheelAction>(index % 4);
    index /= 4;
  }
  return a;
}

std::optional<double> slip_ratio(double v_kmh, double w_kmh) {
  if (!(v_kmh > kSlipGuardKmh)) return std::nullopt;
  return std::clamp(1.0 - w_kmh / v_kmh, 0.0, 1.0);
}

std::array<std::optional<double>, kNumWheels> wheel_slips(const Observation& o) {
  std::array<std::optional<double>, kNumWheels> out;
  for (int i = 0; i < kNumWheels; ++i) out[i] = slip_ratio(o[ch::kV], o[ch::kWheel + i]);
  return out;
}

Observation StackedState::frame(int k) const {
  Observation o{};
  for (int c = 0; c < ch::kCount; ++c) o[c] = at(c, k);
  return o;
}

void StackedState::push(const Observation& o) {
  for (int c = 0; c < ch::kCount; ++c) {
    auto w = window(c);
    std::copy(w.begin() + 1, w.end(), w.begin());
    w[h_ - 1] = o[c];
  }
}

StackedState stack(std::span<const Observation> history, int h) {
  if (history.empty()) throw std::invalid_argument("stack: empty history");
  if (h <= 0) throw std::invalid_argument("stack: window length must be positive");
  StackedState s(h);
  const auto n = static_cast<long>(history.size());
  for (int k = 0; k < h; ++k) {
    const long src = std::max(0L, n - h + k);
    for (int c = 0; c < ch::kCount; ++c) s.at(c, k) = history[static_cast<std::size_t>(src)][c];
  }
  return s;
}

double expected_yaw_rate(double v_kmh, double steering_rad, const sim::VehicleParams& params) {
  const double road = steering_rad / params.steering_ratio;
  if (std::fabs(road) >= std::numbers::pi / 2) throw sim::DomainError("expected_yaw_rate: road-wheel angle out of range");
  return v_kmh / 3.6 * std::tan(road) / params.wheelbase_m;
}

void RewardConfig::validate() const {
  if (beta_speed < 0.0 || beta_yaw < 0.0 || beta_slip < 0.0) {
    throw std::invalid_argument("RewardConfig: coefficients must be non-negative");
  }
  if (!(slip_low <= slip_high)) throw std::invalid_argument("RewardConfig: empty slip band");
}

RewardTerms reward_terms(double v_kmh, double yaw_rate, const std::array<std::optional<double>, kNumWheels>& slips,
                         double expected_yaw, const RewardConfig& cfg) {
  RewardTerms t;
  t.speed = -cfg.beta_speed * v_kmh;
  t.yaw = -cfg.beta_yaw * std::fabs(yaw_rate - expected_yaw);
  int outside = 0;
  for (const auto& s : slips) {
    if (s && (*s < cfg.slip_low || *s > cfg.slip_high)) ++outside;
  }
  t.slip = -cfg.beta_slip * outside;
  return t;
}

double reward(double v_kmh, double yaw_rate, const std::array<std::optional<double>, kNumWheels>& slips,
              double expected_yaw, const RewardConfig& cfg) {
  return reward_terms(v_kmh, yaw_rate, slips, expected_yaw, cfg).total();
}

RewardTerms reward_terms(const Observation& next, const sim::VehicleParams& params, const RewardConfig& cfg) {
  return reward_terms(next[ch::kV], next[ch::kYawRate], wheel_slips(next),
                      expected_yaw_rate(next[ch::kV], next[ch::kSteer], params), cfg);
}

bool terminated(double v_kmh, const RewardConfig& cfg) { return v_kmh <= cfg.v_eps_kmh; }

}  // namespace brakelab

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
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "brakelab/mdp/mdp.hpp"
#include "brakelab/sim/scenario.hpp"

namespace brakelab::data {

inline constexpr const char* kTrajectorySchema = "brakelab.trajectory/1";
inline constexpr const char* kDatasetSchema = "brakelab.dataset/1";

enum class PolicyKind { kRule, kRandom };

const char* policy_name(PolicyKind p);
PolicyKind parse_policy(const std::string& s);

// Slip-band rule: <0.03 no control, [0.03,0.1) increase, [0.1,0.2) hold,
// >=0.2 decrease; undefined slip -> no control.
WheelAction rule_wheel(std::optional<double> slip);
JointAction rule_policy(const std::array<std::optional<double>, kNumWheels>& slips);

// Uniform over the 256 joint actions.
JointAction random_policy(std::mt19937_64& rng);

struct Record {
  double t = 0.0;
  Observation obs{};
  JointAction act = kAllNoControl;  // applied from t to t + 20 ms

  bool operator==(const Record&) const = default;
};

struct Trajectory {
  std::string scenario;
  std::string surface;  // corpus tag: high, low, split
  std::string policy;
  int run = 0;
  std::uint64_t seed = 0;
  int onset_index = 0;
  std::vector<Record> records;

  bool operator==(const Trajectory&) const = default;
  std::string file_stem() const { return policy + "_" + surface + "_" + std::to_string(run); }
};

struct Dataset {
  std::vector<Trajectory> train;
  std::vector<Trajectory> val;

  bool operator==(const Dataset&) const = default;
  std::size_t size() const { return train.size() + val.size(); }
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CollectConfig {
  double max_time_s = 30.0;
  double offset_range_m = 2.0;  // initial position drawn from [-r, r]
  sim::SensorNoise noise{0.1, 0.05, 0.002, 0.02};
  sim::VehicleParams params;
};

// Runs the scenario at 50 Hz from its braking speed to termination. Records
// before brake onset carry the no-control action.
Trajectory collect(const sim::ScenarioSpec& scenario, PolicyKind policy, std::uint64_t seed,
                   const CollectConfig& cfg = {});

struct CorpusConfig {
  int runs_per_cell = 6;  // the last run of each cell goes to validation
  double speed_kmh = 40.0;
  int jobs = 1;
  CollectConfig collect;
};

// Rule and random policies on high-adhesion, low-adhesion and split-friction
// straights.
Dataset collect_corpus(std::uint64_t seed, const CorpusConfig& cfg = {});

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b, std::uint64_t c);

void save_trajectory(const Trajectory& t, const std::filesystem::path& path);
Trajectory load_trajectory(const std::filesystem::path& path);

// Layout: root/dataset.json, root/{train,val}/{policy}_{surface}_{run}.jsonl.
void save_dataset(const Dataset& d, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

// Writes `contents` to a sibling temporary file and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace brakelab::data

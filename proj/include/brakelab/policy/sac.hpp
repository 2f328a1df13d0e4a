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
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "brakelab/data/dataset.hpp"
#include "brakelab/mdp/mdp.hpp"
#include "brakelab/model/dynamics.hpp"
#include "brakelab/nn/nn.hpp"

namespace brakelab::policy {

using model::MatrixR;
using model::Real;
using VarR = nn::Var<Real>;
using TapeR = nn::Tape<Real>;

inline constexpr int kChoices = 4;  // per wheel
inline constexpr double kMaxWheelEntropy = 1.3862943611198906;  // ln 4

// Adds v_aug to every vehicle- and wheel-speed entry of the window.
StackedState speed_augment(const StackedState& s, double v_aug_kmh);

// Flattens stacked states (channel-major) into normalised network rows.
struct StateEncoder {
  int h = kDefaultStack;
  std::array<double, ch::kCount> mean{};
  std::array<double, ch::kCount> std{};

  static StateEncoder from(const model::Normalizer& n, int h);
  int width() const { return h * ch::kCount; }
  MatrixR encode(std::span<const StackedState> states) const;
};

// Four independent 4-way categoricals, one per wheel.
class Policy {
 public:
  Policy() = default;
  Policy(StateEncoder enc, std::vector<int> hidden, std::uint64_t seed);

  const StateEncoder& encoder() const { return enc_; }
  const std::vector<int>& hidden() const { return hidden_; }
  std::vector<nn::Parameter<Real>*> parameters();

  // B x 16 grouped log-probabilities; column 4*i + a is ln pi_i(a | s).
  VarR log_probs(TapeR& tape, VarR encoded) const;
  MatrixR log_probs(std::span<const StackedState> states) const;

 private:
  StateEncoder enc_;
  std::vector<int> hidden_;
  mutable nn::Mlp<Real> net_;
};

struct SampledAction {
  JointAction action{};
  double log_prob = 0.0;
};

SampledAction sample_action(const Policy& p, const StackedState& s, std::mt19937_64& rng);
// Per-wheel argmax.
JointAction greedy_action(const Policy& p, const StackedState& s);
// ln pi(a|s) = sum of the four per-wheel terms, from one row of log_probs.
double joint_log_prob(const MatrixR& log_probs, Eigen::Index row, const JointAction& a);
double wheel_entropy(const MatrixR& log_probs, Eigen::Index row, int wheel);

// Q(s, u) over the flattened state and the 16-wide per-wheel one-hot action.
class Critic {
 public:
  Critic() = default;
  Critic(const std::string& name, int state_width, std::vector<int> hidden, std::uint64_t seed);

  VarR q(TapeR& tape, VarR encoded, const MatrixR& onehot) const;
  std::vector<nn::Parameter<Real>*> parameters();

 private:
  mutable nn::Mlp<Real> net_;
};

// Elementwise (1 - tau) * target + tau * source.
void soft_update(const std::vector<nn::Parameter<Real>*>& target, const std::vector<nn::Parameter<Real>*>& source,
                 double tau);

struct Transition {
  StackedState state;  // augmented
  JointAction action{};
  double reward = 0.0;
  StackedState next_state;  // augmented
  bool done = false;
};

// Fixed-capacity FIFO over transitions with uniform sampling. Frames are
// stored once per episode (float precision) and windows are rebuilt on read,
// so a transition costs one frame rather than a full window.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  // Opens an episode from its (augmented) initial window; returns its handle.
  long begin_episode(const StackedState& initial);
  void push(long episode, const JointAction& a, double reward, const Observation& next_frame, bool done);

  std::size_t size() const { return index_.size(); }
  std::size_t capacity() const { return capacity_; }
  Transition at(std::size_t i) const;
  std::vector<std::size_t> sample(std::size_t n, std::mt19937_64& rng) const;

 private:
  struct Episode {
    int h = 0;
    std::vector<float> frames;  // (h + steps) x 18, row per frame
    std::vector<JointAction> actions;
    std::vector<double> rewards;
    std::vector<bool> done;
    std::size_t live = 0;
  };
  struct Ref {
    long episode;
    int step;
  };
  StackedState window(const Episode& e, int first) const;

  std::size_t capacity_;
  long next_id_ = 0;
  std::map<long, Episode> episodes_;
  std::deque<Ref> index_;
};

struct SacConfig {
  double gamma = 0.99;
  double tau = 5e-3;
  double lr = 3e-4;
  int batch = 256;
  double alpha = 0.05;
  bool auto_alpha = false;
  double target_entropy = 0.5 * 4 * kMaxWheelEntropy;
  double aug_low_kmh = 0.0;
  double aug_high_kmh = 80.0;
  int epochs = 50;     // N
  int episodes = 20;   // E, run in lockstep
  int horizon = 400;   // H_max
  std::size_t buffer_capacity = 500000;
  int samples = 4;     // K draws for expectations over next actions
  bool exact = false;  // enumerate all 256 joint actions instead
  int updates_per_step = 1;  // critic + actor updates per model transition
  bool sample_model = true;  // draw model transitions instead of using the mean
  std::vector<int> hidden{256, 256};
  RewardConfig reward;
  sim::VehicleParams vehicle;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::ordered_json& j, const SacConfig& c);
void from_json(const nlohmann::ordered_json& j, SacConfig& c);

struct Batch {
  std::vector<StackedState> states;
  std::vector<StackedState> next_states;
  std::vector<JointAction> actions;
  std::vector<double> rewards;
  std::vector<double> done;
};

Batch gather(const ReplayBuffer& buffer, std::span<const std::size_t> idx);

// Twin critics, their targets, the policy and (optionally tuned) temperature.
class Sac {
 public:
  Sac(StateEncoder enc, const SacConfig& cfg);

  Policy& policy() { return policy_; }
  const Policy& policy() const { return policy_; }
  std::array<Critic, 2>& critics() { return q_; }
  std::array<Critic, 2>& targets() { return q_target_; }
  double alpha() const { return alpha_; }

  // y = r + gamma (1 - done) E_{a'~pi}[min_j Qbar_j(s', a') - alpha ln pi(a'|s')].
  std::vector<double> bellman_targets(const Batch& b, std::mt19937_64& rng) const;
  // One optimiser step per critic on 0.5 (Q - y)^2; returns the mean loss of
  // both critics. Targets are then moved toward the critics by tau.
  double critic_update(const Batch& b, std::span<const double> y);
  // One optimiser step on E_{a~pi}[min_j Q_j(s, a) - alpha ln pi(a|s)];
  // returns that objective.
  double actor_update(const Batch& b, std::mt19937_64& rng);
  // Exact objective by enumerating every joint action.
  double actor_objective_exact(const Batch& b) const;

  std::vector<nn::Parameter<Real>*> all_parameters();

 private:
  SacConfig cfg_;
  Policy policy_;
  std::array<Critic, 2> q_;
  std::array<Critic, 2> q_target_;
  nn::Adam<Real> policy_opt_;
  std::array<nn::Adam<Real>, 2> q_opt_;
  double alpha_;
  double log_alpha_;
  double alpha_m_ = 0.0, alpha_v_ = 0.0;
  long alpha_t_ = 0;
};

class PolicyTrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepCurve {
  long step = 0;
  double critic_loss = 0.0;  // NaN before the buffer holds one batch
  double actor_obj = 0.0;
  double r_speed = 0.0;  // mean over the episodes active at this step
  double r_yaw = 0.0;
  double r_slip = 0.0;
};

struct EpisodeRecord {
  int epoch = 0;
  int episode = 0;
  int steps = 0;
  double v_aug_kmh = 0.0;
  double ret = 0.0;
  double r_speed = 0.0;
  double r_yaw = 0.0;
  double r_slip = 0.0;
};

struct PolicyTraining {
  std::vector<StepCurve> curve;
  std::vector<EpisodeRecord> episodes;
};

// Model-based SAC: each epoch runs E imagined episodes in lockstep from
// post-onset windows of the dataset, storing speed-augmented transitions and
// interleaving critic and actor updates.
PolicyTraining train_policy(Sac& agent, const model::DynamicsModel& model, const data::Dataset& data,
                            const SacConfig& cfg, const std::function<void(int epoch)>& on_epoch = {});

void write_curve_csv(const std::vector<StepCurve>& curve, const std::filesystem::path& path);
void write_episode_csv(const std::vector<EpisodeRecord>& eps, const std::filesystem::path& path);

void save_policy(const Policy& p, const std::filesystem::path& path);
Policy load_policy(const std::filesystem::path& path);

}  // namespace brakelab::policy

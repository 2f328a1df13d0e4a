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
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "brakelab/data/dataset.hpp"
#include "brakelab/mdp/mdp.hpp"
#include "brakelab/nn/nn.hpp"
#include "json.hpp"

namespace brakelab::model {

using nn::Matrix;
// Network arithmetic runs in single precision; parameters are stored as
// float64 in checkpoints.
using Real = float;
using MatrixR = Matrix<Real>;
using MatrixD = Matrix<double>;

// d_{t+1} slot order: pressures, wheel speeds, attitude rates, accelerations,
// vehicle speed.
inline constexpr int kDynDim = 15;
const std::array<int, kDynDim>& dynamic_channels();
int dynamic_slot(int channel);  // -1 for operational channels

// Driver inputs spliced from data during roll-outs: f_brake, f_acc, delta.
inline constexpr std::array<int, 3> kOperationalChannels = {ch::kBrakeForce, ch::kAccelForce, ch::kSteer};
using Operational = std::array<double, 3>;
Operational operational_of(const Observation& o);

inline constexpr int kActionFeatures = 4 * kNumWheels;  // per-wheel one-hot

class ModelFault : public std::runtime_error {
 public:
  ModelFault(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// One sub-module: a recurrent layer over `window` channels of the stacked
// state, then fully connected layers that also see the joint action (when
// `action` is set) and next-step values of `parents` predicted by earlier
// modules. Outputs are predicted as one-step changes, except those listed
// in `levels`, which are predicted directly.
struct ModuleSpec {
  std::string name;
  std::vector<int> window;
  std::vector<int> parents;
  bool action = false;
  std::vector<int> outputs;
  std::vector<int> levels;

  bool operator==(const ModuleSpec&) const = default;
};

struct CausalGraph {
  std::vector<ModuleSpec> modules;

  // valve -> pressure -> wheel -> body -> speed
  static CausalGraph actuation_chain();
  void validate() const;
  bool operator==(const CausalGraph&) const = default;
};

void to_json(nlohmann::ordered_json& j, const ModuleSpec& m);
void from_json(const nlohmann::ordered_json& j, ModuleSpec& m);
void to_json(nlohmann::ordered_json& j, const CausalGraph& g);
void from_json(const nlohmann::ordered_json& j, CausalGraph& g);

// Per-channel statistics of observations and of one-step changes, fitted on
// the training split and then frozen.
struct Normalizer {
  std::array<double, ch::kCount> mean{};
  std::array<double, ch::kCount> std{};
  std::array<double, kDynDim> delta_mean{};
  std::array<double, kDynDim> delta_std{};

  static Normalizer identity();
  static Normalizer fit(const std::vector<data::Trajectory>& trajectories);
  bool operator==(const Normalizer&) const = default;
};

void to_json(nlohmann::ordered_json& j, const Normalizer& n);
void from_json(const nlohmann::ordered_json& j, Normalizer& n);

struct ModelConfig {
  int h = kDefaultStack;
  nn::NetworkSpec net{128, {128, 128}, nn::Activation::kRelu, 0.1};
  CausalGraph graph = CausalGraph::actuation_chain();

  void validate() const;
};

void to_json(nlohmann::ordered_json& j, const ModelConfig& c);
void from_json(const nlohmann::ordered_json& j, ModelConfig& c);

// Diagonal Gaussian over d_{t+1} in physical units, one row per query.
struct DynPrediction {
  MatrixD mean;  // B x kDynDim
  MatrixD std;   // B x kDynDim
};

class DynamicsModel {
 public:
  DynamicsModel() = default;
  DynamicsModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const Normalizer& normalizer() const { return norm_; }
  void set_normalizer(const Normalizer& n) { norm_ = n; }
  std::vector<nn::Parameter<Real>*> parameters();
  std::size_t parameter_count() const;

  DynPrediction predict(std::span<const StackedState> states, std::span<const JointAction> actions) const;
  DynPrediction predict(const StackedState& state, JointAction action) const;

  // Mean NLL per transition of `next` given (state, action), normalised units.
  double nll(std::span<const StackedState> states, std::span<const JointAction> actions,
             std::span<const Observation> next) const;

  // Advances each state one step in place: the model's d_{t+1} (mean, or a
  // draw when `rng` is given) joined with the spliced operational inputs.
  // Returns the appended frames.
  std::vector<Observation> advance(std::span<StackedState> states, std::span<const JointAction> actions,
                                   std::span<const Operational> operational, std::mt19937_64* rng) const;

  // ---- differentiable pieces used by training ----
  struct StepResult {
    nn::Var<Real> nll;   // B x 1, set when truth was given
    nn::Var<Real> next;  // B x 18 normalised continuation frame
    MatrixD mean_dyn;      // B x kDynDim physical, free-running chain
    MatrixD std_dyn;
    std::vector<MatrixR> teacher_mean;  // per module, normalised, when truth was given
    bool has_nll = false;
    bool has_next = false;
  };
  // `seq` is the normalised window. With `truth`, modules are conditioned on
  // true parents and scored; with `continue_chain`, a free-running next frame
  // is also produced (mean, or reparameterised draw when `noise_rng` is set).
  StepResult step(nn::Tape<Real>& tape, nn::Var<Real> seq, nn::Var<Real> latest, const MatrixR& onehot,
                  const MatrixR* truth,
                  const MatrixR& op_next, bool continue_chain, bool training, std::mt19937_64* dropout_rng,
                  std::mt19937_64* noise_rng) const;

  MatrixR normalise_states(std::span<const StackedState> states) const;  // (h*B) x 18
  MatrixR normalise_frames(std::span<const Observation> frames) const;   // B x 18
  Observation denormalise(const MatrixR& row_block, Eigen::Index row) const;
  static MatrixR action_features(std::span<const JointAction> actions);

 private:
  struct Module {
    nn::GruLayer<Real> gru;
    nn::Mlp<Real> mlp;
  };
  ModelConfig cfg_;
  Normalizer norm_ = Normalizer::identity();
  mutable std::vector<Module> modules_;
};

void save_model(const DynamicsModel& m, const std::filesystem::path& dir);
DynamicsModel load_model(const std::filesystem::path& dir);

struct RolloutConfig {
  int max_steps = 500;
  bool sample = false;
  bool stop_at_termination = true;

  void validate() const;
};

struct RolloutResult {
  std::vector<Observation> frames;  // frames[0] is the latest frame of the initial state
  StackedState final_state;
};

// Feeds model predictions (plus spliced operational inputs) back through the
// stacked state, one action at a time.
RolloutResult rollout(const DynamicsModel& model, const StackedState& init, std::span<const JointAction> actions,
                      std::span<const Operational> operational, const RolloutConfig& cfg,
                      std::mt19937_64* rng = nullptr);

struct TrainConfig {
  int epochs = 1000;
  double lr = 1e-4;
  int batch = 128;
  int rollout_length = 500;  // m
  int tbptt = 25;
  int rollout_batch = 16;
  int rollout_updates = 4;  // multi-step updates per epoch
  double grad_clip = 10.0;  // global norm, 0 disables
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::ordered_json& j, const TrainConfig& c);
void from_json(const nlohmann::ordered_json& j, TrainConfig& c);

struct LossRecord {
  int epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int epoch) : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

using EpochCallback = std::function<void(const LossRecord&)>;

// Fits the normaliser on `data.train`, then maximises the single-step plus
// roll-out likelihood. Validation NLL is the single-step NLL on `data.val`.
std::vector<LossRecord> train_model(DynamicsModel& model, const data::Dataset& data, const TrainConfig& cfg,
                                    const EpochCallback& on_epoch = {});

// Single-step NLL averaged over every transition of the trajectories.
double dataset_nll(const DynamicsModel& model, const std::vector<data::Trajectory>& trajectories);

void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path);

// Mean roll-out of a recorded trajectory from its first full stacked state
// (records 0..h-1) to its last record, driven by the recorded actions.
struct ReplayError {
  double speed_mae_kmh = 0.0;
  double wheel_mae_kmh = 0.0;
  std::size_t start = 0;               // record index of predicted[0]
  std::vector<Observation> predicted;  // predicted[k] aligns with record start + k
};
ReplayError replay(const DynamicsModel& model, const data::Trajectory& traj);

}  // namespace brakelab::model

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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "brakelab/model/dynamics.hpp"

namespace brakelab::model {
namespace {

namespace fs = std::filesystem;

ModelConfig tiny_config(int h = 5) {
  ModelConfig c;
  c.h = h;
  c.net = {8, {16}, nn::Activation::kTanh, 0.0};
  return c;
}

StackedState random_state(int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 40.0);
  StackedState s(h);
  for (int c = 0; c < ch::kCount; ++c) {
    for (int k = 0; k < h; ++k) s.at(c, k) = u(rng);
  }
  return s;
}

JointAction random_action(std::mt19937_64& rng) { return decode(static_cast<int>(rng() % kNumActions)); }

// Synthetic braking runs with v_{t+1} = 0.99 v_t and wheels tracking v.
std::vector<data::Trajectory> linear_runs(int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> v0(30.0, 90.0);
  std::vector<data::Trajectory> out;
  for (int i = 0; i < count; ++i) {
    data::Trajectory t;
    t.policy = "random";
    t.surface = "toy";
    t.run = i;
    double v = v0(rng);
    for (int k = 0; k < 60; ++k) {
      data::Record r;
      r.t = 0.02 * k;
      r.obs[ch::kV] = v;
      for (int w = 0; w < kNumWheels; ++w) r.obs[ch::kWheel + w] = v;
      r.act = random_action(rng);
      t.records.push_back(r);
      v *= 0.99;
    }
    out.push_back(std::move(t));
  }
  return out;
}

TEST(CausalGraph, ActuationChainIsValid) {
  const auto g = CausalGraph::actuation_chain();
  EXPECT_NO_THROW(g.validate());
  ASSERT_EQ(g.modules.size(), 4u);
  EXPECT_EQ(g.modules[0].outputs.size(), 4u);
  EXPECT_EQ(g.modules[1].outputs.size(), 4u);
  EXPECT_EQ(g.modules[2].outputs.size(), 6u);
  EXPECT_EQ(g.modules[3].outputs.size(), 1u);
}

TEST(CausalGraph, RejectsReadBeforeWrite) {
  auto g = CausalGraph::actuation_chain();
  std::swap(g.modules[0], g.modules[1]);
  EXPECT_THROW(g.validate(), std::invalid_argument);
}

TEST(CausalGraph, RejectsDuplicateOrMissingOutputs) {
  auto g = CausalGraph::actuation_chain();
  g.modules[3].outputs.push_back(ch::kWheel);
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g = CausalGraph::actuation_chain();
  g.modules.pop_back();
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g = CausalGraph::actuation_chain();
  g.modules[0].levels.push_back(ch::kV);
  EXPECT_THROW(g.validate(), std::invalid_argument);
}

TEST(CausalGraph, JsonRoundTrip) {
  const auto g = CausalGraph::actuation_chain();
  nlohmann::ordered_json j = g;
  EXPECT_EQ(j.get<CausalGraph>(), g);
}

TEST(Predict, FreshModelIsFiniteWithClampedSpread) {
  DynamicsModel m(tiny_config(), 3);
  std::mt19937_64 rng(4);
  std::vector<StackedState> states;
  std::vector<JointAction> acts;
  for (int i = 0; i < 8; ++i) {
    states.push_back(random_state(5, rng));
    acts.push_back(random_action(rng));
  }
  const auto p = m.predict(states, acts);
  ASSERT_EQ(p.mean.rows(), 8);
  ASSERT_EQ(p.mean.cols(), kDynDim);
  EXPECT_TRUE(p.mean.allFinite());
  // Identity normaliser: spread is exp(clamped log-std).
  EXPECT_TRUE((p.std.array() >= std::exp(nn::kLogStdMin) - 1e-12).all());
  EXPECT_TRUE((p.std.array() <= std::exp(nn::kLogStdMax) + 1e-12).all());
}

// Each module, scored against fixed true parents, ignores every channel it
// does not declare.
TEST(Predict, ModulesIgnoreUndeclaredInputs) {
  const auto cfg = tiny_config();
  DynamicsModel m(cfg, 5);
  std::mt19937_64 rng(6);
  const StackedState s = random_state(5, rng);
  const JointAction a = random_action(rng);
  Observation next{};
  for (auto& x : next) x = 10.0;

  auto teacher = [&](const StackedState& st, JointAction act, const Observation& nx) {
    nn::Tape<Real> tape(false);
    const MatrixR seq = m.normalise_states(std::span(&st, 1));
    const MatrixR truth = m.normalise_frames(std::span(&nx, 1));
    auto r = m.step(tape, tape.constant(seq), tape.constant(seq.bottomRows(1)), DynamicsModel::action_features(std::span(&act, 1)),
                    &truth, truth, false, false, nullptr, nullptr);
    return r.teacher_mean;  // per module
  };
  const auto ref = teacher(s, a, next);
  for (std::size_t mi = 0; mi < cfg.graph.modules.size(); ++mi) {
    const auto& spec = cfg.graph.modules[mi];
    auto declared = [&](const std::vector<int>& v, int c) { return std::find(v.begin(), v.end(), c) != v.end(); };
    for (int c = 0; c < ch::kCount; ++c) {
      // The residual base (latest own value) is an input by construction.
      const bool own = declared(spec.outputs, c) && !declared(spec.levels, c);
      StackedState s2 = s;
      for (int k = 0; k < 5; ++k) s2.at(c, k) += 7.5;
      const bool window_input = declared(spec.window, c) || own;
      const double dw = (teacher(s2, a, next)[mi] - ref[mi]).cwiseAbs().maxCoeff();
      if (window_input) {
        EXPECT_GT(dw, 0.0) << spec.name << " window " << channel_name(c);
      } else {
        EXPECT_EQ(dw, 0.0) << spec.name << " window " << channel_name(c);
      }
      Observation n2 = next;
      n2[c] += 7.5;
      const double dp = (teacher(s, a, n2)[mi] - ref[mi]).cwiseAbs().maxCoeff();
      if (declared(spec.parents, c)) {
        EXPECT_GT(dp, 0.0) << spec.name << " parent " << channel_name(c);
      } else {
        EXPECT_EQ(dp, 0.0) << spec.name << " parent " << channel_name(c);
      }
    }
    JointAction a2 = a;
    a2[0] = a[0] == WheelAction::kHold ? WheelAction::kDecrease : WheelAction::kHold;
    const double da = (teacher(s, a2, next)[mi] - ref[mi]).cwiseAbs().maxCoeff();
    if (spec.action) {
      EXPECT_GT(da, 0.0) << spec.name;
    } else {
      EXPECT_EQ(da, 0.0) << spec.name;
    }
  }
}

TEST(Predict, LevelOutputsIgnoreTheirOwnHistory) {
  ModelConfig cfg = tiny_config();
  cfg.graph.modules[2].levels = {ch::kAccel, ch::kAccel + 1, ch::kAccel + 2};
  for (int c : cfg.graph.modules[2].levels) std::erase(cfg.graph.modules[2].window, c);
  std::erase(cfg.graph.modules[1].window, ch::kAccel);
  std::erase(cfg.graph.modules[1].window, ch::kAccel + 1);
  std::erase(cfg.graph.modules[1].window, ch::kAccel + 2);
  cfg.graph.modules[3].window = {ch::kV};
  DynamicsModel m(cfg, 9);
  std::mt19937_64 rng(10);
  const StackedState s = random_state(5, rng);
  StackedState s2 = s;
  for (int k = 0; k < 5; ++k) s2.at(ch::kAccel, k) += 3.0;
  const auto a = m.predict(s, kAllNoControl);
  const auto b = m.predict(s2, kAllNoControl);
  EXPECT_EQ(a.mean, b.mean);
}

TEST(Predict, AdvanceMatchesPredictAndSplicesOperationalInputs) {
  DynamicsModel m(tiny_config(), 7);
  std::mt19937_64 rng(8);
  std::vector<StackedState> states;
  std::vector<JointAction> acts;
  std::vector<Operational> ops;
  for (int i = 0; i < 4; ++i) {
    states.push_back(random_state(5, rng));
    for (int c = 0; c < ch::kCount; ++c) {
      for (int k = 0; k < 5; ++k) states.back().at(c, k) += 200.0;  // keep clamps inactive
    }
    acts.push_back(random_action(rng));
    ops.push_back({500.0, 0.0, 0.25 * i});
  }
  const auto pred = m.predict(states, acts);
  auto before = states;
  const auto frames = m.advance(states, acts, ops, nullptr);
  for (int b = 0; b < 4; ++b) {
    for (int slot = 0; slot < kDynDim; ++slot) {
      EXPECT_DOUBLE_EQ(frames[b][dynamic_channels()[slot]], pred.mean(b, slot));
    }
    EXPECT_EQ(frames[b][ch::kBrakeForce], 500.0);
    EXPECT_EQ(frames[b][ch::kAccelForce], 0.0);
    EXPECT_DOUBLE_EQ(frames[b][ch::kSteer], 0.25 * b);
    before[b].push(frames[b]);
    EXPECT_EQ(states[b], before[b]);
  }
}

TEST(Rollout, ZeroLengthReturnsInitialState) {
  DynamicsModel m(tiny_config(), 1);
  std::mt19937_64 rng(2);
  const StackedState s = random_state(5, rng);
  const auto r = rollout(m, s, {}, {}, RolloutConfig{});
  ASSERT_EQ(r.frames.size(), 1u);
  EXPECT_EQ(r.frames[0], s.latest());
  EXPECT_EQ(r.final_state, s);
}

TEST(Rollout, FinalWindowHoldsLastFrames) {
  DynamicsModel m(tiny_config(), 1);
  std::mt19937_64 rng(2);
  const StackedState s = random_state(5, rng);
  std::vector<JointAction> acts;
  std::vector<Operational> ops;
  for (int k = 0; k < 8; ++k) {
    acts.push_back(random_action(rng));
    ops.push_back({500.0, 0.0, 0.0});
  }
  RolloutConfig cfg;
  cfg.stop_at_termination = false;
  const auto r = rollout(m, s, acts, ops, cfg);
  ASSERT_EQ(r.frames.size(), 9u);
  std::vector<Observation> history;
  for (int k = 0; k < 5; ++k) history.push_back(s.frame(k));
  history.insert(history.end(), r.frames.begin() + 1, r.frames.end());
  EXPECT_EQ(r.final_state, stack(history, 5));
}

TEST(Rollout, RejectsShortOperationalSequence) {
  DynamicsModel m(tiny_config(), 1);
  std::mt19937_64 rng(2);
  std::vector<JointAction> acts(3, kAllNoControl);
  std::vector<Operational> ops(2);
  EXPECT_THROW(rollout(m, random_state(5, rng), acts, ops, RolloutConfig{}), std::invalid_argument);
}

TEST(Training, SingleStepObjectiveIsMeanTransitionNll) {
  DynamicsModel m(tiny_config(), 11);
  const auto runs = linear_runs(2, 12);
  m.set_normalizer(Normalizer::fit(runs));
  double total = 0.0;
  int n = 0;
  for (const auto& t : runs) {
    std::vector<Observation> seen;
    for (std::size_t k = 0; k + 1 < t.records.size(); ++k) {
      seen.push_back(t.records[k].obs);
      const StackedState s = stack(seen, 5);
      total += m.nll(std::span(&s, 1), std::span(&t.records[k].act, 1), std::span(&t.records[k + 1].obs, 1));
      ++n;
    }
  }
  EXPECT_NEAR(dataset_nll(m, runs), total / n, 1e-4 * std::abs(total / n));
}

TEST(Training, LinearSystemIsRecovered) {
  DynamicsModel m(tiny_config(), 21);
  data::Dataset d;
  d.train = linear_runs(12, 22);
  d.val = linear_runs(3, 23);
  TrainConfig tc;
  tc.epochs = 200;
  tc.lr = 3e-3;
  tc.batch = 64;
  tc.rollout_length = 1;
  tc.seed = 24;
  const auto hist = train_model(m, d, tc);
  ASSERT_EQ(hist.size(), 200u);
  EXPECT_LT(hist.back().val_nll, hist.front().val_nll);
  double se = 0.0;
  int n = 0;
  for (const auto& t : d.val) {
    std::vector<Observation> seen;
    for (std::size_t k = 0; k + 1 < t.records.size(); ++k) {
      seen.push_back(t.records[k].obs);
      const auto p = m.predict(stack(seen, 5), t.records[k].act);
      const double e = p.mean(0, dynamic_slot(ch::kV)) - t.records[k + 1].obs[ch::kV];
      se += e * e;
      ++n;
    }
  }
  EXPECT_LE(std::sqrt(se / n), 0.5);
}

TEST(Training, RolloutTermTrainsAndIsDeterministic) {
  data::Dataset d;
  d.train = linear_runs(4, 31);
  d.val = linear_runs(1, 32);
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr = 1e-3;
  tc.batch = 32;
  tc.rollout_length = 30;
  tc.tbptt = 7;
  tc.rollout_batch = 4;
  tc.rollout_updates = 2;
  tc.seed = 5;
  DynamicsModel a(tiny_config(), 1), b(tiny_config(), 1);
  const auto ha = train_model(a, d, tc);
  const auto hb = train_model(b, d, tc);
  ASSERT_EQ(ha.size(), 3u);
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(ha[i].train_nll, hb[i].train_nll);
    EXPECT_EQ(ha[i].val_nll, hb[i].val_nll);
  }
}

TEST(Training, NonFiniteDataAbortsWithEpoch) {
  data::Dataset d;
  d.train = linear_runs(2, 41);
  d.train[0].records[10].obs[ch::kV] = std::nan("");
  DynamicsModel m(tiny_config(), 1);
  TrainConfig tc;
  tc.epochs = 2;
  tc.rollout_length = 1;
  try {
    train_model(m, d, tc);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.epoch(), 1);
  }
}

TEST(Training, ZeroEpochsOnlyFitsNormaliser) {
  data::Dataset d;
  d.train = linear_runs(2, 51);
  DynamicsModel m(tiny_config(), 1);
  TrainConfig tc;
  tc.epochs = 0;
  EXPECT_TRUE(train_model(m, d, tc).empty());
  EXPECT_EQ(m.normalizer(), Normalizer::fit(d.train));
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  const auto dir = fs::temp_directory_path() / "brakelab_model_ckpt";
  fs::remove_all(dir);
  DynamicsModel m(tiny_config(), 61);
  m.set_normalizer(Normalizer::fit(linear_runs(2, 62)));
  save_model(m, dir);
  EXPECT_TRUE(fs::exists(dir / "causal_graph.json"));
  const DynamicsModel back = load_model(dir);
  EXPECT_EQ(back.normalizer(), m.normalizer());
  EXPECT_EQ(back.config().graph, m.config().graph);
  std::mt19937_64 rng(63);
  const StackedState s = random_state(5, rng);
  const auto a = m.predict(s, kAllNoControl);
  const auto b = back.predict(s, kAllNoControl);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.std, b.std);
  fs::remove_all(dir);
}

TEST(Checkpoint, LossCsvHeader) {
  const auto path = fs::temp_directory_path() / "brakelab_loss.csv";
  write_loss_csv({{1, 2.5, 3.0}, {2, 1.5, 2.0}}, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,train_nll,val_nll");
  std::getline(in, line);
  EXPECT_EQ(line, "1,2.5,3");
  fs::remove(path);
}

}  // namespace
}  // namespace brakelab::model

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

#include "brakelab/model/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace brakelab::model {

using nn::Tape;
using nn::Var;
using VarR = nn::Var<Real>;
using ojson = nlohmann::ordered_json;

const std::array<int, kDynDim>& dynamic_channels() {
  static const std::array<int, kDynDim> kChannels = {
      ch::kPressure + 0, ch::kPressure + 1, ch::kPressure + 2, ch::kPressure + 3,
      ch::kWheel + 0,    ch::kWheel + 1,    ch::kWheel + 2,    ch::kWheel + 3,
      ch::kRate + 0,     ch::kRate + 1,     ch::kRate + 2,
      ch::kAccel + 0,    ch::kAccel + 1,    ch::kAccel + 2,
      ch::kV};
  return kChannels;
}

int dynamic_slot(int channel) {
  const auto& d = dynamic_channels();
  for (int i = 0; i < kDynDim; ++i) {
    if (d[i] == channel) return i;
  }
  return -1;
}

Operational operational_of(const Observation& o) {
  return {o[ch::kBrakeForce], o[ch::kAccelForce], o[ch::kSteer]};
}

// ---------------------------------------------------------------- graph

CausalGraph CausalGraph::actuation_chain() {
  constexpr int p0 = ch::kPressure, w0 = ch::kWheel, a0 = ch::kAccel, r0 = ch::kRate;
  const std::vector<int> p{p0, p0 + 1, p0 + 2, p0 + 3};
  const std::vector<int> w{w0, w0 + 1, w0 + 2, w0 + 3};
  const std::vector<int> a{a0, a0 + 1, a0 + 2};
  const std::vector<int> r{r0, r0 + 1, r0 + 2};
  auto cat = [](std::initializer_list<std::vector<int>> parts) {
    std::vector<int> out;
    for (const auto& v : parts) out.insert(out.end(), v.begin(), v.end());
    return out;
  };
  CausalGraph g;
  g.modules.push_back({"pressure", cat({p, {ch::kBrakeForce}}), {}, true, p, {}});
  g.modules.push_back({"wheel", cat({w, {ch::kV}, p, a}), p, false, w, {}});
  g.modules.push_back({"body", cat({w, {ch::kV}, {ch::kSteer}, r, a}), w, false, cat({r, a}), {}});
  g.modules.push_back({"speed", cat({{ch::kV}, a}), a, false, {ch::kV}, {}});
  return g;
}

void CausalGraph::validate() const {
  if (modules.empty()) throw std::invalid_argument("causal graph: no modules");
  std::set<int> produced;
  std::set<std::string> names;
  for (const auto& m : modules) {
    if (m.name.empty() || !names.insert(m.name).second) {
      throw std::invalid_argument("causal graph: module names must be unique and non-empty");
    }
    if (m.window.empty()) throw std::invalid_argument("causal graph: module " + m.name + " has an empty window");
    for (int c : m.window) {
      if (c < 0 || c >= ch::kCount) throw std::invalid_argument("causal graph: bad window channel in " + m.name);
    }
    for (int c : m.parents) {
      if (!produced.count(c)) {
        throw std::invalid_argument("causal graph: " + m.name + " reads channel " + std::string(channel_name(c)) +
                                    " before any module predicts it");
      }
    }
    if (m.outputs.empty()) throw std::invalid_argument("causal graph: module " + m.name + " predicts nothing");
    for (int c : m.levels) {
      if (std::find(m.outputs.begin(), m.outputs.end(), c) == m.outputs.end()) {
        throw std::invalid_argument("causal graph: " + m.name + " lists a level channel it does not predict");
      }
    }
    for (int c : m.outputs) {
      if (dynamic_slot(c) < 0) throw std::invalid_argument("causal graph: " + m.name + " predicts a non-dynamic channel");
      if (!produced.insert(c).second) {
        throw std::invalid_argument("causal graph: channel " + std::string(channel_name(c)) + " predicted twice");
      }
    }
  }
  if (produced.size() != static_cast<std::size_t>(kDynDim)) {
    throw std::invalid_argument("causal graph: every dynamic channel needs exactly one module");
  }
}

void to_json(ojson& j, const ModuleSpec& m) {
  j = ojson{{"name", m.name}, {"window", m.window}, {"parents", m.parents}, {"action", m.action},
            {"outputs", m.outputs}, {"levels", m.levels}};
}

void from_json(const ojson& j, ModuleSpec& m) {
  j.at("name").get_to(m.name);
  j.at("window").get_to(m.window);
  j.at("parents").get_to(m.parents);
  j.at("action").get_to(m.action);
  j.at("outputs").get_to(m.outputs);
  j.at("levels").get_to(m.levels);
}

void to_json(ojson& j, const CausalGraph& g) { j = ojson{{"modules", g.modules}}; }
void from_json(const ojson& j, CausalGraph& g) { j.at("modules").get_to(g.modules); }

// ---------------------------------------------------------------- normaliser

Normalizer Normalizer::identity() {
  Normalizer n;
  n.std.fill(1.0);
  n.delta_std.fill(1.0);
  return n;
}

namespace {

double safe_std(double sum, double sum_sq, double count) {
  const double mean = sum / count;
  const double var = std::max(0.0, sum_sq / count - mean * mean);
  const double sd = std::sqrt(var);
  return sd > 1e-9 ? sd : 1.0;
}

}  // namespace

Normalizer Normalizer::fit(const std::vector<data::Trajectory>& trajectories) {
  std::array<double, ch::kCount> s{}, ss{};
  std::array<double, kDynDim> ds{}, dss{};
  double n = 0, nd = 0;
  const auto& dyn = dynamic_channels();
  for (const auto& t : trajectories) {
    for (std::size_t k = 0; k < t.records.size(); ++k) {
      const auto& o = t.records[k].obs;
      for (int c = 0; c < ch::kCount; ++c) {
        s[c] += o[c];
        ss[c] += o[c] * o[c];
      }
      n += 1;
      if (k + 1 < t.records.size()) {
        const auto& o2 = t.records[k + 1].obs;
        for (int i = 0; i < kDynDim; ++i) {
          const double d = o2[dyn[i]] - o[dyn[i]];
          ds[i] += d;
          dss[i] += d * d;
        }
        nd += 1;
      }
    }
  }
  if (n == 0 || nd == 0) throw std::invalid_argument("Normalizer::fit: need at least one transition");
  Normalizer out;
  for (int c = 0; c < ch::kCount; ++c) {
    out.mean[c] = s[c] / n;
    out.std[c] = safe_std(s[c], ss[c], n);
  }
  for (int i = 0; i < kDynDim; ++i) {
    out.delta_mean[i] = ds[i] / nd;
    out.delta_std[i] = safe_std(ds[i], dss[i], nd);
  }
  return out;
}

void to_json(ojson& j, const Normalizer& n) {
  j = ojson{{"mean", n.mean}, {"std", n.std}, {"delta_mean", n.delta_mean}, {"delta_std", n.delta_std}};
}

void from_json(const ojson& j, Normalizer& n) {
  j.at("mean").get_to(n.mean);
  j.at("std").get_to(n.std);
  j.at("delta_mean").get_to(n.delta_mean);
  j.at("delta_std").get_to(n.delta_std);
}

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (h < 1) throw std::invalid_argument("model: stack length must be >= 1");
  net.validate();
  if (net.gru_width <= 0) throw std::invalid_argument("model: sub-modules need a recurrent layer");
  graph.validate();
}

void to_json(ojson& j, const ModelConfig& c) {
  j = ojson{{"h", c.h},
            {"gru_width", c.net.gru_width},
            {"fc_widths", c.net.fc_widths},
            {"activation", c.net.activation == nn::Activation::kRelu ? "relu" : "tanh"},
            {"dropout", c.net.dropout},
            {"graph", c.graph}};
}

void from_json(const ojson& j, ModelConfig& c) {
  j.at("h").get_to(c.h);
  j.at("gru_width").get_to(c.net.gru_width);
  j.at("fc_widths").get_to(c.net.fc_widths);
  const auto act = j.at("activation").get<std::string>();
  if (act != "relu" && act != "tanh") throw std::invalid_argument("model: unknown activation " + act);
  c.net.activation = act == "relu" ? nn::Activation::kRelu : nn::Activation::kTanh;
  j.at("dropout").get_to(c.net.dropout);
  j.at("graph").get_to(c.graph);
}

void to_json(ojson& j, const TrainConfig& c) {
  j = ojson{{"epochs", c.epochs},
            {"lr", c.lr},
            {"batch", c.batch},
            {"rollout_length", c.rollout_length},
            {"tbptt", c.tbptt},
            {"rollout_batch", c.rollout_batch},
            {"rollout_updates", c.rollout_updates},
            {"grad_clip", c.grad_clip},
            {"seed", c.seed}};
}

void from_json(const ojson& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.batch = j.value("batch", d.batch);
  c.rollout_length = j.value("rollout_length", d.rollout_length);
  c.tbptt = j.value("tbptt", d.tbptt);
  c.rollout_batch = j.value("rollout_batch", d.rollout_batch);
  c.rollout_updates = j.value("rollout_updates", d.rollout_updates);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------- model

DynamicsModel::DynamicsModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  for (const auto& spec : cfg_.graph.modules) {
    Module m;
    m.gru = nn::GruLayer<Real>(spec.name + ".gru", static_cast<int>(spec.window.size()), cfg_.net.gru_width);
    const int fc_in = cfg_.net.gru_width + (spec.action ? kActionFeatures : 0) + static_cast<int>(spec.parents.size());
    m.mlp = nn::Mlp<Real>(spec.name, fc_in, cfg_.net.fc_widths, 2 * static_cast<int>(spec.outputs.size()),
                            cfg_.net.activation, cfg_.net.dropout);
    m.gru.init(rng);
    m.mlp.init(rng);
    modules_.push_back(std::move(m));
  }
}

std::vector<nn::Parameter<Real>*> DynamicsModel::parameters() {
  std::vector<nn::Parameter<Real>*> out;
  for (auto& m : modules_) {
    m.gru.collect(out);
    m.mlp.collect(out);
  }
  return out;
}

std::size_t DynamicsModel::parameter_count() const {
  std::size_t n = 0;
  for (auto* p : const_cast<DynamicsModel*>(this)->parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

MatrixR DynamicsModel::normalise_states(std::span<const StackedState> states) const {
  const auto B = static_cast<Eigen::Index>(states.size());
  const int h = cfg_.h;
  MatrixR out(h * B, ch::kCount);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& s = states[static_cast<std::size_t>(b)];
    if (s.h() != h) throw std::invalid_argument("model: state window length differs from the model's");
    for (int k = 0; k < h; ++k) {
      for (int c = 0; c < ch::kCount; ++c) out(k * B + b, c) = (s.at(c, k) - norm_.mean[c]) / norm_.std[c];
    }
  }
  return out;
}

MatrixR DynamicsModel::normalise_frames(std::span<const Observation> frames) const {
  MatrixR out(static_cast<Eigen::Index>(frames.size()), ch::kCount);
  for (std::size_t b = 0; b < frames.size(); ++b) {
    for (int c = 0; c < ch::kCount; ++c) {
      out(static_cast<Eigen::Index>(b), c) = (frames[b][c] - norm_.mean[c]) / norm_.std[c];
    }
  }
  return out;
}

Observation DynamicsModel::denormalise(const MatrixR& rows, Eigen::Index row) const {
  Observation o{};
  for (int c = 0; c < ch::kCount; ++c) o[c] = rows(row, c) * norm_.std[c] + norm_.mean[c];
  return o;
}

MatrixR DynamicsModel::action_features(std::span<const JointAction> actions) {
  MatrixR out = MatrixR::Zero(static_cast<Eigen::Index>(actions.size()), kActionFeatures);
  for (std::size_t b = 0; b < actions.size(); ++b) {
    for (int w = 0; w < kNumWheels; ++w) {
      out(static_cast<Eigen::Index>(b), 4 * w + static_cast<int>(actions[b][w])) = 1.0;
    }
  }
  return out;
}

namespace {

bool is_level(const ModuleSpec& m, int channel) {
  return std::find(m.levels.begin(), m.levels.end(), channel) != m.levels.end();
}

}  // namespace

DynamicsModel::StepResult DynamicsModel::step(Tape<Real>& tape, VarR seq, VarR latest,
                                              const MatrixR& onehot, const MatrixR* truth, const MatrixR& op_next,
                                              bool continue_chain, bool training, std::mt19937_64* dropout_rng,
                                              std::mt19937_64* noise_rng) const {
  const Eigen::Index B = onehot.rows();
  if (seq.rows() != cfg_.h * B || latest.rows() != B) throw nn::ShapeError("model step: batch sizes disagree");
  const bool drop = training && dropout_rng != nullptr;

  StepResult res;
  res.has_nll = truth != nullptr;
  res.has_next = continue_chain;
  if (continue_chain) {
    res.mean_dyn.resize(B, kDynDim);
    res.std_dyn.resize(B, kDynDim);
  }
  VarR truth_var;
  if (truth) truth_var = tape.constant(*truth);

  // Free-running next values: channel -> (piece, column).
  std::array<std::pair<VarR, Eigen::Index>, ch::kCount> predicted{};
  std::vector<VarR> pieces;
  std::vector<int> piece_channels;
  std::vector<VarR> nll_parts;

  for (std::size_t mi = 0; mi < modules_.size(); ++mi) {
    const auto& spec = cfg_.graph.modules[mi];
    auto& mod = modules_[mi];
    const auto k = static_cast<Eigen::Index>(spec.outputs.size());

    std::vector<Eigen::Index> win(spec.window.begin(), spec.window.end());
    std::vector<Eigen::Index> outs(spec.outputs.begin(), spec.outputs.end());
    VarR hidden = mod.gru.run(tape, nn::gather_cols(seq, win), cfg_.h);
    // next_norm = base + shift + gain * z, where z is the head's normalised
    // change; level outputs have no base and z is the normalised value.
    MatrixR keep = MatrixR::Ones(B, k), shift(B, k), gain(B, k), log_gain(B, k);
    for (Eigen::Index j = 0; j < k; ++j) {
      const int c = spec.outputs[static_cast<std::size_t>(j)];
      const int slot = dynamic_slot(c);
      if (is_level(spec, c)) {
        keep.col(j).setZero();
        shift.col(j).setZero();
        gain.col(j).setOnes();
        log_gain.col(j).setZero();
      } else {
        shift.col(j).setConstant(norm_.delta_mean[slot] / norm_.std[c]);
        gain.col(j).setConstant(norm_.delta_std[slot] / norm_.std[c]);
        log_gain.col(j).setConstant(std::log(norm_.delta_std[slot] / norm_.std[c]));
      }
    }
    VarR base = nn::mul_const(nn::gather_cols(latest, outs), keep);
    auto to_next = [&](VarR z) { return nn::add(base, nn::add(tape.constant(shift), nn::mul_const(z, gain))); };

    auto head_for = [&](VarR parents) {
      std::vector<VarR> feat{hidden};
      if (spec.action) feat.push_back(tape.constant(onehot));
      if (!spec.parents.empty()) feat.push_back(parents);
      VarR x = feat.size() == 1 ? hidden : nn::concat_cols(feat);
      return nn::gaussian_head(mod.mlp.forward(tape, x, drop ? dropout_rng : nullptr, drop));
    };

    std::optional<nn::GaussianHead<Real>> teacher;
    if (truth) {
      std::vector<Eigen::Index> par(spec.parents.begin(), spec.parents.end());
      VarR parents = spec.parents.empty() ? VarR{} : nn::gather_cols(truth_var, par);
      teacher = head_for(parents);
      VarR mean_next = to_next(teacher->mean);
      VarR log_std = nn::add(teacher->log_std, tape.constant(log_gain));
      res.teacher_mean.push_back(mean_next.value());
      MatrixR target(B, k);
      for (Eigen::Index j = 0; j < k; ++j) target.col(j) = truth->col(spec.outputs[static_cast<std::size_t>(j)]);
      nll_parts.push_back(nn::gaussian_nll(mean_next, log_std, target));
    }

    if (continue_chain) {
      nn::GaussianHead<Real> head;
      if (teacher && spec.parents.empty()) {
        head = *teacher;
      } else {
        VarR parents;
        if (!spec.parents.empty()) {
          std::vector<VarR> cols;
          for (int c : spec.parents) cols.push_back(nn::slice_cols(predicted[c].first, predicted[c].second, 1));
          parents = cols.size() == 1 ? cols.front() : nn::concat_cols(cols);
        }
        head = head_for(parents);
      }
      VarR z = head.mean;
      if (noise_rng) {
        std::normal_distribution<double> normal(0.0, 1.0);
        MatrixR eps(B, k);
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(*noise_rng);
        z = nn::add(z, nn::mul(nn::exp(head.log_std), tape.constant(std::move(eps))));
      }
      VarR next = to_next(z);
      const MatrixR mean_next = to_next(head.mean).value();
      for (Eigen::Index j = 0; j < k; ++j) {
        const int c = spec.outputs[static_cast<std::size_t>(j)];
        const int slot = dynamic_slot(c);
        predicted[c] = {next, j};
        res.mean_dyn.col(slot) = mean_next.col(j).cast<double>().array() * norm_.std[c] + norm_.mean[c];
        const double unit = is_level(spec, c) ? norm_.std[c] : norm_.delta_std[slot];
        res.std_dyn.col(slot) = head.log_std.value().col(j).cast<double>().array().exp() * unit;
      }
      pieces.push_back(next);
      piece_channels.insert(piece_channels.end(), spec.outputs.begin(), spec.outputs.end());
    }
  }

  if (truth) {
    VarR total = nll_parts.front();
    for (std::size_t i = 1; i < nll_parts.size(); ++i) total = nn::add(total, nll_parts[i]);
    res.nll = total;
  }
  if (continue_chain) {
    MatrixR ops(B, static_cast<Eigen::Index>(kOperationalChannels.size()));
    for (std::size_t j = 0; j < kOperationalChannels.size(); ++j) {
      ops.col(static_cast<Eigen::Index>(j)) = op_next.col(kOperationalChannels[j]);
      piece_channels.push_back(kOperationalChannels[j]);
    }
    pieces.push_back(tape.constant(std::move(ops)));
    std::vector<Eigen::Index> perm(ch::kCount, -1);
    for (std::size_t i = 0; i < piece_channels.size(); ++i) perm[piece_channels[i]] = static_cast<Eigen::Index>(i);
    res.next = nn::gather_cols(nn::concat_cols(pieces), perm);
  }
  return res;
}

namespace {

VarR final_latest(Tape<Real>& tape, const MatrixR& seq, Eigen::Index B) {
  return tape.constant(seq.bottomRows(B));
}

}  // namespace

DynPrediction DynamicsModel::predict(std::span<const StackedState> states, std::span<const JointAction> actions) const {
  if (states.size() != actions.size()) throw std::invalid_argument("predict: one action per state");
  const auto B = static_cast<Eigen::Index>(states.size());
  Tape<Real> tape(false);
  const MatrixR seq = normalise_states(states);
  const MatrixR onehot = action_features(actions);
  const MatrixR op = MatrixR::Zero(B, ch::kCount);
  try {
    auto r = step(tape, tape.constant(seq), final_latest(tape, seq, B), onehot, nullptr, op, true, false, nullptr,
                  nullptr);
    return {std::move(r.mean_dyn), std::move(r.std_dyn)};
  } catch (const nn::NumericalError& e) {
    throw ModelFault(std::string("model produced a non-finite prediction: ") + e.what(), -1);
  }
}

DynPrediction DynamicsModel::predict(const StackedState& state, JointAction action) const {
  return predict(std::span<const StackedState>(&state, 1), std::span<const JointAction>(&action, 1));
}

double DynamicsModel::nll(std::span<const StackedState> states, std::span<const JointAction> actions,
                          std::span<const Observation> next) const {
  if (states.size() != actions.size() || states.size() != next.size() || states.empty()) {
    throw std::invalid_argument("nll: states, actions and next frames must be equal, non-empty lists");
  }
  const auto B = static_cast<Eigen::Index>(states.size());
  Tape<Real> tape(false);
  const MatrixR seq = normalise_states(states);
  const MatrixR truth = normalise_frames(next);
  auto r = step(tape, tape.constant(seq), final_latest(tape, seq, B), action_features(actions), &truth, truth,
                false, false, nullptr, nullptr);
  return r.nll.value().mean();
}

std::vector<Observation> DynamicsModel::advance(std::span<StackedState> states, std::span<const JointAction> actions,
                                                std::span<const Operational> operational,
                                                std::mt19937_64* rng) const {
  if (states.size() != actions.size() || states.size() != operational.size()) {
    throw std::invalid_argument("advance: one action and one operational frame per state");
  }
  const auto B = static_cast<Eigen::Index>(states.size());
  Tape<Real> tape(false);
  const MatrixR seq = normalise_states(std::span<const StackedState>(states.data(), states.size()));
  MatrixR op = MatrixR::Zero(B, ch::kCount);
  for (Eigen::Index b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < kOperationalChannels.size(); ++j) {
      const int c = kOperationalChannels[j];
      op(b, c) = (operational[static_cast<std::size_t>(b)][j] - norm_.mean[c]) / norm_.std[c];
    }
  }
  MatrixR next;
  try {
    auto r = step(tape, tape.constant(seq), final_latest(tape, seq, B), action_features(actions), nullptr, op, true,
                  false, nullptr, rng);
    next = r.next.value();
  } catch (const nn::NumericalError& e) {
    throw ModelFault(std::string("model produced a non-finite prediction: ") + e.what(), -1);
  }
  std::vector<Observation> out;
  out.reserve(states.size());
  for (Eigen::Index b = 0; b < B; ++b) {
    Observation o = denormalise(next, b);
    o[ch::kV] = std::max(0.0, o[ch::kV]);
    for (int w = 0; w < kNumWheels; ++w) {
      o[ch::kWheel + w] = std::max(0.0, o[ch::kWheel + w]);
      o[ch::kPressure + w] = std::max(0.0, o[ch::kPressure + w]);
    }
    states[static_cast<std::size_t>(b)].push(o);
    out.push_back(o);
  }
  return out;
}

// ---------------------------------------------------------------- persistence

void save_model(const DynamicsModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto& mm = const_cast<DynamicsModel&>(m);
  ojson meta{{"kind", "dynamics"}, {"config", m.config()}, {"normalizer", m.normalizer()}};
  nn::save_checkpoint(dir / "model.bin", mm.parameters(), meta);
  ojson graph{{"h", m.config().h}, {"d_next", ojson::array()}, {"modules", ojson::array()}};
  for (int c : dynamic_channels()) graph["d_next"].push_back(std::string(channel_name(c)));
  for (const auto& spec : m.config().graph.modules) {
    ojson mod{{"name", spec.name}};
    auto names = [](const std::vector<int>& cs) {
      ojson a = ojson::array();
      for (int c : cs) a.push_back(std::string(channel_name(c)));
      return a;
    };
    mod["window"] = names(spec.window);
    mod["parents"] = names(spec.parents);
    mod["action"] = spec.action;
    mod["outputs"] = names(spec.outputs);
    mod["levels"] = names(spec.levels);
    graph["modules"].push_back(mod);
  }
  data::write_atomic(dir / "causal_graph.json", graph.dump(2) + "\n");
}

DynamicsModel load_model(const std::filesystem::path& dir) {
  const auto path = dir / "model.bin";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw nn::CheckpointError("cannot open model checkpoint: " + path.string());
  std::string header;
  std::getline(in, header);
  ojson manifest;
  try {
    manifest = ojson::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw nn::CheckpointError("malformed model checkpoint " + path.string() + ": " + e.what());
  }
  const auto& meta = manifest.at("meta");
  if (meta.value("kind", "") != "dynamics") throw nn::CheckpointError(path.string() + " is not a dynamics model");
  DynamicsModel m(meta.at("config").get<ModelConfig>(), 0);
  nn::load_checkpoint(path, m.parameters());
  m.set_normalizer(meta.at("normalizer").get<Normalizer>());
  return m;
}

// ---------------------------------------------------------------- roll-out

void RolloutConfig::validate() const {
  if (max_steps < 1) throw std::invalid_argument("rollout: max_steps must be >= 1");
}

RolloutResult rollout(const DynamicsModel& model, const StackedState& init, std::span<const JointAction> actions,
                      std::span<const Operational> operational, const RolloutConfig& cfg, std::mt19937_64* rng) {
  cfg.validate();
  if (operational.size() < actions.size()) {
    throw std::invalid_argument("rollout: operational sequence shorter than the action sequence");
  }
  if (cfg.sample && rng == nullptr) throw std::invalid_argument("rollout: sampling needs a generator");
  RolloutResult res;
  res.final_state = init;
  res.frames.push_back(init.latest());
  const std::size_t n = std::min(actions.size(), static_cast<std::size_t>(cfg.max_steps));
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<Observation> next;
    try {
      next = model.advance(std::span<StackedState>(&res.final_state, 1), actions.subspan(k, 1),
                           operational.subspan(k, 1), cfg.sample ? rng : nullptr);
    } catch (const ModelFault& e) {
      throw ModelFault(std::string(e.what()) + " at roll-out step " + std::to_string(k), static_cast<long>(k));
    }
    res.frames.push_back(next.front());
    if (cfg.stop_at_termination && terminated(next.front()[ch::kV])) break;
  }
  return res;
}

ReplayError replay(const DynamicsModel& model, const data::Trajectory& traj) {
  const int h = model.config().h;
  const std::size_t n = traj.records.size();
  if (n < static_cast<std::size_t>(h) + 1) {
    throw std::invalid_argument("replay: trajectory shorter than one stacked state plus a step");
  }
  std::vector<Observation> first;
  for (int k = 0; k < h; ++k) first.push_back(traj.records[static_cast<std::size_t>(k)].obs);
  const std::size_t t0 = static_cast<std::size_t>(h) - 1;
  std::vector<JointAction> actions;
  std::vector<Operational> ops;
  for (std::size_t k = t0; k + 1 < n; ++k) {
    actions.push_back(traj.records[k].act);
    ops.push_back(operational_of(traj.records[k + 1].obs));
  }
  RolloutConfig cfg;
  cfg.max_steps = static_cast<int>(actions.size());
  cfg.stop_at_termination = false;
  auto r = rollout(model, stack(first, h), actions, ops, cfg);
  ReplayError err;
  err.start = t0;
  for (std::size_t k = 1; k < r.frames.size(); ++k) {
    const auto& p = r.frames[k];
    const auto& o = traj.records[t0 + k].obs;
    err.speed_mae_kmh += std::abs(p[ch::kV] - o[ch::kV]);
    for (int w = 0; w < kNumWheels; ++w) err.wheel_mae_kmh += std::abs(p[ch::kWheel + w] - o[ch::kWheel + w]) / 4.0;
  }
  const auto steps = static_cast<double>(r.frames.size() - 1);
  err.speed_mae_kmh /= steps;
  err.wheel_mae_kmh /= steps;
  err.predicted = std::move(r.frames);
  return err;
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (lr <= 0) throw std::invalid_argument("train: learning rate must be positive");
  if (batch < 1 || rollout_batch < 1) throw std::invalid_argument("train: batch sizes must be >= 1");
  if (rollout_length < 1) throw std::invalid_argument("train: roll-out length m must be >= 1");
  if (tbptt < 1) throw std::invalid_argument("train: truncation length must be >= 1");
  if (rollout_updates < 0) throw std::invalid_argument("train: rollout_updates must be >= 0");
  if (grad_clip < 0) throw std::invalid_argument("train: grad_clip must be >= 0");
}

namespace {

struct Prepared {
  std::vector<MatrixR> frames;   // per trajectory, len x 18 normalised
  std::vector<MatrixR> onehots;  // per trajectory, len x 16
  std::vector<std::pair<int, int>> transitions;
};

Prepared prepare(const DynamicsModel& model, const std::vector<data::Trajectory>& trajs) {
  Prepared p;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& recs = trajs[i].records;
    std::vector<Observation> obs;
    std::vector<JointAction> acts;
    for (const auto& r : recs) {
      obs.push_back(r.obs);
      acts.push_back(r.act);
    }
    p.frames.push_back(model.normalise_frames(obs));
    p.onehots.push_back(DynamicsModel::action_features(acts));
    for (std::size_t t = 0; t + 1 < recs.size(); ++t) p.transitions.emplace_back(static_cast<int>(i), static_cast<int>(t));
  }
  return p;
}

// Window rows for transition (i, t) written into `seq` (time-major, B rows per frame).
void fill_window(const Prepared& p, int i, int t, int h, Eigen::Index b, Eigen::Index B, MatrixR& seq) {
  const auto& F = p.frames[static_cast<std::size_t>(i)];
  for (int k = 0; k < h; ++k) seq.row(k * B + b) = F.row(std::max(0, t - h + 1 + k));
}

struct SingleBatch {
  MatrixR seq, latest, onehot, truth;
};

SingleBatch single_batch(const Prepared& p, std::span<const std::pair<int, int>> items, int h) {
  const auto B = static_cast<Eigen::Index>(items.size());
  SingleBatch sb{MatrixR(h * B, ch::kCount), MatrixR(B, ch::kCount), MatrixR(B, kActionFeatures),
                 MatrixR(B, ch::kCount)};
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto [i, t] = items[static_cast<std::size_t>(b)];
    fill_window(p, i, t, h, b, B, sb.seq);
    const auto& F = p.frames[static_cast<std::size_t>(i)];
    sb.latest.row(b) = F.row(t);
    sb.truth.row(b) = F.row(t + 1);
    sb.onehot.row(b) = p.onehots[static_cast<std::size_t>(i)].row(t);
  }
  return sb;
}

double clip_gradients(const std::vector<nn::Parameter<Real>*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params) p->grad *= s;
  }
  return norm;
}

}  // namespace

double dataset_nll(const DynamicsModel& model, const std::vector<data::Trajectory>& trajectories) {
  const Prepared p = prepare(model, trajectories);
  if (p.transitions.empty()) throw std::invalid_argument("dataset_nll: no transitions");
  const int h = model.config().h;
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  for (std::size_t s = 0; s < p.transitions.size(); s += kChunk) {
    const auto items = std::span(p.transitions).subspan(s, std::min(kChunk, p.transitions.size() - s));
    const SingleBatch sb = single_batch(p, items, h);
    Tape<Real> tape(false);
    auto r = model.step(tape, tape.constant(sb.seq), tape.constant(sb.latest), sb.onehot, &sb.truth, sb.truth, false,
                        false, nullptr, nullptr);
    total += r.nll.value().sum();
  }
  return total / static_cast<double>(p.transitions.size());
}

std::vector<LossRecord> train_model(DynamicsModel& model, const data::Dataset& data, const TrainConfig& cfg,
                                    const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train_model: empty training split");
  model.set_normalizer(Normalizer::fit(data.train));
  const Prepared p = prepare(model, data.train);
  if (p.transitions.empty()) throw std::invalid_argument("train_model: training split has no transitions");
  const int h = model.config().h;
  auto params = model.parameters();
  nn::Adam<Real> adam(params, nn::AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::pair<int, int>> order = p.transitions;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch);
  const std::size_t n_batches = (order.size() + batch - 1) / batch;
  const int multi_updates = cfg.rollout_length > 1 ? cfg.rollout_updates : 0;

  auto multi_step_update = [&](int epoch) {
    const auto B = static_cast<Eigen::Index>(cfg.rollout_batch);
    std::uniform_int_distribution<std::size_t> pick(0, p.transitions.size() - 1);
    std::vector<std::pair<int, int>> starts;
    std::vector<int> lengths;
    long valid = 0;
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto st = p.transitions[pick(rng)];
      const int len = static_cast<int>(p.frames[static_cast<std::size_t>(st.first)].rows());
      starts.push_back(st);
      lengths.push_back(std::min(cfg.rollout_length, len - 1 - st.second));
      valid += lengths.back();
    }
    const int steps = *std::max_element(lengths.begin(), lengths.end());
    std::vector<MatrixR> window(static_cast<std::size_t>(h), MatrixR(B, ch::kCount));
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& F = p.frames[static_cast<std::size_t>(starts[static_cast<std::size_t>(b)].first)];
      const int t0 = starts[static_cast<std::size_t>(b)].second;
      for (int k = 0; k < h; ++k) window[static_cast<std::size_t>(k)].row(b) = F.row(std::max(0, t0 - h + 1 + k));
    }
    for (int s0 = 0; s0 < steps; s0 += cfg.tbptt) {
      Tape<Real> tape;
      std::vector<VarR> frames;
      for (const auto& w : window) frames.push_back(tape.constant(w));
      std::optional<VarR> total;
      for (int k = s0; k < std::min(steps, s0 + cfg.tbptt); ++k) {
        MatrixR onehot(B, kActionFeatures), truth(B, ch::kCount), mask(B, 1);
        for (Eigen::Index b = 0; b < B; ++b) {
          const auto [i, t0] = starts[static_cast<std::size_t>(b)];
          const int L = lengths[static_cast<std::size_t>(b)];
          const int t = t0 + std::min(k, L - 1);
          onehot.row(b) = p.onehots[static_cast<std::size_t>(i)].row(t);
          truth.row(b) = p.frames[static_cast<std::size_t>(i)].row(t + 1);
          mask(b, 0) = k < L ? 1.0 : 0.0;
        }
        auto r = model.step(tape, nn::concat_rows(frames), frames.back(), onehot, &truth, truth, true, true, &rng,
                            nullptr);
        VarR part = nn::sum(nn::mul_const(r.nll, mask));
        total = total ? nn::add(*total, part) : part;
        frames.erase(frames.begin());
        frames.push_back(r.next);
      }
      tape.backward(nn::scale(*total, static_cast<Real>(1.0 / static_cast<double>(valid))));
      for (std::size_t k = 0; k < window.size(); ++k) window[k] = frames[k].value();
    }
    clip_gradients(params, cfg.grad_clip);
    adam.step();
    adam.zero_grad();
    (void)epoch;
  };

  std::vector<LossRecord> history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t count = 0;
    int done_multi = 0;
    try {
      for (std::size_t bi = 0; bi < n_batches; ++bi) {
        const std::size_t start = bi * batch;
        const auto items = std::span(order).subspan(start, std::min(batch, order.size() - start));
        const SingleBatch sb = single_batch(p, items, h);
        {
          Tape<Real> tape;
          auto r = model.step(tape, tape.constant(sb.seq), tape.constant(sb.latest), sb.onehot, &sb.truth, sb.truth,
                              false, true, &rng, nullptr);
          auto loss = nn::mean(r.nll);
          sum += r.nll.value().sum();
          count += items.size();
          tape.backward(loss);
        }
        clip_gradients(params, cfg.grad_clip);
        adam.step();
        adam.zero_grad();
        // Spread the multi-step updates evenly through the epoch.
        while (done_multi < multi_updates &&
               static_cast<std::size_t>(done_multi) * n_batches < (bi + 1) * static_cast<std::size_t>(multi_updates)) {
          multi_step_update(epoch);
          ++done_multi;
        }
      }
    } catch (const nn::NumericalError& e) {
      throw TrainingDiverged("dynamics model training diverged in epoch " + std::to_string(epoch) + ": " + e.what(),
                             epoch);
    }
    LossRecord rec{epoch, sum / static_cast<double>(count), data.val.empty() ? std::nan("") : 0.0};
    if (!data.val.empty()) {
      try {
        rec.val_nll = dataset_nll(model, data.val);
      } catch (const nn::NumericalError& e) {
        throw TrainingDiverged("validation NLL is non-finite after epoch " + std::to_string(epoch), epoch);
      }
    }
    if (!std::isfinite(rec.train_nll)) {
      throw TrainingDiverged("training NLL is non-finite in epoch " + std::to_string(epoch), epoch);
    }
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "epoch,train_nll,val_nll\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g\n", r.epoch, r.train_nll, r.val_nll);
    out << buf;
  }
  data::write_atomic(path, out.str());
}

}  // namespace brakelab::model

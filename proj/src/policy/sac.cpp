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

#include "brakelab/policy/sac.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "brakelab/data/dataset.hpp"
#include "brakelab/nn/checkpoint.hpp"

namespace brakelab::policy {

using ojson = nlohmann::ordered_json;

StackedState speed_augment(const StackedState& s, double v_aug_kmh) {
  StackedState out = s;
  for (double& x : out.window(ch::kV)) x += v_aug_kmh;
  for (int w = 0; w < kNumWheels; ++w) {
    for (double& x : out.window(ch::kWheel + w)) x += v_aug_kmh;
  }
  return out;
}

namespace {

Observation augment_frame(Observation o, double v_aug) {
  o[ch::kV] += v_aug;
  for (int w = 0; w < kNumWheels; ++w) o[ch::kWheel + w] += v_aug;
  return o;
}

MatrixR repeat_rows(const MatrixR& m, int k) {
  MatrixR out(m.rows() * k, m.cols());
  for (Eigen::Index b = 0; b < m.rows(); ++b) {
    for (int j = 0; j < k; ++j) out.row(b * k + j) = m.row(b);
  }
  return out;
}

// Inverse-CDF draw of one wheel's action from its log-probabilities.
int draw_wheel(const MatrixR& lp, Eigen::Index row, int wheel, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (int a = 0; a < kChoices - 1; ++a) {
    acc += std::exp(static_cast<double>(lp(row, 4 * wheel + a)));
    if (u < acc) return a;
  }
  return kChoices - 1;
}

JointAction draw_joint(const MatrixR& lp, Eigen::Index row, std::mt19937_64& rng) {
  JointAction a{};
  for (int w = 0; w < kNumWheels; ++w) a[w] = static_cast<WheelAction>(draw_wheel(lp, row, w, rng));
  return a;
}

double entropy_row(const MatrixR& lp, Eigen::Index row) {
  double h = 0.0;
  for (int w = 0; w < kNumWheels; ++w) h += wheel_entropy(lp, row, w);
  return h;
}

const std::vector<JointAction>& all_actions() {
  static const std::vector<JointAction> actions = [] {
    std::vector<JointAction> v;
    for (int i = 0; i < kNumActions; ++i) v.push_back(decode(i));
    return v;
  }();
  return actions;
}

}  // namespace

// ---------------------------------------------------------------- networks

StateEncoder StateEncoder::from(const model::Normalizer& n, int h) {
  StateEncoder e;
  e.h = h;
  e.mean = n.mean;
  e.std = n.std;
  return e;
}

MatrixR StateEncoder::encode(std::span<const StackedState> states) const {
  MatrixR out(static_cast<Eigen::Index>(states.size()), width());
  for (std::size_t b = 0; b < states.size(); ++b) {
    const auto& s = states[b];
    if (s.h() != h) throw std::invalid_argument("StateEncoder: window length mismatch");
    for (int c = 0; c < ch::kCount; ++c) {
      const double inv = 1.0 / std[c];
      for (int k = 0; k < h; ++k) {
        out(static_cast<Eigen::Index>(b), c * h + k) = static_cast<Real>((s.at(c, k) - mean[c]) * inv);
      }
    }
  }
  return out;
}

Policy::Policy(StateEncoder enc, std::vector<int> hidden, std::uint64_t seed)
    : enc_(enc), hidden_(std::move(hidden)),
      net_("policy", enc_.width(), hidden_, kNumWheels * kChoices, nn::Activation::kRelu, 0.0) {
  std::mt19937_64 rng(seed);
  net_.init(rng);
}

std::vector<nn::Parameter<Real>*> Policy::parameters() {
  std::vector<nn::Parameter<Real>*> out;
  net_.collect(out);
  return out;
}

VarR Policy::log_probs(TapeR& tape, VarR encoded) const {
  return nn::log_softmax_groups(net_.forward(tape, encoded), static_cast<Eigen::Index>(kChoices));
}

MatrixR Policy::log_probs(std::span<const StackedState> states) const {
  TapeR tape(false);
  return log_probs(tape, tape.constant(enc_.encode(states))).value();
}

double joint_log_prob(const MatrixR& lp, Eigen::Index row, const JointAction& a) {
  double s = 0.0;
  for (int w = 0; w < kNumWheels; ++w) s += static_cast<double>(lp(row, 4 * w + static_cast<int>(a[w])));
  return s;
}

double wheel_entropy(const MatrixR& lp, Eigen::Index row, int wheel) {
  double h = 0.0;
  for (int a = 0; a < kChoices; ++a) {
    const double l = static_cast<double>(lp(row, 4 * wheel + a));
    h -= std::exp(l) * l;
  }
  return h;
}

SampledAction sample_action(const Policy& p, const StackedState& s, std::mt19937_64& rng) {
  const MatrixR lp = p.log_probs(std::span<const StackedState>(&s, 1));
  SampledAction out;
  out.action = draw_joint(lp, 0, rng);
  out.log_prob = joint_log_prob(lp, 0, out.action);
  return out;
}

JointAction greedy_action(const Policy& p, const StackedState& s) {
  const MatrixR lp = p.log_probs(std::span<const StackedState>(&s, 1));
  JointAction a{};
  for (int w = 0; w < kNumWheels; ++w) {
    int best = 0;
    for (int c = 1; c < kChoices; ++c) {
      if (lp(0, 4 * w + c) > lp(0, 4 * w + best)) best = c;
    }
    a[w] = static_cast<WheelAction>(best);
  }
  return a;
}

Critic::Critic(const std::string& name, int state_width, std::vector<int> hidden, std::uint64_t seed)
    : net_(name, state_width + model::kActionFeatures, hidden, 1, nn::Activation::kRelu, 0.0) {
  std::mt19937_64 rng(seed);
  net_.init(rng);
}

VarR Critic::q(TapeR& tape, VarR encoded, const MatrixR& onehot) const {
  return net_.forward(tape, nn::concat_cols<Real>({encoded, tape.constant(onehot)}));
}

std::vector<nn::Parameter<Real>*> Critic::parameters() {
  std::vector<nn::Parameter<Real>*> out;
  net_.collect(out);
  return out;
}

void soft_update(const std::vector<nn::Parameter<Real>*>& target, const std::vector<nn::Parameter<Real>*>& source,
                 double tau) {
  if (target.size() != source.size()) throw std::invalid_argument("soft_update: parameter lists differ");
  const auto t = static_cast<Real>(tau);
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i]->value = (Real(1) - t) * target[i]->value + t * source[i]->value;
  }
}

// ---------------------------------------------------------------- replay buffer

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
}

long ReplayBuffer::begin_episode(const StackedState& initial) {
  Episode e;
  e.h = initial.h();
  e.frames.reserve(static_cast<std::size_t>(e.h) * ch::kCount);
  for (int k = 0; k < e.h; ++k) {
    for (int c = 0; c < ch::kCount; ++c) e.frames.push_back(static_cast<float>(initial.at(c, k)));
  }
  const long id = next_id_++;
  episodes_.emplace(id, std::move(e));
  return id;
}

void ReplayBuffer::push(long episode, const JointAction& a, double reward, const Observation& next_frame,
                        bool done) {
  auto it = episodes_.find(episode);
  if (it == episodes_.end()) throw std::invalid_argument("ReplayBuffer: unknown or evicted episode");
  auto& e = it->second;
  if (!e.done.empty() && e.done.back()) throw std::logic_error("ReplayBuffer: push after a terminal transition");
  for (double x : next_frame) e.frames.push_back(static_cast<float>(x));
  e.actions.push_back(a);
  e.rewards.push_back(reward);
  e.done.push_back(done);
  ++e.live;
  index_.push_back({episode, static_cast<int>(e.actions.size()) - 1});
  while (index_.size() > capacity_) {
    const Ref old = index_.front();
    index_.pop_front();
    auto ot = episodes_.find(old.episode);
    if (--ot->second.live == 0 && ot->first != episode) episodes_.erase(ot);
  }
}

StackedState ReplayBuffer::window(const Episode& e, int first) const {
  StackedState s(e.h);
  for (int k = 0; k < e.h; ++k) {
    const float* f = e.frames.data() + static_cast<std::size_t>(first + k) * ch::kCount;
    for (int c = 0; c < ch::kCount; ++c) s.at(c, k) = static_cast<double>(f[c]);
  }
  return s;
}

Transition ReplayBuffer::at(std::size_t i) const {
  const Ref r = index_.at(i);
  const Episode& e = episodes_.at(r.episode);
  Transition t;
  t.state = window(e, r.step);
  t.next_state = window(e, r.step + 1);
  t.action = e.actions[static_cast<std::size_t>(r.step)];
  t.reward = e.rewards[static_cast<std::size_t>(r.step)];
  t.done = e.done[static_cast<std::size_t>(r.step)];
  return t;
}

std::vector<std::size_t> ReplayBuffer::sample(std::size_t n, std::mt19937_64& rng) const {
  if (index_.empty()) throw std::logic_error("ReplayBuffer: sample from an empty buffer");
  std::uniform_int_distribution<std::size_t> pick(0, index_.size() - 1);
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = pick(rng);
  return out;
}

Batch gather(const ReplayBuffer& buffer, std::span<const std::size_t> idx) {
  Batch b;
  for (std::size_t i : idx) {
    Transition t = buffer.at(i);
    b.states.push_back(std::move(t.state));
    b.next_states.push_back(std::move(t.next_state));
    b.actions.push_back(t.action);
    b.rewards.push_back(t.reward);
    b.done.push_back(t.done ? 1.0 : 0.0);
  }
  return b;
}

// ---------------------------------------------------------------- config

void SacConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("sac: gamma must be in (0,1)");
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("sac: tau must be in (0,1]");
  if (!(lr > 0.0)) throw std::invalid_argument("sac: lr must be positive");
  if (batch < 1) throw std::invalid_argument("sac: batch must be >= 1");
  if (!(alpha >= 0.0)) throw std::invalid_argument("sac: alpha must be >= 0");
  if (aug_low_kmh < 0.0 || aug_high_kmh < aug_low_kmh) throw std::invalid_argument("sac: bad augmentation range");
  if (epochs < 0 || episodes < 0) throw std::invalid_argument("sac: epochs and episodes must be >= 0");
  if (horizon < 1) throw std::invalid_argument("sac: horizon must be >= 1");
  if (buffer_capacity == 0) throw std::invalid_argument("sac: buffer capacity must be positive");
  if (samples < 1) throw std::invalid_argument("sac: samples must be >= 1");
  if (updates_per_step < 0) throw std::invalid_argument("sac: updates_per_step must be >= 0");
  for (int w : hidden) {
    if (w <= 0) throw std::invalid_argument("sac: hidden widths must be positive");
  }
  reward.validate();
}

void to_json(ojson& j, const SacConfig& c) {
  j = ojson{{"gamma", c.gamma},
            {"tau", c.tau},
            {"lr", c.lr},
            {"batch", c.batch},
            {"alpha", c.alpha},
            {"auto_alpha", c.auto_alpha},
            {"target_entropy", c.target_entropy},
            {"aug_low_kmh", c.aug_low_kmh},
            {"aug_high_kmh", c.aug_high_kmh},
            {"epochs", c.epochs},
            {"episodes", c.episodes},
            {"horizon", c.horizon},
            {"buffer_capacity", c.buffer_capacity},
            {"samples", c.samples},
            {"exact", c.exact},
            {"updates_per_step", c.updates_per_step},
            {"sample_model", c.sample_model},
            {"hidden", c.hidden},
            {"reward",
             {{"beta_speed", c.reward.beta_speed},
              {"beta_yaw", c.reward.beta_yaw},
              {"beta_slip", c.reward.beta_slip},
              {"slip_low", c.reward.slip_low},
              {"slip_high", c.reward.slip_high},
              {"v_eps_kmh", c.reward.v_eps_kmh}}},
            {"seed", c.seed}};
}

void from_json(const ojson& j, SacConfig& c) {
  SacConfig d;
  c.gamma = j.value("gamma", d.gamma);
  c.tau = j.value("tau", d.tau);
  c.lr = j.value("lr", d.lr);
  c.batch = j.value("batch", d.batch);
  c.alpha = j.value("alpha", d.alpha);
  c.auto_alpha = j.value("auto_alpha", d.auto_alpha);
  c.target_entropy = j.value("target_entropy", d.target_entropy);
  c.aug_low_kmh = j.value("aug_low_kmh", d.aug_low_kmh);
  c.aug_high_kmh = j.value("aug_high_kmh", d.aug_high_kmh);
  c.epochs = j.value("epochs", d.epochs);
  c.episodes = j.value("episodes", d.episodes);
  c.horizon = j.value("horizon", d.horizon);
  c.buffer_capacity = j.value("buffer_capacity", d.buffer_capacity);
  c.samples = j.value("samples", d.samples);
  c.exact = j.value("exact", d.exact);
  c.updates_per_step = j.value("updates_per_step", d.updates_per_step);
  c.sample_model = j.value("sample_model", d.sample_model);
  c.hidden = j.value("hidden", d.hidden);
  if (j.contains("reward")) {
    const auto& r = j.at("reward");
    c.reward.beta_speed = r.value("beta_speed", d.reward.beta_speed);
    c.reward.beta_yaw = r.value("beta_yaw", d.reward.beta_yaw);
    c.reward.beta_slip = r.value("beta_slip", d.reward.beta_slip);
    c.reward.slip_low = r.value("slip_low", d.reward.slip_low);
    c.reward.slip_high = r.value("slip_high", d.reward.slip_high);
    c.reward.v_eps_kmh = r.value("v_eps_kmh", d.reward.v_eps_kmh);
  }
  c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------- agent

Sac::Sac(StateEncoder enc, const SacConfig& cfg)
    : cfg_(cfg), policy_(enc, cfg.hidden, data::derive_seed(cfg.seed, 11, 0, 0)), alpha_(cfg.alpha),
      log_alpha_(std::log(std::max(cfg.alpha, 1e-12))) {
  cfg_.validate();
  for (int j = 0; j < 2; ++j) {
    const auto seed = data::derive_seed(cfg.seed, 12, static_cast<std::uint64_t>(j), 0);
    q_[j] = Critic("q" + std::to_string(j), enc.width(), cfg.hidden, seed);
    q_target_[j] = Critic("q" + std::to_string(j), enc.width(), cfg.hidden, seed);
  }
  const nn::AdamConfig ac{cfg.lr, 0.9, 0.999, 1e-8};
  policy_opt_ = nn::Adam<Real>(policy_.parameters(), ac);
  for (int j = 0; j < 2; ++j) q_opt_[j] = nn::Adam<Real>(q_[j].parameters(), ac);
}

std::vector<nn::Parameter<Real>*> Sac::all_parameters() {
  auto out = policy_.parameters();
  for (auto* set : {&q_, &q_target_}) {
    for (auto& c : *set) {
      for (auto* p : c.parameters()) out.push_back(p);
    }
  }
  return out;
}

namespace {

// Elementwise min of two critics over (row-repeated states, one-hots).
MatrixR min_q(const std::array<Critic, 2>& critics, const MatrixR& enc, const MatrixR& onehot) {
  TapeR tape(false);
  const VarR e = tape.constant(enc);
  const MatrixR a = critics[0].q(tape, e, onehot).value();
  const MatrixR b = critics[1].q(tape, e, onehot).value();
  return a.cwiseMin(b);
}

struct Expectation {
  std::vector<double> q;        // per state, E_pi[min Q]
  std::vector<double> entropy;  // per state, exact joint entropy
  MatrixR weights;              // B x 16, d E[min Q] / d log pi_i(c), baseline-corrected
};

// E_{a~pi}[min Q(s, a)] by K draws (leave-one-out baseline for the score
// weights) or by enumerating all joint actions.
Expectation expected_q(const std::array<Critic, 2>& critics, const MatrixR& enc, const MatrixR& lp, bool exact,
                       int samples, std::mt19937_64& rng) {
  const Eigen::Index B = enc.rows();
  Expectation out;
  out.q.assign(static_cast<std::size_t>(B), 0.0);
  out.entropy.assign(static_cast<std::size_t>(B), 0.0);
  out.weights = MatrixR::Zero(B, model::kActionFeatures);
  for (Eigen::Index b = 0; b < B; ++b) out.entropy[static_cast<std::size_t>(b)] = entropy_row(lp, b);

  if (exact) {
    const auto& acts = all_actions();
    const int n = kNumActions;
    const MatrixR q = min_q(critics, repeat_rows(enc, n), model::DynamicsModel::action_features(acts).replicate(B, 1));
    for (Eigen::Index b = 0; b < B; ++b) {
      double v = 0.0;
      for (int i = 0; i < n; ++i) {
        const double pi = std::exp(joint_log_prob(lp, b, acts[static_cast<std::size_t>(i)]));
        const double qi = static_cast<double>(q(b * n + i, 0));
        v += pi * qi;
        for (int w = 0; w < kNumWheels; ++w) {
          out.weights(b, 4 * w + static_cast<int>(acts[static_cast<std::size_t>(i)][w])) +=
              static_cast<Real>(pi * qi);
        }
      }
      out.q[static_cast<std::size_t>(b)] = v;
      // Subtracting V * p leaves the gradient through the softmax unchanged
      // and keeps the weights small.
      for (int w = 0; w < kNumWheels; ++w) {
        for (int c = 0; c < kChoices; ++c) {
          out.weights(b, 4 * w + c) -= static_cast<Real>(v * std::exp(static_cast<double>(lp(b, 4 * w + c))));
        }
      }
    }
    return out;
  }

  const int K = samples;
  std::vector<JointAction> acts(static_cast<std::size_t>(B * K));
  for (Eigen::Index b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k) acts[static_cast<std::size_t>(b * K + k)] = draw_joint(lp, b, rng);
  }
  const MatrixR q = min_q(critics, repeat_rows(enc, K), model::DynamicsModel::action_features(acts));
  for (Eigen::Index b = 0; b < B; ++b) {
    double total = 0.0;
    for (int k = 0; k < K; ++k) total += static_cast<double>(q(b * K + k, 0));
    out.q[static_cast<std::size_t>(b)] = total / K;
    for (int k = 0; k < K; ++k) {
      const double qk = static_cast<double>(q(b * K + k, 0));
      const double baseline = K > 1 ? (total - qk) / (K - 1) : 0.0;
      const auto& a = acts[static_cast<std::size_t>(b * K + k)];
      for (int w = 0; w < kNumWheels; ++w) {
        out.weights(b, 4 * w + static_cast<int>(a[w])) += static_cast<Real>((qk - baseline) / K);
      }
    }
  }
  return out;
}

}  // namespace

std::vector<double> Sac::bellman_targets(const Batch& b, std::mt19937_64& rng) const {
  const MatrixR enc = policy_.encoder().encode(b.next_states);
  const MatrixR lp = policy_.log_probs(b.next_states);
  const Expectation e = expected_q(q_target_, enc, lp, cfg_.exact, cfg_.samples, rng);
  std::vector<double> y(b.rewards.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = e.q[i] + alpha_ * e.entropy[i];
    y[i] = b.rewards[i] + cfg_.gamma * (1.0 - b.done[i]) * v;
  }
  return y;
}

double Sac::critic_update(const Batch& b, std::span<const double> y) {
  const auto B = static_cast<Eigen::Index>(b.states.size());
  if (static_cast<std::size_t>(B) != y.size() || B == 0) throw std::invalid_argument("critic_update: bad batch");
  const MatrixR enc = policy_.encoder().encode(b.states);
  const MatrixR onehot = model::DynamicsModel::action_features(b.actions);
  MatrixR target(B, 1);
  for (Eigen::Index i = 0; i < B; ++i) target(i, 0) = static_cast<Real>(y[static_cast<std::size_t>(i)]);
  double total = 0.0;
  for (int j = 0; j < 2; ++j) {
    TapeR tape;
    const VarR q = q_[j].q(tape, tape.constant(enc), onehot);
    const VarR loss = nn::scale(nn::mean(nn::square(nn::sub(q, tape.constant(target)))), Real(0.5));
    const double l = static_cast<double>(loss.value()(0, 0));
    if (!std::isfinite(l)) throw nn::NumericalError("critic loss is not finite");
    q_opt_[j].zero_grad();
    tape.backward(loss);
    q_opt_[j].step();
    total += l;
  }
  for (int j = 0; j < 2; ++j) soft_update(q_target_[j].parameters(), q_[j].parameters(), cfg_.tau);
  return total / 2.0;
}

double Sac::actor_update(const Batch& b, std::mt19937_64& rng) {
  const auto B = static_cast<Eigen::Index>(b.states.size());
  if (B == 0) throw std::invalid_argument("actor_update: empty batch");
  const MatrixR enc = policy_.encoder().encode(b.states);
  TapeR tape;
  const VarR lp = policy_.log_probs(tape, tape.constant(enc));
  const Expectation e = expected_q(q_, enc, lp.value(), cfg_.exact, cfg_.samples, rng);

  // Surrogate whose gradient is that of E[min Q] + alpha * H.
  const VarR q_part = nn::sum(nn::mul_const(lp, e.weights));
  const VarR entropy = nn::scale(nn::sum(nn::mul(nn::exp(lp), lp)), Real(-1));
  const VarR objective = nn::add(q_part, nn::scale(entropy, static_cast<Real>(alpha_)));
  const VarR loss = nn::scale(objective, static_cast<Real>(-1.0 / static_cast<double>(B)));

  double obj = 0.0;
  double mean_h = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    obj += e.q[static_cast<std::size_t>(i)] + alpha_ * e.entropy[static_cast<std::size_t>(i)];
    mean_h += e.entropy[static_cast<std::size_t>(i)];
  }
  obj /= static_cast<double>(B);
  mean_h /= static_cast<double>(B);
  if (!std::isfinite(obj)) throw nn::NumericalError("actor objective is not finite");

  policy_opt_.zero_grad();
  tape.backward(loss);
  policy_opt_.step();

  if (cfg_.auto_alpha) {
    // Minimise alpha * (H - target) in log alpha with a scalar Adam step.
    const double g = alpha_ * (mean_h - cfg_.target_entropy);
    ++alpha_t_;
    alpha_m_ = 0.9 * alpha_m_ + 0.1 * g;
    alpha_v_ = 0.999 * alpha_v_ + 0.001 * g * g;
    const double mh = alpha_m_ / (1.0 - std::pow(0.9, static_cast<double>(alpha_t_)));
    const double vh = alpha_v_ / (1.0 - std::pow(0.999, static_cast<double>(alpha_t_)));
    log_alpha_ -= cfg_.lr * mh / (std::sqrt(vh) + 1e-8);
    alpha_ = std::exp(log_alpha_);
  }
  return obj;
}

double Sac::actor_objective_exact(const Batch& b) const {
  const MatrixR enc = policy_.encoder().encode(b.states);
  const MatrixR lp = policy_.log_probs(b.states);
  std::mt19937_64 unused(0);
  const Expectation e = expected_q(q_, enc, lp, true, 1, unused);
  double obj = 0.0;
  for (std::size_t i = 0; i < e.q.size(); ++i) obj += e.q[i] + alpha_ * e.entropy[i];
  return obj / static_cast<double>(e.q.size());
}

// ---------------------------------------------------------------- training

namespace {

struct Start {
  std::size_t traj;
  std::size_t index;
};

struct Live {
  StackedState state;  // un-augmented, model space
  Start start;
  double v_aug = 0.0;
  long handle = 0;
  int steps = 0;
  EpisodeRecord record;
};

}  // namespace

PolicyTraining train_policy(Sac& agent, const model::DynamicsModel& model, const data::Dataset& data,
                            const SacConfig& cfg, const std::function<void(int)>& on_epoch) {
  cfg.validate();
  PolicyTraining out;
  if (cfg.epochs == 0 || cfg.episodes == 0) return out;

  const int h = model.config().h;
  std::vector<Start> starts;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    const auto& recs = data.train[i].records;
    for (std::size_t t = static_cast<std::size_t>(data.train[i].onset_index); t + 1 < recs.size(); ++t) {
      if (!terminated(recs[t].obs[ch::kV], cfg.reward)) starts.push_back({i, t});
    }
  }
  if (starts.empty()) throw std::invalid_argument("train_policy: no post-onset start windows in the dataset");

  std::mt19937_64 start_rng(data::derive_seed(cfg.seed, 21, 0, 0));
  std::mt19937_64 act_rng(data::derive_seed(cfg.seed, 22, 0, 0));
  std::mt19937_64 model_rng(data::derive_seed(cfg.seed, 23, 0, 0));
  std::mt19937_64 batch_rng(data::derive_seed(cfg.seed, 24, 0, 0));
  std::mt19937_64 update_rng(data::derive_seed(cfg.seed, 25, 0, 0));
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  std::uniform_real_distribution<double> aug(cfg.aug_low_kmh, cfg.aug_high_kmh);

  ReplayBuffer buffer(cfg.buffer_capacity);
  long step = 0;
  const double nan = std::numeric_limits<double>::quiet_NaN();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<Live> live;
    for (int e = 0; e < cfg.episodes; ++e) {
      Live l;
      l.start = starts[pick(start_rng)];
      l.v_aug = cfg.aug_high_kmh > cfg.aug_low_kmh ? aug(start_rng) : cfg.aug_low_kmh;
      const auto& recs = data.train[l.start.traj].records;
      std::vector<Observation> hist;
      for (std::size_t t = 0; t <= l.start.index; ++t) hist.push_back(recs[t].obs);
      l.state = stack(hist, h);
      l.handle = buffer.begin_episode(speed_augment(l.state, l.v_aug));
      l.record.epoch = epoch;
      l.record.episode = e;
      l.record.v_aug_kmh = l.v_aug;
      live.push_back(std::move(l));
    }

    for (int k = 0; k < cfg.horizon && !live.empty(); ++k) {
      std::vector<StackedState> aug_states;
      std::vector<StackedState> states;
      std::vector<model::Operational> ops;
      for (const auto& l : live) {
        aug_states.push_back(speed_augment(l.state, l.v_aug));
        states.push_back(l.state);
        const auto& recs = data.train[l.start.traj].records;
        const std::size_t next = std::min(l.start.index + 1 + static_cast<std::size_t>(k), recs.size() - 1);
        ops.push_back(model::operational_of(recs[next].obs));
      }
      const MatrixR lp = agent.policy().log_probs(aug_states);
      std::vector<JointAction> actions;
      for (std::size_t i = 0; i < live.size(); ++i) {
        actions.push_back(draw_joint(lp, static_cast<Eigen::Index>(i), act_rng));
      }
      std::vector<Observation> frames;
      try {
        frames = model.advance(states, actions, ops, cfg.sample_model ? &model_rng : nullptr);
      } catch (const std::exception& e) {
        throw PolicyTrainingError("model fault in epoch " + std::to_string(epoch) + ", step " + std::to_string(k) +
                                  ": " + e.what());
      }

      StepCurve row;
      row.step = ++step;
      std::vector<Live> still;
      for (std::size_t i = 0; i < live.size(); ++i) {
        auto& l = live[i];
        l.state = std::move(states[i]);
        const RewardTerms r = reward_terms(frames[i], cfg.vehicle, cfg.reward);
        const bool done = terminated(frames[i][ch::kV], cfg.reward);
        buffer.push(l.handle, actions[i], r.total(), augment_frame(frames[i], l.v_aug), done);
        row.r_speed += r.speed;
        row.r_yaw += r.yaw;
        row.r_slip += r.slip;
        l.record.ret += r.total();
        l.record.r_speed += r.speed;
        l.record.r_yaw += r.yaw;
        l.record.r_slip += r.slip;
        ++l.record.steps;
        if (done || k + 1 == cfg.horizon) {
          out.episodes.push_back(l.record);
        } else {
          still.push_back(std::move(l));
        }
      }
      const auto n = static_cast<double>(live.size());
      const int n_updates = cfg.updates_per_step * static_cast<int>(live.size());
      row.r_speed /= n;
      row.r_yaw /= n;
      row.r_slip /= n;
      live = std::move(still);

      row.critic_loss = nan;
      row.actor_obj = nan;
      double closs = 0.0, aobj = 0.0;
      int updates = 0;
      for (int u = 0; u < n_updates; ++u) {
        if (buffer.size() < static_cast<std::size_t>(cfg.batch)) break;
        const auto idx = buffer.sample(static_cast<std::size_t>(cfg.batch), batch_rng);
        const Batch batch = gather(buffer, idx);
        try {
          const auto y = agent.bellman_targets(batch, update_rng);
          closs += agent.critic_update(batch, y);
          aobj += agent.actor_update(batch, update_rng);
        } catch (const nn::NumericalError& e) {
          throw PolicyTrainingError("optimiser diverged in epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(k) + ": " + e.what());
        }
        ++updates;
      }
      if (updates > 0) {
        row.critic_loss = closs / updates;
        row.actor_obj = aobj / updates;
      }
      out.curve.push_back(row);
    }
    if (on_epoch) on_epoch(epoch);
  }
  std::stable_sort(out.episodes.begin(), out.episodes.end(), [](const EpisodeRecord& a, const EpisodeRecord& b) {
    return a.epoch != b.epoch ? a.epoch < b.epoch : a.episode < b.episode;
  });
  return out;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void write_curve_csv(const std::vector<StepCurve>& curve, const std::filesystem::path& path) {
  std::ostringstream s;
  s << "step,critic_loss,actor_obj,r_speed,r_yaw,r_slip\n";
  for (const auto& r : curve) {
    s << r.step << ',' << num(r.critic_loss) << ',' << num(r.actor_obj) << ',' << num(r.r_speed) << ','
      << num(r.r_yaw) << ',' << num(r.r_slip) << '\n';
  }
  data::write_atomic(path, s.str());
}

void write_episode_csv(const std::vector<EpisodeRecord>& eps, const std::filesystem::path& path) {
  std::ostringstream s;
  s << "epoch,episode,steps,v_aug_kmh,return,r_speed,r_yaw,r_slip\n";
  for (const auto& e : eps) {
    s << e.epoch << ',' << e.episode << ',' << e.steps << ',' << num(e.v_aug_kmh) << ',' << num(e.ret) << ','
      << num(e.r_speed) << ',' << num(e.r_yaw) << ',' << num(e.r_slip) << '\n';
  }
  data::write_atomic(path, s.str());
}

void save_policy(const Policy& p, const std::filesystem::path& path) {
  ojson meta;
  meta["kind"] = "policy";
  meta["h"] = p.encoder().h;
  meta["hidden"] = p.hidden();
  meta["mean"] = p.encoder().mean;
  meta["std"] = p.encoder().std;
  nn::save_checkpoint(path, const_cast<Policy&>(p).parameters(), meta);
}

Policy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw nn::CheckpointError("cannot open policy checkpoint: " + path.string());
  std::string header;
  std::getline(in, header);
  ojson manifest;
  try {
    manifest = ojson::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw nn::CheckpointError("malformed policy checkpoint " + path.string() + ": " + e.what());
  }
  const auto& meta = manifest.at("meta");
  if (meta.value("kind", "") != "policy") throw nn::CheckpointError(path.string() + " is not a policy checkpoint");
  StateEncoder enc;
  enc.h = meta.at("h").get<int>();
  enc.mean = meta.at("mean").get<std::array<double, ch::kCount>>();
  enc.std = meta.at("std").get<std::array<double, ch::kCount>>();
  Policy p(enc, meta.at("hidden").get<std::vector<int>>(), 0);
  nn::load_checkpoint(path, p.parameters());
  return p;
}

}  // namespace brakelab::policy

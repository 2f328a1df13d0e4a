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

#include "brakelab/pipeline/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <cstdio>
#include <memory>
#include <ostream>
#include <sstream>

namespace brakelab::pipeline {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::pair<Stage, const char*> kStages[] = {
    {Stage::kCollect, "collect"},         {Stage::kTrainModel, "train-model"}, {Stage::kTrainPolicy, "train-policy"},
    {Stage::kEvaluate, "evaluate"},       {Stage::kGapReport, "gap-report"},   {Stage::kAll, "all"},
};

template <class T>
void merge_into(T& value, const ojson& patch) {
  ojson j = value;
  j.merge_patch(patch);
  value = j.get<T>();
}

std::string fixed(double v, int digits = 2) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

data::Dataset require_dataset(const RunConfig& cfg) {
  if (!fs::exists(cfg.data / "dataset.json")) {
    throw MissingArtifact("no dataset at " + cfg.data.string() + " (run --stage collect first)");
  }
  return data::load_dataset(cfg.data);
}

model::DynamicsModel require_model(const RunConfig& cfg) {
  if (!fs::exists(cfg.model / "model.bin")) {
    throw MissingArtifact("no dynamics model at " + cfg.model.string() + " (run --stage train-model first)");
  }
  return model::load_model(cfg.model);
}

std::shared_ptr<const policy::Policy> require_policy(const RunConfig& cfg) {
  if (!fs::exists(cfg.policy)) {
    throw MissingArtifact("no policy at " + cfg.policy.string() + " (run --stage train-policy first)");
  }
  return std::make_shared<const policy::Policy>(policy::load_policy(cfg.policy));
}

void write_json(const fs::path& path, const ojson& j) { data::write_atomic(path, j.dump(2) + "\n"); }

}  // namespace

Stage parse_stage(const std::string& s) {
  for (const auto& [stage, name] : kStages) {
    if (s == name) return stage;
  }
  throw UsageError("unknown stage '" + s + "'");
}

std::string stage_name(Stage s) {
  for (const auto& [stage, name] : kStages) {
    if (stage == s) return name;
  }
  return "?";
}

Scale parse_scale(const std::string& s) {
  if (s == "desk") return Scale::kDesk;
  if (s == "paper") return Scale::kPaper;
  throw UsageError("unknown scale '" + s + "'");
}

std::string scale_name(Scale s) { return s == Scale::kDesk ? "desk" : "paper"; }

// ---------------------------------------------------------------- config

RunConfig RunConfig::defaults(Scale scale, std::uint64_t seed) {
  RunConfig c;
  c.scale = scale;
  c.seed = seed;
  if (scale == Scale::kDesk) {
    c.model_cfg.net = {32, {64, 64}, nn::Activation::kRelu, 0.1};
    c.train.epochs = 200;
    c.train.lr = 1e-3;
    c.train.rollout_length = 50;
    c.train.rollout_updates = 20;
    c.sac.epochs = 20;
    c.sac.hidden = {64, 64};
  }
  return c;
}

void RunConfig::apply_overrides(const ojson& j) {
  if (!j.is_object()) throw UsageError("config overrides must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "stage" || key == "scale" || key == "out" || key == "data" || key == "model" ||
          key == "policy" || key == "timings") {
        continue;  // command-line only
      } else if (key == "seed") {
        seed = value.get<std::uint64_t>();
      } else if (key == "jobs") {
        jobs = value.get<int>();
      } else if (key == "repeats") {
        repeats = value.get<int>();
      } else if (key == "corpus") {
        corpus.runs_per_cell = value.value("runs_per_cell", corpus.runs_per_cell);
        corpus.speed_kmh = value.value("speed_kmh", corpus.speed_kmh);
      } else if (key == "model_net") {
        merge_into(model_cfg, value);
      } else if (key == "model_train") {
        merge_into(train, value);
      } else if (key == "policy_train") {
        merge_into(sac, value);
      } else {
        throw UsageError("unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad config value: ") + e.what());
  }
}

void RunConfig::resolve() {
  if (data.empty()) data = out / "data";
  if (model.empty()) model = out / "model";
  if (policy.empty()) policy = out / "policy" / "policy.bin";
  corpus.jobs = jobs;
  train.seed = data::derive_seed(seed, 2, 0, 0);
  sac.seed = data::derive_seed(seed, 4, 0, 0);
}

void RunConfig::validate() const {
  try {
    if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
    if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
    if (corpus.runs_per_cell < 2) throw std::invalid_argument("corpus needs at least 2 runs per cell");
    model_cfg.validate();
    train.validate();
    sac.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void to_json(ojson& j, const RunConfig& c) {
  j = ojson{{"stage", stage_name(c.stage)},
            {"scale", scale_name(c.scale)},
            {"seed", c.seed},
            {"jobs", c.jobs},
            {"out", c.out.generic_string()},
            {"data", c.data.generic_string()},
            {"model", c.model.generic_string()},
            {"policy", c.policy.generic_string()},
            {"repeats", c.repeats},
            {"corpus", {{"runs_per_cell", c.corpus.runs_per_cell}, {"speed_kmh", c.corpus.speed_kmh}}},
            {"model_net", c.model_cfg},
            {"model_train", c.train},
            {"policy_train", c.sac}};
}

// ---------------------------------------------------------------- stages

void run_collect(const RunConfig& cfg, std::ostream& log) {
  const auto d = data::collect_corpus(cfg.seed, cfg.corpus);
  data::save_dataset(d, cfg.data);
  std::size_t records = 0;
  for (const auto* split : {&d.train, &d.val}) {
    for (const auto& t : *split) records += t.records.size();
  }
  log << "[collect] " << d.train.size() << " train + " << d.val.size() << " val trajectories, " << records
      << " records -> " << cfg.data.string() << '\n';
}

void run_train_model(const RunConfig& cfg, std::ostream& log) {
  const auto d = require_dataset(cfg);
  model::DynamicsModel m(cfg.model_cfg, data::derive_seed(cfg.seed, 3, 0, 0));
  log << "[train-model] " << m.parameter_count() << " parameters, " << cfg.train.epochs << " epochs\n";
  const int every = std::max(1, cfg.train.epochs / 10);
  const auto history = model::train_model(m, d, cfg.train, [&](const model::LossRecord& r) {
    if (r.epoch % every == 0 || r.epoch == cfg.train.epochs) {
      log << "[train-model] epoch " << r.epoch << " train_nll " << fixed(r.train_nll, 4) << " val_nll "
          << fixed(r.val_nll, 4) << '\n'
          << std::flush;
    }
  });
  fs::create_directories(cfg.model);
  model::save_model(m, cfg.model);
  model::write_loss_csv(history, cfg.model / "loss.csv");

  std::ostringstream csv;
  csv << "trajectory,steps,speed_mae_kmh,wheel_mae_kmh\n";
  for (const auto& t : d.val) {
    const auto e = model::replay(m, t);
    csv << t.file_stem() << ',' << e.predicted.size() << ',' << fixed(e.speed_mae_kmh, 4) << ','
        << fixed(e.wheel_mae_kmh, 4) << '\n';
    log << "[train-model] replay " << t.file_stem() << " v_mae " << fixed(e.speed_mae_kmh) << " w_mae "
        << fixed(e.wheel_mae_kmh) << " km/h\n";

    if (!e.predicted.empty()) {
      eval::Series pred{"v predicted", {}, {}, true}, rec{"v recorded", {}, {}, false};
      for (std::size_t k = 0; k < e.predicted.size(); ++k) {
        const auto& r = t.records[e.start + k];
        pred.x.push_back(r.t), pred.y.push_back(e.predicted[k][ch::kV]);
        rec.x.push_back(r.t), rec.y.push_back(r.obs[ch::kV]);
      }
      eval::write_text(cfg.model / ("replay_" + t.file_stem() + ".svg"),
                       eval::line_plot_svg("model roll-out " + t.file_stem(), "time (s)", "speed (km/h)",
                                           {pred, rec}));
    }
  }
  data::write_atomic(cfg.model / "replay.csv", csv.str());
}

void run_train_policy(const RunConfig& cfg, std::ostream& log) {
  const auto d = require_dataset(cfg);
  const auto m = require_model(cfg);
  policy::Sac agent(policy::StateEncoder::from(m.normalizer(), m.config().h), cfg.sac);
  log << "[train-policy] " << cfg.sac.epochs << " epochs x " << cfg.sac.episodes << " episodes, horizon "
      << cfg.sac.horizon << '\n';
  const auto out = policy::train_policy(agent, m, d, cfg.sac, [&](int epoch) {
    log << "[train-policy] epoch " << epoch << " done\n" << std::flush;
  });
  const auto dir = cfg.policy.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  policy::save_policy(agent.policy(), cfg.policy);
  policy::write_curve_csv(out.curve, dir / "curves.csv");
  policy::write_episode_csv(out.episodes, dir / "episodes.csv");

  if (!out.curve.empty()) {
    eval::Series loss{"critic loss", {}, {}, false}, obj{"actor objective", {}, {}, false};
    eval::Series rs{"speed", {}, {}, false}, ry{"yaw", {}, {}, false}, rl{"slip", {}, {}, false};
    for (const auto& r : out.curve) {
      const auto x = static_cast<double>(r.step);
      loss.x.push_back(x), loss.y.push_back(r.critic_loss);
      obj.x.push_back(x), obj.y.push_back(r.actor_obj);
      rs.x.push_back(x), rs.y.push_back(r.r_speed);
      ry.x.push_back(x), ry.y.push_back(r.r_yaw);
      rl.x.push_back(x), rl.y.push_back(r.r_slip);
    }
    eval::write_text(dir / "critic_loss.svg", eval::line_plot_svg("critic loss", "step", "loss", {loss}));
    eval::write_text(dir / "actor_objective.svg", eval::line_plot_svg("actor objective", "step", "objective", {obj}));
    eval::write_text(dir / "reward_terms.svg",
                     eval::line_plot_svg("reward terms per step", "step", "reward", {rs, ry, rl}));
  }
  if (!out.episodes.empty()) {
    eval::Series ret{"return", {}, {}, false};
    for (std::size_t i = 0; i < out.episodes.size(); ++i) {
      ret.x.push_back(static_cast<double>(i + 1));
      ret.y.push_back(out.episodes[i].ret);
    }
    eval::write_text(dir / "returns.svg", eval::line_plot_svg("episode return", "episode", "return", {ret}));
    const std::size_t n = std::max<std::size_t>(1, out.episodes.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      first += out.episodes[i].ret;
      last += out.episodes[out.episodes.size() - 1 - i].ret;
    }
    log << "[train-policy] mean return first 10% " << fixed(first / n) << ", last 10% " << fixed(last / n) << '\n';
  }
}

namespace {

std::vector<eval::ControllerSpec> controllers(const std::shared_ptr<const policy::Policy>& p) {
  return {eval::learned_controller(p), eval::rule_controller(), eval::reference_abs_controller(),
          eval::no_control()};
}

eval::CompareConfig compare_config(const RunConfig& cfg) {
  eval::CompareConfig c;
  c.repeats = cfg.repeats;
  c.seed = data::derive_seed(cfg.seed, 5, 0, 0);
  c.jobs = cfg.jobs;
  c.trial.reward = cfg.sac.reward;
  return c;
}

void log_rows(std::ostream& log, const std::vector<eval::ResultRow>& rows) {
  for (const auto& r : rows) {
    log << "[evaluate] " << r.controller << " / " << r.scenario << " @" << fixed(r.speed_kmh, 0) << ": dist "
        << fixed(r.dist_mean_m) << " m, dev " << fixed(r.dev_mean_deg) << " deg, lock-ups " << r.lockups << '/'
        << r.trials;
    if (r.failed > 0) log << ", " << r.failed << " failed (" << r.errors.front() << ")";
    log << '\n';
  }
}

}  // namespace

void run_evaluate(const RunConfig& cfg, std::ostream& log) {
  const auto p = require_policy(cfg);
  const auto dir = cfg.out / "eval";
  fs::create_directories(dir / "plots");
  const auto ctls = controllers(p);
  const auto cc = compare_config(cfg);
  const auto in_dist = sim::in_distribution_scenarios();
  const auto ood = sim::out_of_distribution_scenarios();
  const auto rows_in = eval::compare(ctls, in_dist, cc);
  eval::write_results_csv(rows_in, dir / "in_distribution.csv");
  log_rows(log, rows_in);
  const auto rows_ood = eval::compare(ctls, ood, cc);
  eval::write_results_csv(rows_ood, dir / "out_of_distribution.csv");
  log_rows(log, rows_ood);

  for (const auto* set : {&in_dist, &ood}) {
    const std::string tag = set == &in_dist ? "id" : "ood";
    for (std::size_t s = 0; s < set->size(); ++s) {
      const auto& sc = (*set)[s];
      for (const auto& c : ctls) {
        const auto m = eval::run_trial(c, sc, data::derive_seed(cc.seed, 31, s, 0), cc.trial);
        if (m.failed) continue;
        eval::write_text(dir / "plots" / (tag + "_" + sc.name + "_" + c.name + ".svg"),
                         eval::speed_plot_svg(c.name + " on " + sc.name + " @ " + fixed(sc.braking_speed_kmh, 0) +
                                                  " km/h",
                                              m.traces));
      }
    }
  }
}

std::vector<sim::ScenarioSpec> gap_scenarios() {
  auto s = sim::in_distribution_scenarios();
  for (auto& o : sim::out_of_distribution_scenarios()) s.push_back(std::move(o));
  return s;
}

void run_gap_report(const RunConfig& cfg, std::ostream& log) {
  const auto p = require_policy(cfg);
  const auto dir = cfg.out / "eval";
  fs::create_directories(dir);
  const auto rows = eval::gap_report(eval::learned_controller(p), gap_scenarios(), eval::Perturbation{},
                                     compare_config(cfg));
  eval::write_gap_csv(rows, dir / "gap_report.csv");
  for (const auto& r : rows) {
    log << "[gap-report] " << r.scenario << ": dist gap " << fixed(r.dist_gap_m()) << " m, dev gap "
        << fixed(r.dev_gap_deg()) << " deg\n";
  }
}

std::vector<StageResult> run(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  fs::create_directories(cfg.out);
  write_json(cfg.out / "config.json", ojson(cfg));

  const std::pair<Stage, void (*)(const RunConfig&, std::ostream&)> steps[] = {
      {Stage::kCollect, run_collect},       {Stage::kTrainModel, run_train_model},
      {Stage::kTrainPolicy, run_train_policy}, {Stage::kEvaluate, run_evaluate},
      {Stage::kGapReport, run_gap_report},
  };
  std::vector<StageResult> results;
  ojson timings = ojson::object();
  const auto timings_path = cfg.out / "timings.json";
  if (fs::exists(timings_path)) {
    try {
      std::ifstream in(timings_path);
      timings = ojson::parse(in);
    } catch (const nlohmann::json::exception&) {
      timings = ojson::object();
    }
  }
  for (const auto& [stage, fn] : steps) {
    if (cfg.stage != Stage::kAll && cfg.stage != stage) continue;
    Stopwatch sw;
    fn(cfg, log);
    const double s = sw.seconds();
    log << "[" << stage_name(stage) << "] " << fixed(s, 1) << " s\n" << std::flush;
    results.push_back({stage_name(stage), s});
    timings[stage_name(stage)] = s;
    write_json(timings_path, timings);
  }
  return results;
}

}  // namespace brakelab::pipeline

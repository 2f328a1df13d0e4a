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

#include "brakelab/data/dataset.hpp"

#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace brakelab::data {

namespace {

using json = nlohmann::ordered_json;

struct Cell {
  PolicyKind policy;
  std::string surface;
  sim::ScenarioSpec scenario;
  int run;
  std::uint64_t seed;
};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

const char* policy_name(PolicyKind p) { return p == PolicyKind::kRule ? "rule" : "random"; }

PolicyKind parse_policy(const std::string& s) {
  if (s == "rule") return PolicyKind::kRule;
  if (s == "random") return PolicyKind::kRandom;
  throw std::invalid_argument("unknown collection policy '" + s + "'");
}

WheelAction rule_wheel(std::optional<double> slip) {
  if (!slip) return WheelAction::kNoControl;
  const double e = *slip;
  if (e < 0.03) return WheelAction::kNoControl;
  if (e < 0.1) return WheelAction::kIncrease;
  if (e < 0.2) return WheelAction::kHold;
  return WheelAction::kDecrease;
}

JointAction rule_policy(const std::array<std::optional<double>, kNumWheels>& slips) {
  JointAction a{};
  for (int i = 0; i < kNumWheels; ++i) a[i] = rule_wheel(slips[i]);
  return a;
}

JointAction random_policy(std::mt19937_64& rng) { return decode(static_cast<int>(rng() % kNumActions)); }

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return splitmix(splitmix(splitmix(splitmix(master) ^ a) ^ b) ^ c);
}

Trajectory collect(const sim::ScenarioSpec& scenario, PolicyKind policy, std::uint64_t seed, const CollectConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> offset(-cfg.offset_range_m, cfg.offset_range_m);
  const double x0 = cfg.offset_range_m > 0.0 ? offset(rng) : 0.0;
  sim::Simulator sim = sim::make_simulator(scenario, cfg.params, x0);

  Trajectory traj;
  traj.scenario = scenario.name;
  traj.policy = policy_name(policy);
  traj.seed = seed;
  traj.onset_index = -1;
  const int max_steps = static_cast<int>(cfg.max_time_s / sim::kControlDt);
  for (int k = 0;; ++k) {
    const Observation obs = sim::sense(sim.state(), scenario.driver, cfg.noise, rng);
    const double t = k * sim::kControlDt;
    const bool braking = scenario.driver.braking(t);
    if (braking && traj.onset_index < 0) traj.onset_index = k;
    Record rec{t, obs, kAllNoControl};
    const bool done = braking && terminated(obs[ch::kV]);
    if (braking && !done) {
      rec.act = policy == PolicyKind::kRule ? rule_policy(wheel_slips(obs)) : random_policy(rng);
    }
    traj.records.push_back(rec);
    if (done) break;
    if (k >= max_steps) {
      throw sim::SimulationFault("scenario " + scenario.name + " did not terminate within " +
                                     std::to_string(cfg.max_time_s) + " s",
                                 sim.state().step);
    }
    sim.control_step(rec.act);
  }
  return traj;
}

Dataset collect_corpus(std::uint64_t seed, const CorpusConfig& cfg) {
  const std::pair<std::string, sim::ScenarioSpec> roads[] = {
      {"high", sim::high_adhesion_straight(cfg.speed_kmh)},
      {"low", sim::low_adhesion_straight(cfg.speed_kmh)},
      {"split", sim::split_friction_straight(cfg.speed_kmh)},
  };
  std::vector<Cell> cells;
  for (PolicyKind p : {PolicyKind::kRule, PolicyKind::kRandom}) {
    for (std::size_t r = 0; r < 3; ++r) {
      for (int run = 0; run < cfg.runs_per_cell; ++run) {
        cells.push_back({p, roads[r].first, roads[r].second, run,
                         derive_seed(seed, static_cast<std::uint64_t>(p), r, static_cast<std::uint64_t>(run))});
      }
    }
  }
  std::vector<Trajectory> out(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < cells.size(); i += stride) {
      try {
        out[i] = collect(cells[i].scenario, cells[i].policy, cells[i].seed, cfg.collect);
        out[i].surface = cells[i].surface;
        out[i].run = cells[i].run;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto jobs = static_cast<std::size_t>(std::max(1, cfg.jobs));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(work, j, jobs);
  work(0, jobs);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Dataset d;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    (cells[i].run == cfg.runs_per_cell - 1 ? d.val : d.train).push_back(std::move(out[i]));
  }
  return d;
}

void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << contents;
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void save_trajectory(const Trajectory& t, const std::filesystem::path& path) {
  std::ostringstream os;
  json header;
  header["schema"] = kTrajectorySchema;
  header["scenario"] = t.scenario;
  header["surface"] = t.surface;
  header["policy"] = t.policy;
  header["run"] = t.run;
  header["seed"] = t.seed;
  header["onset_index"] = t.onset_index;
  header["records"] = t.records.size();
  json names = json::array();
  for (int c = 0; c < ch::kCount; ++c) names.push_back(std::string(channel_name(c)));
  header["channels"] = names;
  os << header.dump() << '\n';
  for (const auto& r : t.records) {
    json line;
    line["t"] = r.t;
    line["obs"] = r.obs;
    json act = json::array();
    for (auto a : r.act) act.push_back(static_cast<int>(a));
    line["act"] = act;
    os << line.dump() << '\n';
  }
  write_atomic(path, os.str());
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open trajectory " + path.string());
  const std::string where = path.string();
  std::string line;
  if (!std::getline(in, line)) throw FormatError(where + ": empty file");
  Trajectory t;
  std::size_t expected = 0;
  try {
    const json h = json::parse(line);
    const auto schema = h.value("schema", std::string());
    if (schema != kTrajectorySchema) {
      throw FormatError(where + ": schema '" + schema + "' is not " + kTrajectorySchema);
    }
    t.scenario = h.at("scenario").get<std::string>();
    t.surface = h.at("surface").get<std::string>();
    t.policy = h.at("policy").get<std::string>();
    t.run = h.at("run").get<int>();
    t.seed = h.at("seed").get<std::uint64_t>();
    t.onset_index = h.at("onset_index").get<int>();
    expected = h.at("records").get<std::size_t>();
    if (h.at("channels").size() != static_cast<std::size_t>(ch::kCount)) {
      throw FormatError(where + ": header lists " + std::to_string(h.at("channels").size()) + " channels");
    }
  } catch (const json::exception& e) {
    throw FormatError(where + ": malformed header on line 1: " + e.what());
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::size_t index = t.records.size();
    try {
      const json j = json::parse(line);
      Record r;
      r.t = j.at("t").get<double>();
      const auto& obs = j.at("obs");
      const auto& act = j.at("act");
      if (obs.size() != static_cast<std::size_t>(ch::kCount) || act.size() != static_cast<std::size_t>(kNumWheels)) {
        throw FormatError("wrong field width");
      }
      for (int c = 0; c < ch::kCount; ++c) r.obs[c] = obs[static_cast<std::size_t>(c)].get<double>();
      for (int i = 0; i < kNumWheels; ++i) {
        const int a = act[static_cast<std::size_t>(i)].get<int>();
        if (a < 0 || a > 3) throw FormatError("action out of range");
        r.act[i] = static_cast<WheelAction>(a);
      }
      t.records.push_back(r);
    } catch (const std::exception& e) {
      throw FormatError(where + ": malformed record " + std::to_string(index) + " on line " + std::to_string(lineno) +
                        ": " + e.what());
    }
  }
  if (t.records.size() != expected) {
    throw FormatError(where + ": truncated at record " + std::to_string(t.records.size()) + " of " +
                      std::to_string(expected));
  }
  return t;
}

void save_dataset(const Dataset& d, const std::filesystem::path& root) {
  json manifest;
  manifest["schema"] = kDatasetSchema;
  for (const auto* split : {"train", "val"}) {
    const auto& list = std::string(split) == "train" ? d.train : d.val;
    json files = json::array();
    for (const auto& t : list) {
      const auto rel = std::filesystem::path(split) / (t.file_stem() + ".jsonl");
      save_trajectory(t, root / rel);
      files.push_back(rel.generic_string());
    }
    manifest[split] = files;
  }
  write_atomic(root / "dataset.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& root) {
  const auto path = root / "dataset.json";
  std::ifstream in(path);
  if (!in) throw FormatError("missing dataset manifest " + path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (manifest.value("schema", std::string()) != kDatasetSchema) {
    throw FormatError(path.string() + ": unsupported dataset schema");
  }
  Dataset d;
  for (const auto& f : manifest.at("train")) d.train.push_back(load_trajectory(root / f.get<std::string>()));
  for (const auto& f : manifest.at("val")) d.val.push_back(load_trajectory(root / f.get<std::string>()));
  return d;
}

}  // namespace brakelab::data

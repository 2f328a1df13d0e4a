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

#include "brakelab/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "brakelab/data/dataset.hpp"

namespace brakelab::eval {

namespace {

std::array<std::optional<double>, kNumWheels> latest_slips(const StackedState& s) {
  return wheel_slips(s.latest());
}

}  // namespace

JointAction RuleController::act(const StackedState& s) { return data::rule_policy(latest_slips(s)); }

JointAction reference_abs(const std::array<std::optional<double>, kNumWheels>& slips,
                          std::array<bool, kNumWheels>& latched) {
  JointAction a = kAllNoControl;
  for (int i = 0; i < kNumWheels; ++i) {
    if (!slips[i]) {
      latched[i] = false;
      continue;
    }
    const double eta = *slips[i];
    if (latched[i] && eta >= 0.10) {
      a[i] = WheelAction::kDecrease;
      continue;
    }
    latched[i] = false;
    if (eta > 0.15) {
      latched[i] = true;
      a[i] = WheelAction::kDecrease;
    } else if (eta >= 0.10) {
      a[i] = WheelAction::kHold;
    } else if (eta >= 0.03) {
      a[i] = WheelAction::kIncrease;
    } else {
      a[i] = WheelAction::kNoControl;
    }
  }
  return a;
}

JointAction ReferenceAbs::act(const StackedState& s) { return reference_abs(latest_slips(s), latched_); }

ControllerSpec no_control() {
  return {"no_control", [] { return std::make_unique<NoControl>(); }};
}

ControllerSpec rule_controller() {
  return {"rule", [] { return std::make_unique<RuleController>(); }};
}

ControllerSpec reference_abs_controller() {
  return {"reference_abs", [] { return std::make_unique<ReferenceAbs>(); }};
}

ControllerSpec learned_controller(std::shared_ptr<const policy::Policy> p, const std::string& name) {
  return {name, [p] { return std::make_unique<LearnedController>(p); }};
}

// ---------------------------------------------------------------- trials

bool detect_lockup(const Traces& tr, double v_min_kmh, double threshold, int steps) {
  for (int i = 0; i < kNumWheels; ++i) {
    int run = 0;
    for (std::size_t k = 0; k < tr.v.size(); ++k) {
      const double eta = tr.slip[i][k];
      if (tr.v[k] > v_min_kmh && std::isfinite(eta) && eta >= threshold) {
        if (++run >= steps) return true;
      } else {
        run = 0;
      }
    }
  }
  return false;
}

Metrics run_trial(const ControllerSpec& controller, const sim::ScenarioSpec& scenario, std::uint64_t seed,
                  const TrialConfig& cfg) {
  Metrics m;
  m.onset_index = -1;
  try {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> offset(-cfg.offset_range_m, cfg.offset_range_m);
    const double x0 = cfg.offset_range_m > 0.0 ? offset(rng) : 0.0;
    const auto& driver = scenario.driver;
    sim::SurfaceMap surface = scenario.surface();
    if (cfg.friction_scale != 1.0) surface = surface.scaled(cfg.friction_scale);
    sim::Simulator sim(cfg.params, surface, driver,
                       sim::initial_state(scenario.braking_speed_kmh, driver, cfg.params, x0));
    auto ctl = controller.make();
    const int h = std::max(1, ctl->history());
    const int max_steps = static_cast<int>(cfg.max_time_s / sim::kControlDt);

    std::vector<Observation> history;
    double psi_expected = 0.0;
    double r_prev = 0.0;
    double v_prev = 0.0;
    for (int k = 0;; ++k) {
      const auto& st = sim.state();
      history.push_back(cfg.noise.enabled() ? sim::sense(st, driver, cfg.noise, rng) : sim::sense(st, driver));
      const double t = k * sim::kControlDt;
      auto& tr = m.traces;
      tr.t.push_back(t);
      tr.v.push_back(st.v_kmh);
      tr.yaw_rate.push_back(st.yaw_rate);
      for (int i = 0; i < kNumWheels; ++i) {
        tr.w[i].push_back(st.wheel_kmh[i]);
        tr.p[i].push_back(st.pressure[i]);
        const auto eta = slip_ratio(st.v_kmh, st.wheel_kmh[i]);
        tr.slip[i].push_back(eta ? *eta : std::numeric_limits<double>::quiet_NaN());
      }

      const double r_now = expected_yaw_rate(st.v_kmh, driver.steering_angle(t), cfg.params);
      const bool braking = driver.braking(t);
      if (braking && m.onset_index < 0) {
        m.onset_index = k;
        psi_expected = st.heading;
      } else if (m.onset_index >= 0) {
        psi_expected += 0.5 * (r_prev + r_now) * sim::kControlDt;
        m.distance_m += 0.5 * (v_prev + st.v_kmh) / 3.6 * sim::kControlDt;
        const double dev = std::abs(st.heading - psi_expected) * 180.0 / std::numbers::pi;
        m.deviation_deg = dev;
        m.max_deviation_deg = std::max(m.max_deviation_deg, dev);
      }
      r_prev = r_now;
      v_prev = st.v_kmh;

      if (braking && terminated(st.v_kmh, cfg.reward)) break;
      if (k >= max_steps) {
        throw sim::SimulationFault(
            "scenario " + scenario.name + " did not stop within " + std::to_string(cfg.max_time_s) + " s", st.step);
      }
      JointAction a = kAllNoControl;
      if (braking) {
        const auto n = std::min<std::size_t>(history.size(), static_cast<std::size_t>(h));
        a = ctl->act(stack(std::span<const Observation>(history).last(n), h));
      }
      sim.control_step(a);
    }
    m.lockup = detect_lockup(m.traces, cfg.reward.v_eps_kmh + cfg.lockup_margin_kmh, cfg.lockup_slip,
                             cfg.lockup_steps);
  } catch (const std::exception& e) {
    m.failed = true;
    m.error = e.what();
  }
  return m;
}

// ---------------------------------------------------------------- tables

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = sd = 0.0;
  if (xs.empty()) {
    mean = sd = std::numeric_limits<double>::quiet_NaN();
    return;
  }
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return;
  for (double x : xs) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
}

template <class F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < n; i += stride) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto j = static_cast<std::size_t>(std::max(1, jobs));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < j; ++t) pool.emplace_back(work, t, j);
  work(0, j);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<ResultRow> compare(const std::vector<ControllerSpec>& controllers,
                               const std::vector<sim::ScenarioSpec>& scenarios, const CompareConfig& cfg) {
  if (controllers.empty() || scenarios.empty()) {
    throw std::invalid_argument("compare: need at least one controller and one scenario");
  }
  if (cfg.repeats < 1) throw std::invalid_argument("compare: repeats must be >= 1");
  const std::size_t nc = controllers.size(), ns = scenarios.size(), nr = static_cast<std::size_t>(cfg.repeats);
  std::vector<Metrics> results(nc * ns * nr);
  parallel_for(results.size(), cfg.jobs, [&](std::size_t i) {
    const std::size_t c = i / (ns * nr), s = (i / nr) % ns, r = i % nr;
    // Same seed for every controller, so rows are paired trial by trial.
    const auto seed = data::derive_seed(cfg.seed, 31, s, r);
    Metrics m = run_trial(controllers[c], scenarios[s], seed, cfg.trial);
    m.traces = {};
    results[i] = std::move(m);
  });

  std::vector<ResultRow> rows;
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t s = 0; s < ns; ++s) {
      ResultRow row;
      row.controller = controllers[c].name;
      row.scenario = scenarios[s].name;
      row.speed_kmh = scenarios[s].braking_speed_kmh;
      std::vector<double> dist, dev;
      for (std::size_t r = 0; r < nr; ++r) {
        const auto& m = results[(c * ns + s) * nr + r];
        if (m.failed) {
          ++row.failed;
          row.errors.push_back(m.error);
          continue;
        }
        ++row.trials;
        dist.push_back(m.distance_m);
        dev.push_back(m.deviation_deg);
        if (m.lockup) ++row.lockups;
      }
      mean_std(dist, row.dist_mean_m, row.dist_std_m);
      mean_std(dev, row.dev_mean_deg, row.dev_std_deg);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
  std::ostringstream s;
  s << "controller,scenario,speed_kmh,dist_mean_m,dist_std_m,dev_mean_deg,dev_std_deg,lockup\n";
  for (const auto& r : rows) {
    s << csv_field(r.controller) << ',' << csv_field(r.scenario) << ',' << fmt(r.speed_kmh) << ','
      << fmt(r.dist_mean_m) << ',' << fmt(r.dist_std_m) << ',' << fmt(r.dev_mean_deg) << ',' << fmt(r.dev_std_deg)
      << ',' << (r.lockups > 0 ? "yes" : "no") << '\n';
  }
  data::write_atomic(path, s.str());
}

TrialConfig Perturbation::apply(TrialConfig base) const {
  base.params.curb_mass_kg *= mass_scale;
  base.params.brake_gain_Nm_per_MPa *= brake_gain_scale;
  base.friction_scale *= friction_scale;
  return base;
}

std::vector<GapRow> gap_report(const ControllerSpec& controller, const std::vector<sim::ScenarioSpec>& scenarios,
                               const Perturbation& perturbation, const CompareConfig& cfg) {
  CompareConfig perturbed = cfg;
  perturbed.trial = perturbation.apply(cfg.trial);
  const auto nom = compare({controller}, scenarios, cfg);
  const auto per = compare({controller}, scenarios, perturbed);
  std::vector<GapRow> out;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    out.push_back({scenarios[i].name, scenarios[i].braking_speed_kmh, nom[i], per[i]});
  }
  return out;
}

void write_gap_csv(const std::vector<GapRow>& rows, const std::filesystem::path& path) {
  std::ostringstream s;
  s << "scenario,speed_kmh,dist_nominal_m,dist_perturbed_m,dist_gap_m,dev_nominal_deg,dev_perturbed_deg,"
       "dev_gap_deg,lockup_nominal,lockup_perturbed\n";
  for (const auto& r : rows) {
    s << csv_field(r.scenario) << ',' << fmt(r.speed_kmh) << ',' << fmt(r.nominal.dist_mean_m) << ','
      << fmt(r.perturbed.dist_mean_m) << ',' << fmt(r.dist_gap_m()) << ',' << fmt(r.nominal.dev_mean_deg) << ','
      << fmt(r.perturbed.dev_mean_deg) << ',' << fmt(r.dev_gap_deg()) << ','
      << (r.nominal.lockups > 0 ? "yes" : "no") << ',' << (r.perturbed.lockups > 0 ? "yes" : "no") << '\n';
  }
  data::write_atomic(path, s.str());
}

// ---------------------------------------------------------------- plots

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#111111", "#ff7f0e"};

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
  if (series.empty()) throw std::invalid_argument("plot: no series");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.empty()) throw std::invalid_argument("plot: trace '" + s.name + "' is empty");
    if (s.x.size() != s.y.size()) throw std::invalid_argument("plot: trace '" + s.name + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) {
    x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
  }
  if (x1 - x0 < 1e-12) x1 = x0 + 1.0;
  if (y1 - y0 < 1e-12) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  constexpr double W = 720, H = 420, L = 70, R = 150, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return T + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << escape(title) << "</text>\n"
    << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x0 + (x1 - x0) * i / 5.0, yv = y0 + (y1 - y0) * i / 5.0;
    o << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(T + ph + 18)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << tick(xv) << "</text>\n"
      << "<text x=\"" << num(L - 6) << "\" y=\"" << num(py(yv) + 4)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << tick(yv) << "</text>\n"
      << "<line x1=\"" << num(L) << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << num(L + pw) << "\" y2=\""
      << num(py(yv)) << "\" stroke=\"#ddd\"/>\n";
  }
  o << "<text x=\"" << num(L + pw / 2) << "\" y=\"" << num(H - 10)
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << escape(x_label) << "</text>\n"
    << "<text x=\"16\" y=\"" << num(T + ph / 2) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
    << "font-size=\"12\" transform=\"rotate(-90 16 " << num(T + ph / 2) << ")\">" << escape(y_label) << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % std::size(kPalette)];
    std::vector<std::string> runs(1);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        if (!runs.back().empty()) runs.emplace_back();
        continue;
      }
      runs.back() += num(px(s.x[i])) + "," + num(py(s.y[i])) + " ";
    }
    for (const auto& pts : runs) {
      if (pts.empty()) continue;
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
      if (s.dashed) o << " stroke-dasharray=\"6 4\"";
      o << " points=\"" << pts << "\"/>\n";
    }
    const double ly = T + 14 + 18.0 * static_cast<double>(si);
    o << "<line x1=\"" << num(L + pw + 12) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(L + pw + 40) << "\" y2=\""
      << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"1.5\"" << (s.dashed ? " stroke-dasharray=\"6 4\"" : "")
      << "/>\n"
      << "<text x=\"" << num(L + pw + 46) << "\" y=\"" << num(ly + 4)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string speed_plot_svg(const std::string& title, const Traces& tr) {
  static const char* names[] = {"w_fl", "w_fr", "w_rl", "w_rr"};
  std::vector<Series> s;
  for (int i = 0; i < kNumWheels; ++i) {
    if (tr.w[i].empty()) throw std::invalid_argument(std::string("plot: trace '") + names[i] + "' is empty");
    s.push_back({names[i], tr.t, tr.w[i], false});
  }
  if (tr.v.empty()) throw std::invalid_argument("plot: trace 'v' is empty");
  s.push_back({"v", tr.t, tr.v, true});
  return line_plot_svg(title, "time (s)", "speed (km/h)", s);
}

void write_text(const std::filesystem::path& path, const std::string& text) { data::write_atomic(path, text); }

}  // namespace brakelab::eval

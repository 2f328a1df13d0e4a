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
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "brakelab/eval/eval.hpp"

namespace brakelab::eval {
namespace {

namespace fs = std::filesystem;

using Slips = std::array<std::optional<double>, kNumWheels>;

TrialConfig quiet() {
  TrialConfig c;
  c.noise = {};
  c.offset_range_m = 0.0;
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Minimal well-formedness check: every element is closed in order.
bool balanced_xml(const std::string& doc) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  while ((i = doc.find('<', i)) != std::string::npos) {
    const std::size_t j = doc.find('>', i);
    if (j == std::string::npos) return false;
    const std::string tag = doc.substr(i + 1, j - i - 1);
    i = j + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?') continue;
    if (tag.back() == '/') continue;
    const std::string name = tag.substr(tag[0] == '/' ? 1 : 0, tag.find_first_of(" \t\n") - (tag[0] == '/' ? 1 : 0));
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != name) return false;
      stack.pop_back();
    } else {
      stack.push_back(name);
    }
  }
  return stack.empty();
}

// ------------------------------------------------------------ reference ABS

TEST(ReferenceAbs, BandsAndLatch) {
  std::array<bool, kNumWheels> latch{};
  Slips s{0.05, 0.3, 0.12, 0.01};
  JointAction a = reference_abs(s, latch);
  EXPECT_EQ(a[0], WheelAction::kIncrease);
  EXPECT_EQ(a[1], WheelAction::kDecrease);
  EXPECT_EQ(a[2], WheelAction::kHold);
  EXPECT_EQ(a[3], WheelAction::kNoControl);
  EXPECT_FALSE(latch[0]);
  EXPECT_TRUE(latch[1]);
  EXPECT_FALSE(latch[2]);

  // Hand trace of wheel 1: 0.3 -> 0.12 -> 0.10 -> 0.09 -> 0.12.
  const WheelAction expect[] = {WheelAction::kDecrease, WheelAction::kDecrease, WheelAction::kIncrease,
                                WheelAction::kHold};
  const double eta[] = {0.12, 0.10, 0.09, 0.12};
  const bool latched_after[] = {true, true, false, false};
  for (int k = 0; k < 4; ++k) {
    s = {0.05, eta[k], 0.05, 0.05};
    a = reference_abs(s, latch);
    EXPECT_EQ(a[1], expect[k]) << "step " << k;
    EXPECT_EQ(latch[1], latched_after[k]) << "step " << k;
  }
}

TEST(ReferenceAbs, UndefinedSlipReleasesLatch) {
  std::array<bool, kNumWheels> latch{true, true, true, true};
  const Slips s{std::nullopt, std::nullopt, 0.2, 0.02};
  const JointAction a = reference_abs(s, latch);
  EXPECT_EQ(a[0], WheelAction::kNoControl);
  EXPECT_FALSE(latch[0]);
  EXPECT_EQ(a[2], WheelAction::kDecrease);
  EXPECT_EQ(a[3], WheelAction::kNoControl);
  EXPECT_FALSE(latch[3]);
}

// ------------------------------------------------------------ trials

TEST(RunTrial, NoControlStraightHasNoDeviation) {
  const auto m = run_trial(no_control(), sim::high_adhesion_straight(), 1, quiet());
  ASSERT_FALSE(m.failed) << m.error;
  EXPECT_LT(m.deviation_deg, 1e-6);
  EXPECT_GT(m.distance_m, 0.0);
  EXPECT_EQ(m.traces.v.size(), m.traces.t.size());
  EXPECT_LE(m.traces.v.back(), RewardConfig{}.v_eps_kmh);
}

TEST(RunTrial, NoControlOnSplitLocksAndSpins) {
  const auto split = run_trial(no_control(), sim::split_friction_straight(), 1);
  const auto high = run_trial(no_control(), sim::high_adhesion_straight(), 1);
  ASSERT_FALSE(split.failed || high.failed);
  EXPECT_TRUE(split.lockup);
  EXPECT_GT(split.deviation_deg, 90.0);
  EXPECT_GT(split.deviation_deg, 1000.0 * std::max(high.deviation_deg, 1e-3));
}

TEST(RunTrial, RepeatableForFixedSeed) {
  const auto a = run_trial(reference_abs_controller(), sim::low_adhesion_straight(), 9);
  const auto b = run_trial(reference_abs_controller(), sim::low_adhesion_straight(), 9);
  EXPECT_EQ(a.distance_m, b.distance_m);
  EXPECT_EQ(a.deviation_deg, b.deviation_deg);
  EXPECT_EQ(a.lockup, b.lockup);
  EXPECT_EQ(a.traces.v, b.traces.v);
  EXPECT_EQ(a.traces.w[2], b.traces.w[2]);
}

TEST(RunTrial, DistanceIsTrapezoidFromOnset) {
  const auto m = run_trial(no_control(), sim::high_adhesion_straight(), 2, quiet());
  ASSERT_FALSE(m.failed);
  double d = 0.0;
  for (std::size_t k = static_cast<std::size_t>(m.onset_index) + 1; k < m.traces.v.size(); ++k) {
    d += 0.5 * (m.traces.v[k] + m.traces.v[k - 1]) / 3.6 * (m.traces.t[k] - m.traces.t[k - 1]);
  }
  EXPECT_NEAR(m.distance_m, d, 1e-9);
}

TEST(RunTrial, DistanceFallsAsPeakFrictionRises) {
  double prev = std::numeric_limits<double>::infinity();
  for (double scale : {0.5, 0.7, 0.85, 1.0}) {
    TrialConfig c = quiet();
    c.friction_scale = scale;
    const auto m = run_trial(no_control(), sim::high_adhesion_straight(), 3, c);
    ASSERT_FALSE(m.failed);
    EXPECT_LT(m.distance_m, prev) << "scale " << scale;
    prev = m.distance_m;
  }
}

TEST(RunTrial, MirroredSplitGivesEqualDeviation) {
  const auto s = sim::split_friction_straight();
  for (const auto& ctl : {no_control(), reference_abs_controller()}) {
    const auto a = run_trial(ctl, s, 4, quiet());
    const auto b = run_trial(ctl, s.mirrored(), 4, quiet());
    ASSERT_FALSE(a.failed || b.failed);
    EXPECT_NEAR(a.deviation_deg, b.deviation_deg, 1e-6 * std::max(1.0, a.deviation_deg)) << ctl.name;
    EXPECT_NEAR(a.distance_m, b.distance_m, 1e-9) << ctl.name;
  }
}

TEST(RunTrial, TimeoutIsReportedAsFailure) {
  TrialConfig c = quiet();
  c.max_time_s = 0.5;
  const auto m = run_trial(no_control(), sim::low_adhesion_straight(), 5, c);
  EXPECT_TRUE(m.failed);
  EXPECT_NE(m.error.find("low_adhesion_straight"), std::string::npos);
}

TEST(Lockup, RaisingThresholdOnlyClearsFlags) {
  for (const auto& s : sim::out_of_distribution_scenarios()) {
    const auto m = run_trial(rule_controller(), s, 6);
    ASSERT_FALSE(m.failed);
    bool prev = true;
    for (double th : {0.5, 0.8, 0.95, 0.99, 1.0}) {
      const bool f = detect_lockup(m.traces, 7.0, th, 5);
      EXPECT_TRUE(prev || !f) << s.name << " threshold " << th;
      prev = f;
    }
  }
}

TEST(Lockup, NeedsConsecutiveSamplesAboveSpeed) {
  Traces tr;
  for (int k = 0; k < 10; ++k) {
    tr.t.push_back(0.02 * k);
    tr.v.push_back(k < 8 ? 30.0 : 5.0);
    for (int i = 0; i < kNumWheels; ++i) tr.slip[i].push_back(0.0);
  }
  for (int k : {0, 1, 2, 3, 5, 6, 7, 8, 9}) tr.slip[1][static_cast<std::size_t>(k)] = 1.0;
  EXPECT_FALSE(detect_lockup(tr, 7.0, 0.95, 5));  // 4 + gap + 3 above speed
  EXPECT_TRUE(detect_lockup(tr, 7.0, 0.95, 4));
  EXPECT_TRUE(detect_lockup(tr, 0.0, 0.95, 5));
}

// ------------------------------------------------------------ tables

TEST(Compare, SingleRepeatHasZeroSpread) {
  CompareConfig c;
  c.repeats = 1;
  const auto rows = compare({rule_controller()}, {sim::high_adhesion_straight()}, c);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].dist_std_m, 0.0);
  EXPECT_EQ(rows[0].dev_std_deg, 0.0);
  EXPECT_EQ(rows[0].trials, 1);
}

TEST(Compare, RowPerControllerAndScenario) {
  CompareConfig c;
  c.repeats = 2;
  c.jobs = 2;
  const auto scen = sim::in_distribution_scenarios();
  const auto rows = compare({no_control(), rule_controller(), reference_abs_controller()}, scen, c);
  ASSERT_EQ(rows.size(), 9u);
  EXPECT_EQ(rows[0].controller, "no_control");
  EXPECT_EQ(rows[4].controller, "rule");
  EXPECT_EQ(rows[4].scenario, scen[1].name);
  for (const auto& r : rows) {
    EXPECT_EQ(r.trials, 2);
    EXPECT_GE(r.dist_mean_m, 0.0);
    EXPECT_GE(r.dev_mean_deg, 0.0);
  }
  c.jobs = 1;
  const auto serial = compare({no_control(), rule_controller(), reference_abs_controller()}, scen, c);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].dist_mean_m, serial[i].dist_mean_m);
}

TEST(Compare, FailedTrialsAreExcludedAndCounted) {
  CompareConfig c;
  c.repeats = 3;
  c.trial.max_time_s = 0.5;
  const auto rows = compare({no_control()}, {sim::low_adhesion_straight()}, c);
  EXPECT_EQ(rows[0].failed, 3);
  EXPECT_EQ(rows[0].trials, 0);
  EXPECT_TRUE(std::isnan(rows[0].dist_mean_m));
  EXPECT_EQ(rows[0].errors.size(), 3u);
}

TEST(Compare, RejectsEmptyInputs) {
  EXPECT_THROW(compare({}, {sim::high_adhesion_straight()}), std::invalid_argument);
  EXPECT_THROW(compare({no_control()}, {}), std::invalid_argument);
}

TEST(Compare, CsvLayout) {
  CompareConfig c;
  c.repeats = 1;
  const auto rows = compare({no_control(), rule_controller()}, {sim::split_friction_straight()}, c);
  const auto path = fs::path(::testing::TempDir()) / "results.csv";
  write_results_csv(rows, path);
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "controller,scenario,speed_kmh,dist_mean_m,dist_std_m,dev_mean_deg,dev_std_deg,lockup");
  std::getline(in, line);
  EXPECT_TRUE(std::regex_match(line, std::regex(R"(no_control,split_friction_straight,40\.0000,[0-9.]+,0\.0000,[0-9.]+,0\.0000,yes)")))
      << line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 1);
}

TEST(GapReport, ZeroPerturbationHasZeroGaps) {
  CompareConfig c;
  c.repeats = 2;
  const auto scen = sim::out_of_distribution_scenarios();
  const auto rows = gap_report(reference_abs_controller(), scen, Perturbation::none(), c);
  ASSERT_EQ(rows.size(), scen.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].scenario, scen[i].name);
    EXPECT_EQ(rows[i].dist_gap_m(), 0.0);
    EXPECT_EQ(rows[i].dev_gap_deg(), 0.0);
  }
}

TEST(GapReport, DefaultPerturbationIsSignedAndWritten) {
  CompareConfig c;
  c.repeats = 1;
  const auto rows = gap_report(no_control(), {sim::high_adhesion_straight()}, Perturbation{}, c);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_GT(rows[0].dist_gap_m(), 0.0);  // heavier car, less grip
  const TrialConfig t = Perturbation{}.apply(TrialConfig{});
  EXPECT_DOUBLE_EQ(t.params.curb_mass_kg, 1.1 * sim::VehicleParams{}.curb_mass_kg);
  EXPECT_DOUBLE_EQ(t.params.brake_gain_Nm_per_MPa, 0.9 * sim::VehicleParams{}.brake_gain_Nm_per_MPa);
  EXPECT_DOUBLE_EQ(t.friction_scale, 0.85);
  const auto path = fs::path(::testing::TempDir()) / "gap.csv";
  write_gap_csv(rows, path);
  const auto text = read_file(path);
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "scenario,speed_kmh,dist_nominal_m,dist_perturbed_m,dist_gap_m,dev_nominal_deg,dev_perturbed_deg,"
            "dev_gap_deg,lockup_nominal,lockup_perturbed");
}

// ------------------------------------------------------------ plots

TEST(Plots, SpeedPlotIsWellFormedWithOneSamplePerStep) {
  const auto m = run_trial(rule_controller(), sim::low_adhesion_straight(), 7);
  const auto svg = speed_plot_svg("low <adhesion> & 40 km/h", m.traces);
  EXPECT_TRUE(balanced_xml(svg));
  EXPECT_NE(svg.find("&lt;adhesion&gt; &amp;"), std::string::npos);
  std::smatch match;
  ASSERT_TRUE(std::regex_search(svg, match, std::regex("stroke-dasharray=\"6 4\" points=\"([^\"]*)\"")));
  const std::string pts = match[1];
  EXPECT_EQ(static_cast<std::size_t>(std::count(pts.begin(), pts.end(), ',')), m.traces.v.size());
  std::size_t solid = 0;
  for (std::size_t p = 0; (p = svg.find("<polyline", p)) != std::string::npos; ++p) ++solid;
  EXPECT_EQ(solid, 5u);
}

TEST(Plots, EmptyWheelTraceIsNamed) {
  Traces tr;
  tr.t = {0.0, 0.02};
  tr.v = {10.0, 9.0};
  tr.w[0] = tr.w[1] = tr.w[3] = {10.0, 9.0};
  try {
    speed_plot_svg("x", tr);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("w_rl"), std::string::npos);
  }
}

TEST(Plots, NonFiniteSamplesSplitTheLine) {
  const Series s{"loss", {1, 2, 3, 4, 5}, {1.0, std::nan(""), 2.0, 3.0, 2.5}, false};
  const auto svg = line_plot_svg("curve", "step", "loss", {s});
  EXPECT_TRUE(balanced_xml(svg));
  std::size_t lines = 0;
  for (std::size_t p = 0; (p = svg.find("<polyline", p)) != std::string::npos; ++p) ++lines;
  EXPECT_EQ(lines, 2u);
}

}  // namespace
}  // namespace brakelab::eval

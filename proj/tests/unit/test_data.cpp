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
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "brakelab/data/dataset.hpp"

namespace brakelab::data {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("brakelab_data_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(RulePolicy, BandEdges) {
  EXPECT_EQ(rule_wheel(0.02), WheelAction::kNoControl);
  EXPECT_EQ(rule_wheel(0.03), WheelAction::kIncrease);
  EXPECT_EQ(rule_wheel(0.0999), WheelAction::kIncrease);
  EXPECT_EQ(rule_wheel(0.1), WheelAction::kHold);
  EXPECT_EQ(rule_wheel(0.1999), WheelAction::kHold);
  EXPECT_EQ(rule_wheel(0.2), WheelAction::kDecrease);
  EXPECT_EQ(rule_wheel(0.5), WheelAction::kDecrease);
  EXPECT_EQ(rule_wheel(std::nullopt), WheelAction::kNoControl);
  const JointAction a = rule_policy({0.02, 0.05, 0.15, 0.9});
  EXPECT_EQ(a, (JointAction{WheelAction::kNoControl, WheelAction::kIncrease, WheelAction::kHold, WheelAction::kDecrease}));
}

TEST(RandomPolicy, SeededSequenceRepeats) {
  std::mt19937_64 a(17);
  std::mt19937_64 b(17);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(random_policy(a), random_policy(b));
}

TEST(RandomPolicy, JointAndMarginalFrequenciesAreUniform) {
  std::mt19937_64 rng(2024);
  constexpr int kDraws = 1000000;
  std::vector<long> joint(kNumActions, 0);
  std::array<std::array<long, 4>, kNumWheels> marginal{};
  for (int i = 0; i < kDraws; ++i) {
    const JointAction a = random_policy(rng);
    ++joint[static_cast<std::size_t>(encode(a))];
    for (int w = 0; w < kNumWheels; ++w) ++marginal[w][static_cast<std::size_t>(a[w])];
  }
  const double p = 1.0 / kNumActions;
  const double sigma = std::sqrt(kDraws * p * (1 - p));
  double chi2 = 0.0;
  for (long c : joint) {
    EXPECT_LT(std::fabs(c - kDraws * p), 5 * sigma);
    chi2 += (c - kDraws * p) * (c - kDraws * p) / (kDraws * p);
  }
  // 255 degrees of freedom: mean 255, sd ~22.6.
  EXPECT_LT(chi2, 255 + 5 * 22.6);
  const double sigma_m = std::sqrt(kDraws * 0.25 * 0.75);
  for (const auto& m : marginal) {
    for (long c : m) EXPECT_LT(std::fabs(c - kDraws * 0.25), 5 * sigma_m);
  }
}

TEST(Collect, RuleRunTerminates) {
  const Trajectory t = collect(sim::high_adhesion_straight(), PolicyKind::kRule, 0);
  ASSERT_FALSE(t.records.empty());
  EXPECT_TRUE(terminated(t.records.back().obs[ch::kV]));
  for (std::size_t k = 0; k + 1 < t.records.size(); ++k) EXPECT_FALSE(terminated(t.records[k].obs[ch::kV]) && static_cast<int>(k) >= t.onset_index);
}

TEST(Collect, RandomValvesSlipOnIce) {
  sim::ScenarioSpec icy = sim::high_adhesion_straight();
  icy.base_triple = sim::kIcy;
  const Trajectory t = collect(icy, PolicyKind::kRandom, 3);
  bool slipped = false;
  for (const auto& r : t.records) {
    for (auto s : wheel_slips(r.obs)) slipped = slipped || (s && *s > 0.2);
  }
  EXPECT_TRUE(slipped);
}

TEST(Collect, IdenticalArgumentsGiveIdenticalFiles) {
  const auto dir = scratch("identical");
  save_trajectory(collect(sim::split_friction_straight(), PolicyKind::kRandom, 5), dir / "a.jsonl");
  save_trajectory(collect(sim::split_friction_straight(), PolicyKind::kRandom, 5), dir / "b.jsonl");
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  fs::remove_all(dir);
}

class CorpusTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { corpus_ = new Dataset(collect_corpus(0)); }
  static void TearDownTestSuite() {
    delete corpus_;
    corpus_ = nullptr;
  }
  static Dataset* corpus_;
};
Dataset* CorpusTest::corpus_ = nullptr;

TEST_F(CorpusTest, ThirtySixTrajectoriesSplitFiveToOne) {
  EXPECT_EQ(corpus_->train.size(), 30u);
  EXPECT_EQ(corpus_->val.size(), 6u);
  std::set<std::string> stems;
  for (const auto* split : {&corpus_->train, &corpus_->val}) {
    for (const auto& t : *split) stems.insert(t.file_stem());
  }
  EXPECT_EQ(stems.size(), 36u);
  for (const auto& t : corpus_->val) EXPECT_EQ(t.run, 5);
}

TEST_F(CorpusTest, RecordsAreTwentyMillisecondsApart) {
  for (const auto& t : corpus_->train) {
    for (std::size_t k = 0; k < t.records.size(); ++k) EXPECT_DOUBLE_EQ(t.records[k].t, k * 0.02);
  }
}

TEST_F(CorpusTest, RuleActionsReplayFromRecordedObservations) {
  for (const auto* split : {&corpus_->train, &corpus_->val}) {
    for (const auto& t : *split) {
      if (t.policy != "rule") continue;
      for (std::size_t k = static_cast<std::size_t>(t.onset_index); k + 1 < t.records.size(); ++k) {
        ASSERT_EQ(t.records[k].act, rule_policy(wheel_slips(t.records[k].obs))) << t.file_stem() << " step " << k;
      }
    }
  }
}

TEST_F(CorpusTest, BrakePedalAlignsWithOnset) {
  for (const auto& t : corpus_->train) {
    for (std::size_t k = 0; k < t.records.size(); ++k) {
      const double f = t.records[k].obs[ch::kBrakeForce];
      if (static_cast<int>(k) < t.onset_index) {
        EXPECT_EQ(f, 0.0);
        EXPECT_EQ(t.records[k].act, kAllNoControl);
      } else {
        EXPECT_GE(f, 500.0);
      }
    }
  }
}

TEST_F(CorpusTest, SaveLoadRoundTrip) {
  const auto dir = scratch("roundtrip");
  save_dataset(*corpus_, dir);
  EXPECT_TRUE(fs::exists(dir / "train" / "rule_high_0.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "val" / "random_split_5.jsonl"));
  EXPECT_EQ(load_dataset(dir), *corpus_);
  fs::remove_all(dir);
}

TEST(DatasetFile, EmptyDatasetIsValid) {
  const auto dir = scratch("empty");
  save_dataset(Dataset{}, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.size(), 0u);
  fs::remove_all(dir);
}

TEST(DatasetFile, TruncatedFileNamesRecord) {
  const auto dir = scratch("truncated");
  const Trajectory t = collect(sim::high_adhesion_straight(), PolicyKind::kRule, 1);
  save_trajectory(t, dir / "t.jsonl");
  const std::string full = slurp(dir / "t.jsonl");
  std::size_t cut = 0;
  for (int lines = 0; lines < 11; ++lines) cut = full.find('\n', cut) + 1;
  {
    std::ofstream out(dir / "t.jsonl", std::ios::binary | std::ios::trunc);
    out << full.substr(0, cut + 20);  // ten whole records and part of the eleventh
  }
  try {
    load_trajectory(dir / "t.jsonl");
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("record 10"), std::string::npos) << e.what();
  }
  {
    std::ofstream out(dir / "t.jsonl", std::ios::binary | std::ios::trunc);
    out << full.substr(0, cut);
  }
  try {
    load_trajectory(dir / "t.jsonl");
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("record 10"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(DatasetFile, SchemaMismatchIsRejected) {
  const auto dir = scratch("schema");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "t.jsonl");
    out << R"({"schema":"brakelab.trajectory/0","records":0})" << '\n';
  }
  EXPECT_THROW(load_trajectory(dir / "t.jsonl"), FormatError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace brakelab::data

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
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "brakelab/nn/nn.hpp"

namespace brakelab {
namespace {

using nn::Matrix;
using nn::Parameter;
using nn::Tape;

TEST(GruCell, ZeroWeightsGiveZeroState) {
  nn::GruLayer<double> gru("gru", 3, 4);  // all zero by construction
  Tape<double> t(false);
  Matrix<double> x(2, 3);
  x << 1.0, -2.0, 0.5, 3.0, 0.1, -0.4;
  auto h = nn::gru_cell(t.constant(x), t.constant(Matrix<double>::Zero(2, 4)), t.parameter(gru.wx),
                        t.parameter(gru.wh), t.parameter(gru.b));
  EXPECT_TRUE(h.value().isZero(0.0));
}

TEST(GruCell, MatchesHandTraceOfSingleNeuron) {
  nn::GruLayer<double> gru("gru", 1, 1);
  gru.wx.value << 0.4, -0.7, 1.1;
  gru.wh.value << 0.2, 0.5, -0.9;
  gru.b.value << 0.1, -0.2, 0.05;
  Tape<double> t(false);
  Matrix<double> x(1, 1), h(1, 1);
  x << 0.5;
  h << -0.3;
  auto out = nn::gru_cell(t.constant(x), t.constant(h), t.parameter(gru.wx), t.parameter(gru.wh),
                          t.parameter(gru.b));
  // r = 0.5597136, z = 0.3318122, n = 0.6358183 traced at 30 digits.
  EXPECT_NEAR(out.value()(0, 0), 0.325302313602819036624271041986, 1e-15);
}

TEST(GruCell, ZeroInputIterationConverges) {
  std::mt19937_64 rng(3);
  nn::GruLayer<double> gru("gru", 2, 6);
  gru.init(rng);
  Tape<double> t(false);
  auto wx = t.parameter(gru.wx);
  auto wh = t.parameter(gru.wh);
  auto b = t.parameter(gru.b);
  Matrix<double> h = Matrix<double>::Constant(1, 6, 0.8);
  const Matrix<double> zero = Matrix<double>::Zero(1, 2);
  double last_step = 0.0;
  for (int i = 0; i < 400; ++i) {
    Matrix<double> next = nn::gru_cell(t.constant(zero), t.constant(h), wx, wh, b).value();
    last_step = (next - h).cwiseAbs().maxCoeff();
    h = next;
  }
  EXPECT_LT(last_step, 1e-8);
}

TEST(GaussianNll, UnitSigmaAtMean) {
  Tape<double> t(false);
  Matrix<double> mu(1, 3);
  mu << 0.3, -1.0, 2.0;
  auto nll = nn::gaussian_nll(t.constant(mu), t.constant(Matrix<double>::Zero(1, 3)), mu);
  EXPECT_NEAR(nll.value()(0, 0), 3 * 0.918938533204672741780329736406, 1e-14);
}

TEST(GaussianNll, DoublingSigmaAddsLog2PerDimension) {
  Tape<double> t(false);
  Matrix<double> mu = Matrix<double>::Constant(1, 4, 0.7);
  Matrix<double> ls = Matrix<double>::Constant(1, 4, -0.4);
  Matrix<double> ls2 = (ls.array() + std::log(2.0)).matrix();
  const double a = nn::gaussian_nll(t.constant(mu), t.constant(ls), mu).value()(0, 0);
  const double b = nn::gaussian_nll(t.constant(mu), t.constant(ls2), mu).value()(0, 0);
  EXPECT_NEAR(b - a, 4 * std::log(2.0), 1e-13);
}

TEST(GaussianNll, MeanGradientVanishesAtTarget) {
  Parameter<double> mu("mu", 1, 2);
  mu.value << 1.0, -3.0;
  Tape<double> t;
  auto nll = nn::gaussian_nll(t.parameter(mu), t.constant(Matrix<double>::Constant(1, 2, 0.3)), mu.value);
  t.backward(nn::sum(nll));
  EXPECT_TRUE(mu.grad.isZero(0.0));
}

TEST(GaussianNll, BoundedBelowByClamp) {
  // Smallest admissible sigma, exact mean: the floor D * (0.5 ln 2pi + logstd_min).
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 3.0);
  const double floor = 2 * (0.5 * std::log(2 * std::numbers::pi) + nn::kLogStdMin);
  for (int i = 0; i < 200; ++i) {
    Matrix<double> raw(1, 4), target(1, 2);
    for (int k = 0; k < 4; ++k) raw(0, k) = n(rng);
    target << n(rng), n(rng);
    Tape<double> t(false);
    auto head = nn::gaussian_head(t.constant(raw));
    EXPECT_GE(nn::gaussian_nll(head.mean, head.log_std, target).value()(0, 0), floor - 1e-12);
  }
}

TEST(GaussianHead, LogStdIsClamped) {
  Tape<double> t(false);
  Matrix<double> raw(1, 4);
  raw << 0.0, 0.0, -9.0, 7.0;
  auto head = nn::gaussian_head(t.constant(raw));
  EXPECT_EQ(head.log_std.value()(0, 0), nn::kLogStdMin);
  EXPECT_EQ(head.log_std.value()(0, 1), nn::kLogStdMax);
  EXPECT_GT(std::exp(head.log_std.value()(0, 0)), 0.0);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameter<double> p("p", 2, 2);
  p.value << 1, 2, 3, 4;
  const Matrix<double> before = p.value;
  nn::Adam<double> opt({&p}, {.lr = 0.1});
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_EQ(p.value, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("p", 1, 3);
  p.value << 0.0, 1.0, -2.0;
  p.grad << 0.3, -40.0, 1e-3;
  nn::Adam<double> opt({&p}, {.lr = 0.01});
  opt.step();
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(p.value(0, 0), -0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value(0, 1), 1.0 + 0.01 * 40.0 / (40.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value(0, 2), -2.0 - 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
}

TEST(Adam, IdenticalStateGivesIdenticalResult) {
  auto run = [] {
    Parameter<double> p("p", 2, 3);
    p.value.setConstant(0.5);
    nn::Adam<double> opt({&p}, {.lr = 0.05});
    for (int i = 0; i < 10; ++i) {
      p.grad = (p.value.array() * p.value.array() - 0.1 * i).matrix();
      opt.step();
    }
    return p.value;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, MinimizesQuadratic) {
  Parameter<double> p("p", 1, 2);
  p.value << 3.0, -2.0;
  nn::Adam<double> opt({&p}, {.lr = 0.05});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    Tape<double> t;
    t.backward(nn::sum(nn::square(nn::add_scalar(t.parameter(p), -1.0))));
    opt.step();
  }
  EXPECT_NEAR(p.value(0, 0), 1.0, 1e-3);
  EXPECT_NEAR(p.value(0, 1), 1.0, 1e-3);
}

TEST(Dropout, RateZeroAndInferenceAreIdentity) {
  std::mt19937_64 rng(1);
  Tape<double> t(false);
  Matrix<double> x = Matrix<double>::Random(4, 5);
  auto v = t.constant(x);
  EXPECT_EQ(nn::dropout(v, 0.0, rng, true).value(), x);
  EXPECT_EQ(nn::dropout(v, 0.5, rng, false).value(), x);
}

TEST(Dropout, SurvivorFractionMatchesRate) {
  std::mt19937_64 rng(2024);
  Tape<double> t(false);
  auto v = t.constant(Matrix<double>::Ones(1000, 1000));
  const auto& out = nn::dropout(v, 0.1, rng, true).value();
  const double survivors = static_cast<double>((out.array() != 0.0).count()) / 1e6;
  EXPECT_NEAR(survivors, 0.9, 0.002);
  EXPECT_NEAR(out.maxCoeff(), 1.0 / 0.9, 1e-12);
}

TEST(Dropout, RejectsRateOfOne) {
  std::mt19937_64 rng(1);
  Tape<double> t(false);
  auto v = t.constant(Matrix<double>::Ones(1, 1));
  EXPECT_THROW(nn::dropout(v, 1.0, rng, true), std::invalid_argument);
}

TEST(NetworkSpec, Validation) {
  nn::NetworkSpec ok{32, {64, 64}, nn::Activation::kRelu, 0.1};
  EXPECT_NO_THROW(ok.validate());
  nn::NetworkSpec bad_width{32, {64, 0}, nn::Activation::kRelu, 0.1};
  EXPECT_THROW(bad_width.validate(), std::invalid_argument);
  nn::NetworkSpec bad_drop{32, {64}, nn::Activation::kRelu, 1.0};
  EXPECT_THROW(bad_drop.validate(), std::invalid_argument);
}

TEST(Tape, NonFiniteValuesAreRejected) {
  Tape<double> t(false);
  Matrix<double> x(1, 1);
  x << 1000.0;
  EXPECT_THROW(nn::exp(t.constant(x)), nn::NumericalError);
}

TEST(Tape, ShapeMismatchIsReported) {
  Tape<double> t(false);
  auto a = t.constant(Matrix<double>::Ones(2, 3));
  auto b = t.constant(Matrix<double>::Ones(3, 2));
  EXPECT_THROW(nn::add(a, b), nn::ShapeError);
  EXPECT_THROW(nn::matmul(a, a), nn::ShapeError);
}

TEST(Mlp, InferenceIsBitReproducible) {
  std::mt19937_64 rng(9);
  nn::Mlp<float> net("net", 8, {16, 16}, 4, nn::Activation::kRelu, 0.1);
  net.init(rng);
  Matrix<float> x = Matrix<float>::Random(5, 8);
  auto run = [&] {
    Tape<float> t(false);
    return Matrix<float>(net.forward(t, t.constant(x)).value());
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripsAndValidatesShapes) {
  std::mt19937_64 rng(12);
  nn::Mlp<float> net("net", 3, {5}, 2, nn::Activation::kTanh, 0.0);
  net.init(rng);
  std::vector<Parameter<float>*> params;
  net.collect(params);
  const auto path = std::filesystem::temp_directory_path() / "brakelab_ckpt_test.bin";
  nn::save_checkpoint(path, params, {{"kind", "test"}});

  nn::Mlp<float> other("net", 3, {5}, 2, nn::Activation::kTanh, 0.0);
  std::vector<Parameter<float>*> other_params;
  other.collect(other_params);
  auto meta = nn::load_checkpoint(path, other_params);
  EXPECT_EQ(meta.at("kind"), "test");
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i]->value, other_params[i]->value);

  nn::Mlp<float> wrong("net", 3, {6}, 2, nn::Activation::kTanh, 0.0);
  std::vector<Parameter<float>*> wrong_params;
  wrong.collect(wrong_params);
  EXPECT_THROW(nn::load_checkpoint(path, wrong_params), nn::CheckpointError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace brakelab

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

#include <random>

#include <gtest/gtest.h>

#include "brakelab/nn/nn.hpp"
#include "fd_oracle.hpp"

namespace brakelab {
namespace {

using nn::Matrix;
using nn::Parameter;
using nn::Tape;
using nn::Var;
using testing::check_gradients;
using testing::fill_normal;

constexpr double kTol = 1e-4;

// Random linear functional so every output element contributes to the loss.
Var<double> project(Tape<double>& t, Var<double> out, unsigned seed) {
  std::mt19937_64 rng(seed);
  Matrix<double> r(out.rows(), out.cols());
  fill_normal(r, rng);
  return nn::sum(nn::mul(out, t.constant(r)));
}

Parameter<double> random_param(const char* name, int rows, int cols, std::mt19937_64& rng,
                               double sd = 1.0) {
  Parameter<double> p(name, rows, cols);
  fill_normal(p.value, rng, sd);
  return p;
}

TEST(Gradients, SquareOfScalar) {
  Parameter<double> w("w", 1, 1);
  w.value(0, 0) = 3.0;
  Tape<double> t;
  auto loss = nn::sum(nn::square(t.parameter(w)));
  t.backward(loss);
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 6.0);
}

TEST(Gradients, DisconnectedParameterGetsZero) {
  Parameter<double> used("used", 2, 2);
  Parameter<double> unused("unused", 2, 2);
  used.value.setConstant(1.5);
  unused.value.setConstant(4.0);
  Tape<double> t;
  t.parameter(unused);
  t.backward(nn::sum(t.parameter(used)));
  EXPECT_TRUE(unused.grad.isZero());
  EXPECT_TRUE(used.grad.isOnes());
}

TEST(Gradients, ElementwiseOps) {
  std::mt19937_64 rng(1);
  auto a = random_param("a", 3, 4, rng);
  auto b = random_param("b", 3, 4, rng);
  auto res = check_gradients({&a, &b}, [&](Tape<double>& t) {
    auto x = t.parameter(a);
    auto y = t.parameter(b);
    auto s = nn::add(nn::mul(nn::sigmoid(x), nn::tanh(y)), nn::sub(nn::exp(nn::scale(x, 0.3)), nn::square(y)));
    s = nn::add_scalar(nn::relu(nn::add_scalar(s, 0.5)), -0.2);
    return project(t, s, 11);
  });
  EXPECT_LE(res.max_rel_error, kTol);
  EXPECT_EQ(res.checked, 24u);
}

TEST(Gradients, ClampPassesInsideRange) {
  std::mt19937_64 rng(2);
  auto a = random_param("a", 4, 5, rng, 2.0);
  auto res = check_gradients({&a}, [&](Tape<double>& t) {
    return project(t, nn::clamp(t.parameter(a), -1.0, 1.5), 3);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, ReductionsAndSlicing) {
  std::mt19937_64 rng(3);
  auto a = random_param("a", 3, 6, rng);
  auto b = random_param("b", 3, 2, rng);
  auto res = check_gradients({&a, &b}, [&](Tape<double>& t) {
    auto x = t.parameter(a);
    auto cat = nn::concat_cols<double>({nn::slice_cols(x, 1, 3), t.parameter(b), nn::slice_cols(x, 4, 2)});
    auto rows = nn::row_sum(nn::square(cat));
    return nn::add(nn::mean(rows), project(t, cat, 5));
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, RowStackingGatherAndMask) {
  std::mt19937_64 rng(31);
  auto a = random_param("a", 2, 5, rng);
  auto b = random_param("b", 3, 5, rng);
  nn::Matrix<double> mask(5, 3);
  fill_normal(mask, rng);
  auto res = check_gradients({&a, &b}, [&](Tape<double>& t) {
    auto stacked = nn::concat_rows<double>({t.parameter(a), t.parameter(b)});
    auto picked = nn::gather_cols(stacked, {4, 0, 4});
    return project(t, nn::mul_const(nn::square(picked), mask), 13);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, FullyConnectedNetwork) {
  std::mt19937_64 rng(4);
  nn::Mlp<double> net("net", 5, {7, 6}, 3, nn::Activation::kTanh, 0.0);
  net.init(rng);
  auto input = random_param("x", 4, 5, rng);
  std::vector<Parameter<double>*> params;
  net.collect(params);
  params.push_back(&input);
  auto res = check_gradients(params, [&](Tape<double>& t) {
    return project(t, net.forward(t, t.parameter(input)), 7);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, ReluNetworkAwayFromKinks) {
  std::mt19937_64 rng(5);
  nn::Mlp<double> net("net", 4, {8}, 2, nn::Activation::kRelu, 0.0);
  net.init(rng);
  auto input = random_param("x", 6, 4, rng);
  std::vector<Parameter<double>*> params;
  net.collect(params);
  params.push_back(&input);
  auto res = check_gradients(params, [&](Tape<double>& t) {
    return project(t, net.forward(t, t.parameter(input)), 9);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, GaussianHeadAndNll) {
  std::mt19937_64 rng(6);
  auto raw = random_param("raw", 5, 6, rng, 0.7);
  Matrix<double> target(5, 3);
  fill_normal(target, rng);
  auto res = check_gradients({&raw}, [&](Tape<double>& t) {
    auto head = nn::gaussian_head(t.parameter(raw));
    return nn::mean(nn::gaussian_nll(head.mean, head.log_std, target));
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, GroupedLogSoftmax) {
  std::mt19937_64 rng(7);
  auto logits = random_param("logits", 3, 16, rng);
  auto res = check_gradients({&logits}, [&](Tape<double>& t) {
    return project(t, nn::log_softmax_groups(t.parameter(logits), 4), 13);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, GruCellSingleStep) {
  std::mt19937_64 rng(8);
  nn::GruLayer<double> gru("gru", 3, 4);
  gru.init(rng);
  fill_normal(gru.b.value, rng, 0.3);
  auto x = random_param("x", 2, 3, rng);
  auto h = random_param("h", 2, 4, rng, 0.5);
  auto res = check_gradients({&gru.wx, &gru.wh, &gru.b, &x, &h}, [&](Tape<double>& t) {
    auto out = nn::gru_cell(t.parameter(x), t.parameter(h), t.parameter(gru.wx), t.parameter(gru.wh),
                            t.parameter(gru.b));
    return project(t, out, 17);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, GruUnrolledFiveStepsComposedAndFused) {
  std::mt19937_64 rng(9);
  nn::GruLayer<double> gru("gru", 3, 4);
  gru.init(rng);
  fill_normal(gru.b.value, rng, 0.3);
  constexpr int kSteps = 5;
  constexpr int kBatch = 2;
  auto xs = random_param("xs", kSteps * kBatch, 3, rng);
  auto h0 = random_param("h0", kBatch, 4, rng, 0.5);
  std::vector<Parameter<double>*> params{&gru.wx, &gru.wh, &gru.b, &xs, &h0};

  auto composed = [&](Tape<double>& t) {
    auto h = t.parameter(h0);
    auto x_all = t.parameter(xs);
    for (int s = 0; s < kSteps; ++s) {
      // Row block for step s, via a differentiable selection matrix.
      Matrix<double> sel = Matrix<double>::Zero(kBatch, kSteps * kBatch);
      for (int r = 0; r < kBatch; ++r) sel(r, s * kBatch + r) = 1.0;
      auto x = nn::matmul(t.constant(sel), x_all);
      h = nn::gru_cell(x, h, t.parameter(gru.wx), t.parameter(gru.wh), t.parameter(gru.b));
    }
    return h;
  };
  auto fused = [&](Tape<double>& t) {
    return nn::gru_sequence(t.parameter(xs), kSteps, t.parameter(h0), t.parameter(gru.wx),
                            t.parameter(gru.wh), t.parameter(gru.b));
  };

  auto res_c = check_gradients(params, [&](Tape<double>& t) { return project(t, composed(t), 19); });
  auto res_f = check_gradients(params, [&](Tape<double>& t) { return project(t, fused(t), 19); });
  EXPECT_LE(res_c.max_rel_error, kTol);
  EXPECT_LE(res_f.max_rel_error, kTol);

  Tape<double> t(false);
  Matrix<double> hc = composed(t).value();
  Matrix<double> hf = fused(t).value();
  EXPECT_LE((hc - hf).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Gradients, DropoutOffPathIsIdentity) {
  std::mt19937_64 rng(10);
  auto a = random_param("a", 3, 5, rng);
  auto res = check_gradients({&a}, [&](Tape<double>& t) {
    std::mt19937_64 drop_rng(0);
    return project(t, nn::dropout(t.parameter(a), 0.3, drop_rng, false), 23);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

TEST(Gradients, DropoutWithFixedMask) {
  std::mt19937_64 rng(11);
  auto a = random_param("a", 3, 5, rng);
  auto res = check_gradients({&a}, [&](Tape<double>& t) {
    std::mt19937_64 drop_rng(42);  // same mask on every evaluation
    return project(t, nn::dropout(t.parameter(a), 0.3, drop_rng, true), 29);
  });
  EXPECT_LE(res.max_rel_error, kTol);
}

}  // namespace
}  // namespace brakelab

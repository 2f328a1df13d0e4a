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

#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "brakelab/nn/ops.hpp"

namespace brakelab::nn {

enum class Activation { kRelu, kTanh };

// Layer list for one network: optional recurrent cell followed by fully
// connected hidden layers.
struct NetworkSpec {
  int gru_width = 0;  // 0 = no recurrent layer
  std::vector<int> fc_widths;
  Activation activation = Activation::kRelu;
  double dropout = 0.0;

  void validate() const {
    if (gru_width < 0) throw std::invalid_argument("NetworkSpec: negative recurrent width");
    for (int w : fc_widths) {
      if (w <= 0) throw std::invalid_argument("NetworkSpec: fully connected widths must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("NetworkSpec: dropout must be in [0,1)");
  }
};

// Uniform(-limit, limit) fill with limit = sqrt(6 / (fan_in + fan_out)).
template <class T, class Rng>
void glorot_uniform(Matrix<T>& m, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
}

template <class T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(const std::string& name, int in, int out)
      : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {}

  template <class Rng>
  void init(Rng& rng) {
    glorot_uniform(weight.value, rng);
    bias.value.setZero();
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    return linear(x, tape.parameter(weight), tape.parameter(bias));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <class T>
struct GruLayer {
  Parameter<T> wx;
  Parameter<T> wh;
  Parameter<T> b;
  int hidden = 0;

  GruLayer() = default;
  GruLayer(const std::string& name, int in, int width)
      : wx(name + ".wx", in, 3 * width), wh(name + ".wh", width, 3 * width), b(name + ".b", 1, 3 * width),
        hidden(width) {}

  template <class Rng>
  void init(Rng& rng) {
    glorot_uniform(wx.value, rng);
    glorot_uniform(wh.value, rng);
    b.value.setZero();
  }

  // x_seq: (steps * batch) x in, time-major. Starts from a zero hidden state.
  Var<T> run(Tape<T>& tape, Var<T> x_seq, Eigen::Index steps) {
    const Eigen::Index batch = x_seq.rows() / steps;
    Var<T> h0 = tape.constant(Matrix<T>::Zero(batch, hidden));
    return gru_sequence(x_seq, steps, h0, tape.parameter(wx), tape.parameter(wh), tape.parameter(b));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&wx);
    out.push_back(&wh);
    out.push_back(&b);
  }
};

template <class T>
Var<T> activate(Var<T> x, Activation a) {
  return a == Activation::kRelu ? relu(x) : tanh(x);
}

// Stack of fully connected layers: hidden layers use the activation (and
// dropout when training), the last layer is linear.
template <class T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, int in, const std::vector<int>& hidden, int out, Activation act,
      double dropout_rate)
      : act_(act), dropout_(dropout_rate) {
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers_.emplace_back(name + ".fc" + std::to_string(i), prev, hidden[i]);
      prev = hidden[i];
    }
    layers_.emplace_back(name + ".out", prev, out);
  }

  template <class Rng>
  void init(Rng& rng) {
    for (auto& l : layers_) l.init(rng);
  }

  template <class Rng>
  Var<T> forward(Tape<T>& tape, Var<T> x, Rng* rng, bool training) {
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
      x = activate(layers_[i](tape, x), act_);
      if (training && dropout_ > 0.0 && rng != nullptr) x = dropout(x, dropout_, *rng, true);
    }
    return layers_.back()(tape, x);
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    std::mt19937_64* none = nullptr;
    return forward(tape, x, none, false);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto& l : layers_) l.collect(out);
  }

  int output_width() const { return static_cast<int>(layers_.back().bias.value.cols()); }

 private:
  std::vector<Linear<T>> layers_;
  Activation act_ = Activation::kRelu;
  double dropout_ = 0.0;
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

// Mean and clamped log standard deviation of a diagonal Gaussian.
template <class T>
struct GaussianHead {
  Var<T> mean;
  Var<T> log_std;
};

// Splits a 2D-wide raw output into a GaussianHead over D dimensions.
template <class T>
GaussianHead<T> gaussian_head(Var<T> raw) {
  if (raw.cols() % 2 != 0) throw ShapeError("gaussian_head: raw output width must be even");
  const Eigen::Index d = raw.cols() / 2;
  return {slice_cols(raw, 0, d),
          clamp(slice_cols(raw, d, d), static_cast<T>(kLogStdMin), static_cast<T>(kLogStdMax))};
}

template <class T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace brakelab::nn

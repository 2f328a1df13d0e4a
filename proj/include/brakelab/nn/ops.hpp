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
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "brakelab/nn/tape.hpp"

// Differentiable kernels. Every op evaluates its forward value eagerly and
// records a closure that maps the upstream gradient onto its inputs.
namespace brakelab::nn {

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> out = a.value() * b.value();
  return a.tape->push(std::move(out), {a, b},
                      [a, b](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        if (tp.needs_grad(a)) tp.accumulate(a, g * b.value().transpose());
                        if (tp.needs_grad(b)) tp.accumulate(b, a.value().transpose() * g);
                      });
}

// x * W + b, with the 1 x out bias broadcast over rows.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  detail::require(x.cols() == w.rows(), "linear: input width differs from weight rows");
  detail::require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias must be 1 x out");
  Matrix<T> out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return x.tape->push(std::move(out), {x, w, b},
                      [x, w, b](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        if (tp.needs_grad(x)) tp.accumulate(x, g * w.value().transpose());
                        if (tp.needs_grad(w)) tp.accumulate(w, x.value().transpose() * g);
                        if (tp.needs_grad(b)) tp.accumulate(b, g.colwise().sum());
                      });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_shape(a, b, "add");
  Matrix<T> out = a.value() + b.value();
  return a.tape->push(std::move(out), {a, b},
                      [a, b](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, g);
                        tp.accumulate(b, g);
                      });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_shape(a, b, "sub");
  Matrix<T> out = a.value() - b.value();
  return a.tape->push(std::move(out), {a, b},
                      [a, b](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, g);
                        tp.accumulate(b, -g);
                      });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_shape(a, b, "mul");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(out), {a, b},
                      [a, b](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
                        if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
                      });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Matrix<T> out = a.value() * s;
  return a.tape->push(std::move(out), {a},
                      [a, s](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, g * s);
                      });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Matrix<T> out = a.value().array() + s;
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, g);
                      });
}

template <class T>
Var<T> relu(Var<T> a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>& y) {
                        tp.accumulate(a, (y.array() > T(0)).select(g, T(0)));
                      });
}

template <class T>
Var<T> tanh(Var<T> a) {
  Matrix<T> out = a.value().array().tanh();
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>& y) {
                        tp.accumulate(a, g.cwiseProduct((T(1) - y.array().square()).matrix()));
                      });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Matrix<T> out = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>& y) {
                        tp.accumulate(a, g.cwiseProduct((y.array() * (T(1) - y.array())).matrix()));
                      });
}

template <class T>
Var<T> exp(Var<T> a) {
  Matrix<T> out = a.value().array().exp();
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>& y) {
                        tp.accumulate(a, g.cwiseProduct(y));
                      });
}

template <class T>
Var<T> square(Var<T> a) {
  Matrix<T> out = a.value().array().square();
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, (g.array() * T(2) * a.value().array()).matrix());
                      });
}

// Gradient passes only where lo < x < hi.
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  Matrix<T> out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->push(std::move(out), {a},
                      [a, lo, hi](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        const auto& x = a.value().array();
                        tp.accumulate(a, ((x > lo) && (x < hi)).select(g, T(0)));
                      });
}

// Value copy with no gradient path (used to truncate backprop through time).
template <class T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

template <class T>
Var<T> sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, Matrix<T>::Constant(a.rows(), a.cols(), g(0, 0)));
                      });
}

template <class T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return a.tape->push(std::move(out), {a},
                      [a, n](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, Matrix<T>::Constant(a.rows(), a.cols(), g(0, 0) / n));
                      });
}

// Per-row sum: B x D -> B x 1.
template <class T>
Var<T> row_sum(Var<T> a) {
  Matrix<T> out = a.value().rowwise().sum();
  return a.tape->push(std::move(out), {a},
                      [a](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        tp.accumulate(a, g.replicate(1, a.cols()));
                      });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape->push(
      std::move(out), parts, [parts](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
        Eigen::Index off = 0;
        for (const auto& p : parts) {
          if (tp.needs_grad(p)) tp.accumulate(p, g.middleCols(off, p.cols()));
          off += p.cols();
        }
      });
}

template <class T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.cols(),
                  "slice_cols: range out of bounds");
  Matrix<T> out = a.value().middleCols(start, count);
  return a.tape->push(std::move(out), {a},
                      [a, start, count](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
                        Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
                        full.middleCols(start, count) = g;
                        tp.accumulate(a, full);
                      });
}

// Stacks blocks vertically (used to build time-major sequences).
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape->push(
      std::move(out), parts, [parts](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
        Eigen::Index off = 0;
        for (const auto& p : parts) {
          if (tp.needs_grad(p)) tp.accumulate(p, g.middleRows(off, p.rows()));
          off += p.rows();
        }
      });
}

// Picks columns by index; repeated indices accumulate their gradients.
template <class T>
Var<T> gather_cols(Var<T> a, const std::vector<Eigen::Index>& idx) {
  for (auto i : idx) detail::require(i >= 0 && i < a.cols(), "gather_cols: index out of range");
  Matrix<T> out(a.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = a.value().col(idx[k]);
  return a.tape->push(std::move(out), {a}, [a, idx](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) full.col(idx[k]) += g.col(static_cast<Eigen::Index>(k));
    tp.accumulate(a, full);
  });
}

// Elementwise product with a fixed matrix (masks, weights).
template <class T>
Var<T> mul_const(Var<T> a, const Matrix<T>& m) {
  detail::require(a.rows() == m.rows() && a.cols() == m.cols(), "mul_const: shape mismatch");
  Matrix<T> out = a.value().cwiseProduct(m);
  return a.tape->push(std::move(out), {a}, [a, m](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
    tp.accumulate(a, g.cwiseProduct(m));
  });
}

// Softmax over consecutive column groups of width `group` (one categorical
// distribution per group, per row).
template <class T>
Matrix<T> softmax_groups_value(const Matrix<T>& logits, Eigen::Index group) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); c += group) {
      auto in = logits.row(r).segment(c, group);
      const T mx = in.maxCoeff();
      auto e = (in.array() - mx).exp();
      out.row(r).segment(c, group) = e / e.sum();
    }
  }
  return out;
}

template <class T>
Var<T> log_softmax_groups(Var<T> logits, Eigen::Index group) {
  detail::require(group > 0 && logits.cols() % group == 0,
                  "log_softmax_groups: width not divisible by group");
  const Matrix<T>& x = logits.value();
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); c += group) {
      auto in = x.row(r).segment(c, group);
      const T mx = in.maxCoeff();
      const T lse = mx + std::log((in.array() - mx).exp().sum());
      out.row(r).segment(c, group) = in.array() - lse;
    }
  }
  return logits.tape->push(
      std::move(out), {logits},
      [logits, group](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>& y) {
        Matrix<T> dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          for (Eigen::Index c = 0; c < y.cols(); c += group) {
            auto gs = g.row(r).segment(c, group);
            auto p = y.row(r).segment(c, group).array().exp();
            dx.row(r).segment(c, group) = gs.array() - p * gs.sum();
          }
        }
        tp.accumulate(logits, dx);
      });
}

// Per-row diagonal Gaussian negative log-likelihood:
//   sum_d [ log_std_d + (target_d - mean_d)^2 / (2 sigma_d^2) + 0.5 log(2 pi) ]
// Returns B x 1. `target` is treated as data (no gradient).
template <class T>
Var<T> gaussian_nll(Var<T> mean, Var<T> log_std, const Matrix<T>& target) {
  detail::same_shape(mean, log_std, "gaussian_nll");
  detail::require(target.rows() == mean.rows() && target.cols() == mean.cols(),
                  "gaussian_nll: target shape differs");
  const T half_log_2pi = T(0.5) * std::log(T(2) * std::numbers::pi_v<T>);
  auto inv_var = (T(-2) * log_std.value().array()).exp();
  auto diff = target.array() - mean.value().array();
  Matrix<T> per = log_std.value().array() + T(0.5) * diff.square() * inv_var + half_log_2pi;
  Matrix<T> out = per.rowwise().sum();
  return mean.tape->push(
      std::move(out), {mean, log_std},
      [mean, log_std, target](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
        auto iv = (T(-2) * log_std.value().array()).exp();
        auto d = target.array() - mean.value().array();
        auto gb = g.replicate(1, mean.cols()).array();
        if (tp.needs_grad(mean)) tp.accumulate(mean, (-gb * d * iv).matrix());
        if (tp.needs_grad(log_std)) {
          tp.accumulate(log_std, (gb * (T(1) - d.square() * iv)).matrix());
        }
      });
}

// Inverted dropout. Identity when `training` is false or rate == 0.
template <class T, class Rng>
Var<T> dropout(Var<T> x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale_kept = static_cast<T>(1.0 / (1.0 - rate));
  Matrix<T> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = keep(rng) ? scale_kept : T(0);
  }
  return mul(x, x.tape->constant(std::move(mask)));
}

// Single gated-recurrent update composed from primitive ops. Weight layout:
// wx (in x 3H), wh (H x 3H), b (1 x 3H), gate blocks ordered [reset|update|new].
template <class T>
Var<T> gru_cell(Var<T> x, Var<T> h, Var<T> wx, Var<T> wh, Var<T> b) {
  const Eigen::Index hidden = h.cols();
  detail::require(wx.cols() == 3 * hidden && wh.cols() == 3 * hidden && wh.rows() == hidden,
                  "gru_cell: weight shapes inconsistent with hidden width");
  Var<T> gx = linear(x, wx, b);
  Var<T> gh = matmul(h, wh);
  Var<T> r = sigmoid(add(slice_cols(gx, 0, hidden), slice_cols(gh, 0, hidden)));
  Var<T> z = sigmoid(add(slice_cols(gx, hidden, hidden), slice_cols(gh, hidden, hidden)));
  Var<T> n = tanh(add(slice_cols(gx, 2 * hidden, hidden), mul(r, slice_cols(gh, 2 * hidden, hidden))));
  // h' = (1 - z) * n + z * h = n + z * (h - n)
  return add(n, mul(z, sub(h, n)));
}

// Fused GRU over a whole sequence with hand-written backprop through time.
// x_seq stacks `steps` time blocks of `batch` rows each (time-major). Returns
// the final hidden state (batch x H). Numerically identical update to gru_cell.
template <class T>
Var<T> gru_sequence(Var<T> x_seq, Eigen::Index steps, Var<T> h0, Var<T> wx, Var<T> wh,
                    Var<T> b) {
  const Eigen::Index batch = h0.rows();
  const Eigen::Index hidden = h0.cols();
  detail::require(steps > 0 && x_seq.rows() == steps * batch,
                  "gru_sequence: input rows must equal steps * batch");
  detail::require(wx.rows() == x_seq.cols() && wx.cols() == 3 * hidden,
                  "gru_sequence: input weight shape");
  detail::require(wh.rows() == hidden && wh.cols() == 3 * hidden, "gru_sequence: hidden weight shape");
  detail::require(b.rows() == 1 && b.cols() == 3 * hidden, "gru_sequence: bias shape");

  struct Cache {
    std::vector<Matrix<T>> h_prev, r, z, n, ghn;
  };
  auto cache = std::make_shared<Cache>();
  const bool keep = x_seq.tape->recording();

  Matrix<T> gx_all = x_seq.value() * wx.value();
  gx_all.rowwise() += b.value().row(0);
  Matrix<T> h = h0.value();
  const auto& whv = wh.value();
  for (Eigen::Index t = 0; t < steps; ++t) {
    auto gx = gx_all.middleRows(t * batch, batch);
    Matrix<T> gh = h * whv;
    Matrix<T> r = (T(1) / (T(1) + (-(gx.leftCols(hidden) + gh.leftCols(hidden)).array()).exp())).matrix();
    Matrix<T> z = (T(1) / (T(1) + (-(gx.middleCols(hidden, hidden) + gh.middleCols(hidden, hidden)).array()).exp())).matrix();
    Matrix<T> ghn = gh.rightCols(hidden);
    Matrix<T> n = (gx.rightCols(hidden).array() + r.array() * ghn.array()).tanh().matrix();
    Matrix<T> next = n.array() + z.array() * (h.array() - n.array());
    if (keep) {
      cache->h_prev.push_back(std::move(h));
      cache->r.push_back(std::move(r));
      cache->z.push_back(std::move(z));
      cache->n.push_back(std::move(n));
      cache->ghn.push_back(std::move(ghn));
    }
    h = std::move(next);
  }

  return x_seq.tape->push(
      std::move(h), {x_seq, h0, wx, wh, b},
      [=](Tape<T>& tp, const Matrix<T>& g, const Matrix<T>&) {
        const auto& xv = x_seq.value();
        const auto& wxv = wx.value();
        const auto& whv2 = wh.value();
        Matrix<T> dgx_all(steps * batch, 3 * hidden);
        Matrix<T> dwh = Matrix<T>::Zero(hidden, 3 * hidden);
        Matrix<T> dh = g;
        Matrix<T> dgh(batch, 3 * hidden);
        for (Eigen::Index t = steps; t-- > 0;) {
          const auto& hp = cache->h_prev[t];
          const auto& r = cache->r[t].array();
          const auto& z = cache->z[t].array();
          const auto& n = cache->n[t].array();
          const auto& ghn = cache->ghn[t].array();
          auto dha = dh.array();
          auto dan = (dha * (T(1) - z)) * (T(1) - n.square());
          auto daz = (dha * (hp.array() - n)) * z * (T(1) - z);
          auto dar = (dan * ghn) * r * (T(1) - r);
          auto dgx = dgx_all.middleRows(t * batch, batch);
          dgx.leftCols(hidden) = dar.matrix();
          dgx.middleCols(hidden, hidden) = daz.matrix();
          dgx.rightCols(hidden) = dan.matrix();
          dgh.leftCols(hidden) = dgx.leftCols(hidden);
          dgh.middleCols(hidden, hidden) = dgx.middleCols(hidden, hidden);
          dgh.rightCols(hidden) = (dan * r).matrix();
          dwh.noalias() += hp.transpose() * dgh;
          Matrix<T> dh_prev = (dha * z).matrix();
          dh_prev.noalias() += dgh * whv2.transpose();
          dh = std::move(dh_prev);
        }
        if (tp.needs_grad(x_seq)) tp.accumulate(x_seq, dgx_all * wxv.transpose());
        if (tp.needs_grad(h0)) tp.accumulate(h0, dh);
        if (tp.needs_grad(wx)) tp.accumulate(wx, xv.transpose() * dgx_all);
        if (tp.needs_grad(wh)) tp.accumulate(wh, dwh);
        if (tp.needs_grad(b)) tp.accumulate(b, dgx_all.colwise().sum());
      });
}

}  // namespace brakelab::nn

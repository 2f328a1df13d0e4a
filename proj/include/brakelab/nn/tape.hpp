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

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace brakelab::nn {

// Row-major 2-D tensor. Rows are batch elements, columns are features.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)),
        value(Matrix<T>::Zero(rows, cols)),
        grad(Matrix<T>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep over the node list is a valid topological order for backprop.
template <class T>
class Tape {
 public:
  // Arguments: tape, upstream gradient of the node, the node's own value.
  using BackwardFn = std::function<void(Tape&, const Matrix<T>&, const Matrix<T>&)>;

  explicit Tape(bool record = true, bool check_finite = true)
      : record_(record), check_finite_(check_finite) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Matrix<T> value) { return push_node(std::move(value), false, nullptr, {}); }

  Var<T> parameter(Parameter<T>& p) {
    return push_node(p.value, record_, &p, {});
  }

  const Matrix<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Appends an op result. `backward` receives the upstream gradient of this
  // node and must call accumulate() for each parent that needs a gradient.
  Var<T> push(Matrix<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    bool needs = false;
    if (record_) {
      for (const auto& p : parents) needs = needs || nodes_[p.id].needs_grad;
    }
    return push_node(std::move(value), needs, nullptr, needs ? std::move(backward) : BackwardFn{});
  }

  Var<T> push(Matrix<T> value, const std::vector<Var<T>>& parents, BackwardFn backward) {
    bool needs = false;
    if (record_) {
      for (const auto& p : parents) needs = needs || nodes_[p.id].needs_grad;
    }
    return push_node(std::move(value), needs, nullptr, needs ? std::move(backward) : BackwardFn{});
  }

  template <class Derived>
  void accumulate(Var<T> v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape. Parameter gradients are
  // added into Parameter::grad.
  void backward(Var<T> loss) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (value(loss).size() != 1) throw ShapeError("backward expects a scalar loss");
    Node& root = nodes_[loss.id];
    if (!root.needs_grad) return;
    root.grad = Matrix<T>::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, n.grad, n.value);
      }
    }
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  Var<T> push_node(Matrix<T> value, bool needs, Parameter<T>* param, BackwardFn backward) {
    if (check_finite_ && !value.allFinite()) {
      throw NumericalError("non-finite value produced at tape node " +
                           std::to_string(nodes_.size()));
    }
    nodes_.push_back(Node{std::move(value), Matrix<T>{}, std::move(backward), param, needs});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool record_;
  bool check_finite_;
};

}  // namespace brakelab::nn

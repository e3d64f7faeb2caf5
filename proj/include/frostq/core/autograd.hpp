// Copyright 2026 The FrostQ Authors.
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

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "frostq/core/tensor.hpp"

namespace frostq {

/// A tensor that can take part in a recorded computation.
template <class T>
struct Variable {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a gradient reaches this variable
  bool requires_grad = false;
  std::string name;

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    } else {
      grad.fill(T{0});
    }
  }

  /// Grad buffer, allocated on first use.
  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
using Var = std::shared_ptr<Variable<T>>;

template <class T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false,
                std::string name = {}) {
  auto v = std::make_shared<Variable<T>>();
  v->value = std::move(value);
  v->requires_grad = requires_grad;
  v->name = std::move(name);
  return v;
}

template <class T>
Var<T> parameter(Tensor<T> value, std::string name) {
  return make_var(std::move(value), true, std::move(name));
}

/// Records backward closures in execution order. Execution order is a
/// topological order of the computation, so replaying it in reverse visits
/// every node after all of its consumers, exactly once.
template <class T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return entries_.size(); }

  /// True when an op with these inputs must record its backward.
  template <class... Vs>
  bool needs(const Vs&... inputs) const {
    return record_ && ((inputs && inputs->requires_grad) || ...);
  }

  void push(std::function<void()> backward) {
    if (consumed_) {
      throw ContractError("Tape: ops recorded after backward(); start a new tape");
    }
    entries_.push_back(std::move(backward));
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable variable.
  /// Recorded intermediate state is released afterwards.
  void backward(const Var<T>& loss) {
    if (!record_) {
      throw ContractError("backward: tape was created without recording");
    }
    if (consumed_) {
      throw ContractError("backward: called twice without a new forward pass");
    }
    if (!loss || loss->value.numel() != 1) {
      throw ContractError("backward: loss must be a scalar");
    }
    consumed_ = true;
    loss->grad_buffer().fill(T{1});
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

  bool consumed() const noexcept { return consumed_; }

 private:
  bool record_;
  bool consumed_ = false;
  std::vector<std::function<void()>> entries_;
};

}  // namespace frostq

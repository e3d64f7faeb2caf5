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

#include <stdexcept>
#include <string>

namespace frostq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree. `axis` names the offending dimension.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& op, const std::string& axis,
                 const std::string& detail)
      : Error(op + ": dimension mismatch on axis '" + axis + "': " + detail),
        axis_(axis) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

/// A call violated an operation's precondition or the model's lifecycle.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible files (datasets, checkpoints, configs).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace frostq

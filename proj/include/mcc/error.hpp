// Copyright 2026 The mcount Authors
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

namespace mcc {

/// Bad input from the caller: malformed annotations, shape mismatches,
/// unknown config keys. Maps to exit code 1 / MCC_ERR_VALIDATION.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while doing otherwise valid work (I/O, non-finite loss).
/// Maps to exit code 2 / MCC_ERR_RUNTIME.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail_validation(const std::string& what) { throw ValidationError(what); }
[[noreturn]] inline void fail_runtime(const std::string& what) { throw RuntimeError(what); }

}  // namespace mcc

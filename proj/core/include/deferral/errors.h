// Copyright 2026 The Deferral Authors. All Rights Reserved.
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

#ifndef DEFERRAL_ERRORS_H_
#define DEFERRAL_ERRORS_H_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace deferral {

// Base class for every error thrown by the library. The CLI maps the
// concrete subclasses onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or construction parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed, missing or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Mismatched shapes or indices between cooperating objects, e.g. a cost
// model with fewer experts than the scorer has deferral outputs.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// A gradient or loss became NaN/Inf. Carries the offending sample (for
// gradient evaluation) or epoch (for training loops).
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, std::size_t index)
      : Error(what), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

class DivergenceError : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

}  // namespace deferral

#endif  // DEFERRAL_ERRORS_H_

/*
 * Copyright 2026 The gbmdebug Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace gbm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Shape/size disagreement between rasters, patches or vectors.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Dataset generation failed (pool exhausted, rejection budget exceeded).
class GenerationError : public Error {
public:
  using Error::Error;
};

/// A concept profile was evaluated against the wrong reference set.
class ProfileError : public Error {
public:
  using Error::Error;
};

/// Non-finite loss or parameters during optimization.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Operation not accepted in the current session state.
class StateError : public Error {
public:
  using Error::Error;
};

/// Feedback or request payload that does not resolve against session state.
class ValidationError : public Error {
public:
  ValidationError(std::string field, const std::string& message)
      : Error(message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

/// Unreadable, corrupt or unsupported file.
class FormatError : public Error {
public:
  using Error::Error;
};

}  // namespace gbm

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ddtrack {

/// Base of all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied value or file violates a documented precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Tensor operands whose shapes do not conform.
class ShapeError : public InputError {
 public:
  using InputError::InputError;
};

/// Something that must hold by construction did not (non-finite loss, ...).
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace ddtrack

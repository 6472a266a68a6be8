// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace muap {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the differentiation tape (non-scalar root, unrecorded root,
/// tensors from two different tapes in one op).
class TapeError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DataFormatError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { kBadMagic, kVersionMismatch, kTruncated, kChecksum, kIo, kMalformed };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Training or fine-tuning left the finite range.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A pool cannot supply the requested episode shape.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Tasks whose optimizee shapes differ were given to a method that shares
/// one optimizee across tasks.
class IncompatibleTasksError : public Error {
 public:
  using Error::Error;
};

/// A per-source artifact was asked to handle a source it was not built for.
class DispatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace muap

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace zsumm {

enum class ErrorCode {
  kInvalidArgument = 1,
  kShapeMismatch,
  kOutOfRange,
  kIo,
  kFormat,
  kChecksum,
  kVersion,
  kNumeric,
};

/// Base of every exception thrown by the library. The C API maps `code()`
/// onto its status enum.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& w)
      : Error(ErrorCode::kInvalidArgument, w) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& w)
      : Error(ErrorCode::kShapeMismatch, w) {}
};

class OutOfRange : public Error {
 public:
  explicit OutOfRange(const std::string& w) : Error(ErrorCode::kOutOfRange, w) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& w) : Error(ErrorCode::kIo, w) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& w) : Error(ErrorCode::kFormat, w) {}
};

class ChecksumError : public Error {
 public:
  explicit ChecksumError(const std::string& w)
      : Error(ErrorCode::kChecksum, w) {}
};

class VersionError : public Error {
 public:
  explicit VersionError(const std::string& w) : Error(ErrorCode::kVersion, w) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& w) : Error(ErrorCode::kNumeric, w) {}
};

}  // namespace zsumm

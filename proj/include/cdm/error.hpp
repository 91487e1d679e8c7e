#pragma once

#include <stdexcept>
#include <string>

namespace cdm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument, shape mismatch or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (unreadable, unwritable, missing).
class IoError : public Error {
 public:
  using Error::Error;
};

/// A file was readable but its contents are not a valid record.
class FormatError : public IoError {
 public:
  enum class Kind { kBadMagic, kBadVersion, kBadDimensions, kChecksum, kBadField };

  FormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage was requested before the stage it depends on.
class StageOrderError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdm

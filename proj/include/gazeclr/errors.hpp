#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gazeclr {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument that does not fit a more specific category.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A direction or embedding with zero (or non-finite) norm.
class InvalidDirection : public Error {
 public:
  using Error::Error;
};

/// Yaw is undefined at |g_y| = 1.
class DegeneratePoleError : public Error {
 public:
  using Error::Error;
};

/// A value violated a documented type invariant (e.g. a non-rotation matrix).
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

class InsufficientViewsError : public Error {
 public:
  using Error::Error;
};

class EmptyBatchError : public Error {
 public:
  using Error::Error;
};

class MissingViewError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

/// Manifest or other data-layer validation failure.
class DataError : public Error {
 public:
  using Error::Error;
};

class IncompleteGroupError : public DataError {
 public:
  using DataError::DataError;
};

class MissingLabelError : public DataError {
 public:
  using DataError::DataError;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Truncated or corrupted weights blob.
class IntegrityError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Version or architecture mismatch between a checkpoint and its consumer.
class IncompatibleCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Training loss became non-finite or exceeded the guard threshold.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step, double loss)
      : Error(what), step_(step), loss_(loss) {}
  long step() const noexcept { return step_; }
  double loss() const noexcept { return loss_; }

 private:
  long step_;
  double loss_;
};

/// Malformed delimited input; carries the 1-based offending line.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class EmptyPlotError : public Error {
 public:
  using Error::Error;
};

}  // namespace gazeclr

#pragma once

#include <stdexcept>
#include <string>

namespace advcheck {

// Mirrors advcheck_status in the C header; values must stay in sync.
enum class ErrorCode : int {
  invalid_argument = 1,
  shape_mismatch = 2,
  numeric = 3,
  format = 4,
  io = 5,
  training = 6,
  data = 7,
  quota = 8,
  compatibility = 9,
  structure = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ErrorCode::invalid_argument, what) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& what) : Error(ErrorCode::shape_mismatch, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCode::numeric, what) {}
};

/// Malformed file contents. `field()` names the offending header field or record.
class FormatError : public Error {
 public:
  FormatError(std::string field, const std::string& what)
      : Error(ErrorCode::format, field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::io, what) {}
};

class TrainingError : public Error {
 public:
  TrainingError(int epoch, const std::string& what)
      : Error(ErrorCode::training, "epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCode::data, what) {}
};

class QuotaError : public Error {
 public:
  QuotaError(std::size_t achieved, std::size_t requested, const std::string& what)
      : Error(ErrorCode::quota, what + " (achieved " + std::to_string(achieved) + " of " +
                                    std::to_string(requested) + ")"),
        achieved_(achieved) {}
  std::size_t achieved() const noexcept { return achieved_; }

 private:
  std::size_t achieved_;
};

class CompatibilityError : public Error {
 public:
  explicit CompatibilityError(const std::string& what) : Error(ErrorCode::compatibility, what) {}
};

class StructureError : public Error {
 public:
  explicit StructureError(const std::string& what) : Error(ErrorCode::structure, what) {}
};

}  // namespace advcheck

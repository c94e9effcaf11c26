#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mimicry {

/// Invalid argument or violated precondition.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset manifest is malformed or inconsistent.
class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged or missed its convergence thresholds. Carries the
/// recorded loss trace so callers can report it.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::vector<double> loss_trace)
      : std::runtime_error(what), loss_trace_(std::move(loss_trace)) {}

  const std::vector<double>& loss_trace() const noexcept { return loss_trace_; }

 private:
  std::vector<double> loss_trace_;
};

/// Annotation data is inconsistent with the study plan.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Some expected (pair, annotator) vote slots are missing.
class PartialDataError : public DataError {
 public:
  PartialDataError(const std::string& what, std::vector<std::string> missing)
      : DataError(what), missing_(std::move(missing)) {}

  const std::vector<std::string>& missing_slots() const noexcept { return missing_; }

 private:
  std::vector<std::string> missing_;
};

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// studyd protocol errors
class AuthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SequenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mimicry

#pragma once

#include <stdexcept>
#include <string>

namespace gfr {

// Error categories. The CLI maps each category to a process exit code.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or call sequence (bad split, unknown method, t = 1 for a replay op, ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed arguments: shape mismatch, label out of range, empty batch.
class InputError : public Error {
public:
  using Error::Error;
};

/// Parameter estimation failed (e.g. too few samples for a class).
class EstimationError : public Error {
public:
  using Error::Error;
};

/// Optimization diverged.
class TrainingError : public Error {
public:
  using Error::Error;
};

class AnalysisError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kConfig = 2;
inline constexpr int kRuntime = 3;
inline constexpr int kIo = 4;
}  // namespace exit_code

}  // namespace gfr

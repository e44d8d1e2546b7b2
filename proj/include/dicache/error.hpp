#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dicache {

enum class ErrorKind {
  InvalidRange,
  ShapeMismatch,
  ZeroReferenceNorm,
  LengthMismatch,
  DegenerateSequence,
  DegenerateReference,
  BadGrid,
  InvalidConfig,
  OutOfRangeTime,
  BadProbeDepth,
  InvalidFraction,
  InvalidInterval,
  InvalidLayers,
  LayerNotRecorded,
  BadSchedule,
  NonFinite,
  InvariantViolation,
  IoFailure,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidRange: return "InvalidRange";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::ZeroReferenceNorm: return "ZeroReferenceNorm";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::DegenerateSequence: return "DegenerateSequence";
    case ErrorKind::DegenerateReference: return "DegenerateReference";
    case ErrorKind::BadGrid: return "BadGrid";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::OutOfRangeTime: return "OutOfRangeTime";
    case ErrorKind::BadProbeDepth: return "BadProbeDepth";
    case ErrorKind::InvalidFraction: return "InvalidFraction";
    case ErrorKind::InvalidInterval: return "InvalidInterval";
    case ErrorKind::InvalidLayers: return "InvalidLayers";
    case ErrorKind::LayerNotRecorded: return "LayerNotRecorded";
    case ErrorKind::BadSchedule: return "BadSchedule";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::IoFailure: return "IoFailure";
  }
  return "Unknown";
}

// Exception carrying a machine-checkable kind. The message is prefixed with
// the kind name so diagnostics stay greppable.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  // Message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

// Process exit codes used by the command-line tool.
enum class ExitCode : int { Ok = 0, ConfigError = 2, NumericError = 3, IoError = 4 };

inline ExitCode exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::IoFailure:
      return ExitCode::IoError;
    case ErrorKind::InvalidRange:
    case ErrorKind::BadGrid:
    case ErrorKind::InvalidConfig:
    case ErrorKind::OutOfRangeTime:
    case ErrorKind::BadProbeDepth:
    case ErrorKind::InvalidFraction:
    case ErrorKind::InvalidInterval:
    case ErrorKind::InvalidLayers:
    case ErrorKind::LayerNotRecorded:
    case ErrorKind::BadSchedule:
      return ExitCode::ConfigError;
    default:
      return ExitCode::NumericError;
  }
}

}  // namespace dicache

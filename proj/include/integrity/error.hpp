#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace integrity {

enum class ErrorCode {
  TooFewSamples,
  NonFiniteInput,
  DimensionMismatch,
  SingularCovariance,
  InvalidArgument,
  InvalidDegreesOfFreedom,
  EmptySequence,
  EmptyActionSet,
  EmptyLibrary,
  EmptyScoreSet,
  UnknownPrompt,
  InsufficientPool,
  PoolExhausted,
  BadMagic,
  VersionUnsupported,
  TruncatedPayload,
  NonFiniteValue,
  Io,
  Transport,
  ProtocolViolation,
  RemoteError,
  EnvironmentFailure,
  ConfigInvalid,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::SingularCovariance: return "SingularCovariance";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidDegreesOfFreedom: return "InvalidDegreesOfFreedom";
    case ErrorCode::EmptySequence: return "EmptySequence";
    case ErrorCode::EmptyActionSet: return "EmptyActionSet";
    case ErrorCode::EmptyLibrary: return "EmptyLibrary";
    case ErrorCode::EmptyScoreSet: return "EmptyScoreSet";
    case ErrorCode::UnknownPrompt: return "UnknownPrompt";
    case ErrorCode::InsufficientPool: return "InsufficientPool";
    case ErrorCode::PoolExhausted: return "PoolExhausted";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Transport: return "Transport";
    case ErrorCode::ProtocolViolation: return "ProtocolViolation";
    case ErrorCode::RemoteError: return "RemoteError";
    case ErrorCode::EnvironmentFailure: return "EnvironmentFailure";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Failures coming out of a feature source. The automaton and verifier treat
/// these as environment failures and attach whatever partial state they have.
inline bool is_environment_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::PoolExhausted:
    case ErrorCode::Transport:
    case ErrorCode::ProtocolViolation:
    case ErrorCode::RemoteError:
    case ErrorCode::Io:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionUnsupported:
    case ErrorCode::TruncatedPayload:
    case ErrorCode::NonFiniteValue:
    case ErrorCode::UnknownPrompt:
    case ErrorCode::EnvironmentFailure:
      return true;
    default:
      return false;
  }
}

}  // namespace integrity
